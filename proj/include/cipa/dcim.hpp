#pragma once

#include <vector>

#include "cipa/ssm.hpp"
#include "cipa/vss.hpp"

namespace cipa {

// ---------------------------------------------------------------------------
// Dynamic Cross-Modality Interaction Module.
//
// One pathway tokenizes its map into n regional tokens (conv stem with total
// stride r); the other keeps full resolution and splits into n regions of
// m = r*r local tokens. A region Mamba block mixes the regional sequence, a
// local Mamba block mixes each region's local sequence independently, and
// fusion broadcasts each (bridge-projected) regional token additively onto
// its m local tokens before folding back to [H,W,C].
// ---------------------------------------------------------------------------

struct RegionGeometry {
    std::size_t H, W, r;

    RegionGeometry(std::size_t H_, std::size_t W_, std::size_t r_) : H(H_), W(W_), r(r_) {
        if (r == 0 || H % r || W % r)
            throw ContractError("region geometry: r=" + std::to_string(r) +
                                " does not divide " + std::to_string(H) + "x" +
                                std::to_string(W));
    }

    std::size_t n() const { return (H / r) * (W / r); }
    std::size_t m() const { return r * r; }
};

namespace detail {

// Pixel permutation taking row-major [H*W] to region-major [n*m] order:
// regions row-major over the grid, locals row-major within each region.
inline std::vector<std::size_t> region_perm(const RegionGeometry& g) {
    std::vector<std::size_t> perm(g.H * g.W);
    const std::size_t gw = g.W / g.r;
    std::size_t k = 0;
    for (std::size_t bi = 0; bi < g.H / g.r; ++bi)
        for (std::size_t bj = 0; bj < gw; ++bj)
            for (std::size_t ly = 0; ly < g.r; ++ly)
                for (std::size_t lx = 0; lx < g.r; ++lx)
                    perm[k++] = (bi * g.r + ly) * g.W + (bj * g.r + lx);
    return perm;
}

}  // namespace detail

// [H,W,C] -> [n,m,C] local-token layout (pure permutation).
template <typename T>
Tensor<T> region_split(const Tensor<T>& x, const RegionGeometry& g) {
    if (x.rank() != 3 || x.extent(0) != g.H || x.extent(1) != g.W)
        throw ShapeError("region_split: input " + shape_str(x.shape()) +
                         " does not match geometry");
    const std::size_t C = x.extent(2);
    Tensor<T> rows = gather_rows(reshape(x, {g.H * g.W, C}), detail::region_perm(g));
    return reshape(rows, {g.n(), g.m(), C});
}

// Inverse of region_split.
template <typename T>
Tensor<T> region_merge(const Tensor<T>& tokens, const RegionGeometry& g) {
    const std::size_t C = tokens.shape().back();
    if (tokens.rank() != 3 || tokens.extent(0) != g.n() || tokens.extent(1) != g.m())
        throw ShapeError("region_merge: tokens " + shape_str(tokens.shape()) +
                         " do not match geometry");
    auto perm = detail::region_perm(g);
    std::vector<std::size_t> inv(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
    Tensor<T> rows = gather_rows(reshape(tokens, {g.n() * g.m(), C}), inv);
    return reshape(rows, {g.H, g.W, C});
}

// Ablation wiring of the interaction module.
enum class DcimVariant {
    Full,              // region <- PET, local <- CT, both Mamba blocks
    RegionPetLocalPet, // both pathways fed by PET
    RegionCtLocalCt,   // both pathways fed by CT
    RegionCtLocalPet,  // swapped sources
    LocalCtOnly,       // region Mamba bypassed, raw regional tokens fused
    RegionPetOnly,     // local Mamba bypassed
};

struct DcimWiring {
    bool region_from_pet, local_from_ct, use_region_mamba, use_local_mamba;
};

inline DcimWiring dcim_wiring(DcimVariant v) {
    switch (v) {
        case DcimVariant::RegionPetLocalPet: return {true, false, true, true};
        case DcimVariant::RegionCtLocalCt:   return {false, true, true, true};
        case DcimVariant::RegionCtLocalPet:  return {false, false, true, true};
        case DcimVariant::LocalCtOnly:       return {true, true, false, true};
        case DcimVariant::RegionPetOnly:     return {true, true, true, false};
        default:                             return {true, true, true, true};
    }
}

template <typename T>
struct DcimParams {
    // Region-pathway stem: stride-2 3x3 convs (log2 r of them) with LN+SiLU
    // between; the final conv is raw. r == 1 degenerates to one stride-1 conv.
    std::vector<Tensor<T>> region_w, region_b;
    std::vector<Tensor<T>> region_ln_g, region_ln_b;  // between-conv norms
    // Local-pathway stem: two stride-1 3x3 convs (linear stack).
    Tensor<T> local_w1, local_b1, local_w2, local_b2;

    Tensor<T> region_pre_ln_g, region_pre_ln_b;  // LN inside the residual
    MambaBlockParams<T> region_mamba;            // width D
    Tensor<T> local_pre_ln_g, local_pre_ln_b;
    MambaBlockParams<T> local_mamba;             // width C
    Tensor<T> bridge_w;                          // [D,C], identity at init

    std::size_t region_dim() const { return bridge_w.extent(0); }
    std::size_t local_dim() const { return bridge_w.extent(1); }

    static DcimParams init(std::size_t Cin, std::size_t D, std::size_t C, std::size_t r,
                           std::size_t N, Rng& rng) {
        DcimParams p;
        auto randn = [&rng](Tensor<T>& t, double std) {
            for (auto& v : t.vec()) v = T(rng.normal(0.0, std));
        };
        std::size_t steps = 0;
        for (std::size_t v = r; v > 1; v /= 2) ++steps;
        if ((std::size_t(1) << steps) != r)
            throw ContractError("dcim: region side r must be a power of two, got " +
                                std::to_string(r));
        std::size_t cin = Cin;
        const std::size_t nconv = std::max<std::size_t>(steps, 1);
        for (std::size_t i = 0; i < nconv; ++i) {
            Tensor<T> w({3, 3, cin, D});
            randn(w, 1.0 / std::sqrt(9.0 * double(cin)));
            p.region_w.push_back(w);
            p.region_b.push_back(Tensor<T>({D}));
            if (i + 1 < nconv) {
                p.region_ln_g.push_back(Tensor<T>({D}, T(1)));
                p.region_ln_b.push_back(Tensor<T>({D}));
            }
            cin = D;
        }
        p.local_w1 = Tensor<T>({3, 3, Cin, C});
        randn(p.local_w1, 1.0 / std::sqrt(9.0 * double(Cin)));
        p.local_b1 = Tensor<T>({C});
        p.local_w2 = Tensor<T>({3, 3, C, C});
        randn(p.local_w2, 1.0 / std::sqrt(9.0 * double(C)));
        p.local_b2 = Tensor<T>({C});

        p.region_pre_ln_g = Tensor<T>({D}, T(1));
        p.region_pre_ln_b = Tensor<T>({D});
        p.region_mamba = MambaBlockParams<T>::init(D, N, rng);
        p.local_pre_ln_g = Tensor<T>({C}, T(1));
        p.local_pre_ln_b = Tensor<T>({C});
        p.local_mamba = MambaBlockParams<T>::init(C, N, rng);

        p.bridge_w = Tensor<T>({D, C});
        for (std::size_t i = 0; i < std::min(D, C); ++i) p.bridge_w.data()[i * C + i] = T(1);
        return p;
    }

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        for (std::size_t i = 0; i < region_w.size(); ++i) {
            f(prefix + ".region_stem.w" + std::to_string(i), region_w[i]);
            f(prefix + ".region_stem.b" + std::to_string(i), region_b[i]);
        }
        for (std::size_t i = 0; i < region_ln_g.size(); ++i) {
            f(prefix + ".region_stem.ln_g" + std::to_string(i), region_ln_g[i]);
            f(prefix + ".region_stem.ln_b" + std::to_string(i), region_ln_b[i]);
        }
        f(prefix + ".local_stem.w1", local_w1);
        f(prefix + ".local_stem.b1", local_b1);
        f(prefix + ".local_stem.w2", local_w2);
        f(prefix + ".local_stem.b2", local_b2);
        f(prefix + ".region_pre_ln_g", region_pre_ln_g);
        f(prefix + ".region_pre_ln_b", region_pre_ln_b);
        region_mamba.visit(prefix + ".region_mamba", f);
        f(prefix + ".local_pre_ln_g", local_pre_ln_g);
        f(prefix + ".local_pre_ln_b", local_pre_ln_b);
        local_mamba.visit(prefix + ".local_mamba", f);
        f(prefix + ".bridge_w", bridge_w);
    }
};

template <typename T>
struct DcimTokens {
    Tensor<T> regional;  // [n,D]
    Tensor<T> local;     // [n,m,C]
};

// Stems + layout: regional map reduced by stride r and flattened to n tokens;
// local map kept at full resolution and split region-major.
template <typename T>
DcimTokens<T> dcim_tokenize(const Tensor<T>& region_src, const Tensor<T>& local_src,
                            const RegionGeometry& g, DcimParams<T>& p) {
    if (region_src.shape() != local_src.shape())
        throw ShapeError("dcim_tokenize: source shapes differ");
    Tensor<T> pet = region_src;
    const std::size_t nconv = p.region_w.size();
    const std::size_t stride0 = g.r == 1 ? 1 : 2;
    for (std::size_t i = 0; i < nconv; ++i) {
        pet = conv2d(pet, p.region_w[i], p.region_b[i], stride0, 1);
        if (i + 1 < nconv)
            pet = silu(layernorm(pet, p.region_ln_g[i], p.region_ln_b[i]));
    }
    if (pet.extent(0) != g.H / g.r || pet.extent(1) != g.W / g.r)
        throw ShapeError("dcim_tokenize: stem output " + shape_str(pet.shape()) +
                         " does not match region grid");
    DcimTokens<T> t;
    t.regional = reshape(pet, {g.n(), p.region_dim()});

    Tensor<T> ct = conv2d(local_src, p.local_w1, p.local_b1, 1, 1);
    ct = conv2d(ct, p.local_w2, p.local_b2, 1, 1);
    t.local = region_split(ct, g);
    return t;
}

// Pre-norm residual Mamba over the regional sequence.
template <typename T>
Tensor<T> region_mamba(const Tensor<T>& tokens, DcimParams<T>& p) {
    if (tokens.rank() != 2 || tokens.extent(0) < 1)
        throw ContractError("region_mamba: need at least one regional token");
    Tensor<T> n = layernorm(tokens, p.region_pre_ln_g, p.region_pre_ln_b);
    return add(tokens, mamba_block(n, p.region_mamba));
}

// Pre-norm residual Mamba per region, each scanned independently with one shared
// parameter set.
template <typename T>
Tensor<T> local_mamba(const Tensor<T>& tokens, DcimParams<T>& p) {
    if (tokens.rank() != 3 || tokens.extent(1) < 1)
        throw ContractError("local_mamba: need at least one local token per region");
    Tensor<T> n = layernorm(tokens, p.local_pre_ln_g, p.local_pre_ln_b);
    return add(tokens, mamba_block_batched(n, p.local_mamba));
}

// Fusion: bridge-project each regional token and add it to all m
// local tokens of its region, then fold back to the map layout.
template <typename T>
Tensor<T> dcim_fuse(const Tensor<T>& regional, const Tensor<T>& local_tokens,
                    const RegionGeometry& g, DcimParams<T>& p) {
    if (regional.rank() != 2 || local_tokens.rank() != 3 ||
        regional.extent(0) != g.n() || local_tokens.extent(0) != g.n() ||
        local_tokens.extent(1) != g.m())
        throw ShapeError("dcim_fuse: token shapes do not match geometry");
    Tensor<T> bridged = matmul(regional, p.bridge_w);  // [n,C]
    Tensor<T> fused = add(local_tokens, reshape(bridged, {g.n(), 1, p.local_dim()}));
    return region_merge(fused, g);
}

template <typename T>
Tensor<T> dcim_forward(const Tensor<T>& x_pet_rec, const Tensor<T>& x_ct_rec,
                       const RegionGeometry& g, DcimParams<T>& p,
                       DcimVariant variant = DcimVariant::Full) {
    const DcimWiring w = dcim_wiring(variant);
    const Tensor<T>& region_src = w.region_from_pet ? x_pet_rec : x_ct_rec;
    const Tensor<T>& local_src = w.local_from_ct ? x_ct_rec : x_pet_rec;
    DcimTokens<T> t = dcim_tokenize(region_src, local_src, g, p);
    if (w.use_region_mamba) t.regional = region_mamba(t.regional, p);
    if (w.use_local_mamba) t.local = local_mamba(t.local, p);
    return dcim_fuse(t.regional, t.local, g, p);
}

}  // namespace cipa
