#pragma once

#include <array>
#include <numeric>
#include <string>
#include <vector>

#include "cipa/crm.hpp"
#include "cipa/dcim.hpp"
#include "cipa/vss.hpp"

namespace cipa {

// ---------------------------------------------------------------------------
// Full network: dual shared-weight VSS encoder with per-stage CRM and DCIM
// fusion, CVSS decoder with upsampling, and a two-class pixel head.
// ---------------------------------------------------------------------------

struct CipaConfig {
    std::size_t resolution = 64;
    std::array<std::size_t, 4> widths = {32, 64, 128, 256};
    std::array<std::size_t, 4> depths = {2, 2, 2, 2};
    std::size_t state_size = 16;
    std::size_t expansion = 2;
    std::size_t mlp_ratio = 2;
    std::size_t region_r = 4;
    std::size_t crm_pool = 64;
    std::size_t num_classes = 2;
    bool enable_crm = true;
    bool enable_dcim = true;
    DcimVariant dcim_variant = DcimVariant::Full;
    bool per_direction_params = false;
    bool crm_bidirectional = false;

    // Side length of the feature maps at stage s (0-based).
    std::size_t stage_side(std::size_t s) const { return resolution / 4 / (1u << s); }

    // Effective region side at stage s: the largest power of two dividing
    // both the configured r and the stage extent.
    std::size_t stage_r(std::size_t s) const {
        return std::gcd(region_r, stage_side(s));
    }

    void validate() const {
        if (resolution % 32 != 0)
            throw ContractError("config: resolution must be divisible by 32 (patch embed + "
                                "three downsamples), got " + std::to_string(resolution));
        for (std::size_t s = 1; s < 4; ++s)
            if (widths[s] != 2 * widths[s - 1])
                throw ContractError("config: stage widths must double per stage");
        for (std::size_t s = 0; s < 4; ++s)
            if (depths[s] < 1) throw ContractError("config: stage depths must be >= 1");
        if (num_classes != 2)
            throw ContractError("config: this head is two-class (background/tumor)");
        if (region_r == 0 || (region_r & (region_r - 1)) != 0)
            throw ContractError("config: region_r must be a power of two");
        if (crm_pool < 1) throw ContractError("config: crm_pool must be >= 1");
        if (state_size < 1) throw ContractError("config: state_size must be >= 1");
    }
};

inline const char* dcim_variant_name(DcimVariant v) {
    switch (v) {
        case DcimVariant::RegionPetLocalPet: return "region_pet_local_pet";
        case DcimVariant::RegionCtLocalCt: return "region_ct_local_ct";
        case DcimVariant::RegionCtLocalPet: return "region_ct_local_pet";
        case DcimVariant::LocalCtOnly: return "local_ct";
        case DcimVariant::RegionPetOnly: return "region_pet";
        default: return "full";
    }
}

inline DcimVariant dcim_variant_from_name(const std::string& s) {
    if (s == "full") return DcimVariant::Full;
    if (s == "region_pet_local_pet") return DcimVariant::RegionPetLocalPet;
    if (s == "region_ct_local_ct") return DcimVariant::RegionCtLocalCt;
    if (s == "region_ct_local_pet") return DcimVariant::RegionCtLocalPet;
    if (s == "local_ct") return DcimVariant::LocalCtOnly;
    if (s == "region_pet") return DcimVariant::RegionPetOnly;
    throw ContractError("config: unknown dcim variant '" + s + "'");
}

// Per-stage feature maps kept for inspection: both branches before and
// after rectification, plus the fused map.
template <typename T>
struct StageFeatures {
    std::size_t stage;
    Tensor<T> pet_pre, ct_pre, pet_rec, ct_rec, fused;
};

template <typename T>
struct CipaNet {
    CipaConfig cfg;
    PatchEmbedParams<T> embed;
    std::vector<std::vector<VssBlockParams<T>>> stages;  // 4 x depth, shared by both branches
    std::vector<DownsampleParams<T>> downs;              // 3
    std::vector<CrmParams<T>> crms;                      // 4 when CRM enabled
    std::vector<DcimParams<T>> dcims;                    // 4 when DCIM enabled
    std::vector<CvssBlockParams<T>> decoder;             // 4
    std::vector<UpsampleParams<T>> ups;                  // 3
    Tensor<T> head_w, head_b;

    static CipaNet init(const CipaConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        CipaNet net;
        net.cfg = cfg;
        Rng rng(seed);
        net.embed = PatchEmbedParams<T>::init(1, cfg.widths[0], rng);
        net.stages.resize(4);
        for (std::size_t s = 0; s < 4; ++s)
            for (std::size_t d = 0; d < cfg.depths[s]; ++d)
                net.stages[s].push_back(VssBlockParams<T>::init(
                    cfg.widths[s], cfg.state_size, rng, cfg.expansion, cfg.mlp_ratio,
                    cfg.per_direction_params));
        for (std::size_t s = 0; s < 3; ++s)
            net.downs.push_back(DownsampleParams<T>::init(cfg.widths[s], rng));
        if (cfg.enable_crm)
            for (std::size_t s = 0; s < 4; ++s)
                net.crms.push_back(CrmParams<T>::init(cfg.widths[s], cfg.crm_pool,
                                                      cfg.state_size, rng,
                                                      cfg.crm_bidirectional));
        if (cfg.enable_dcim)
            for (std::size_t s = 0; s < 4; ++s)
                net.dcims.push_back(DcimParams<T>::init(cfg.widths[s], cfg.widths[s],
                                                        cfg.widths[s], cfg.stage_r(s),
                                                        cfg.state_size, rng));
        for (std::size_t s = 0; s < 4; ++s)
            net.decoder.push_back(CvssBlockParams<T>::init(cfg.widths[s], cfg.state_size, rng,
                                                           cfg.expansion, cfg.mlp_ratio,
                                                           cfg.per_direction_params));
        for (std::size_t s = 0; s < 3; ++s)
            net.ups.push_back(UpsampleParams<T>::init(cfg.widths[s + 1], rng));
        net.head_w = Tensor<T>({1, 1, cfg.widths[0], cfg.num_classes});
        for (auto& v : net.head_w.vec())
            v = T(rng.normal(0.0, 1.0 / std::sqrt(double(cfg.widths[0]))));
        net.head_b = Tensor<T>({cfg.num_classes});
        return net;
    }

    template <typename F>
    void visit_params(F&& f) {
        embed.visit("embed", f);
        for (std::size_t s = 0; s < 4; ++s)
            for (std::size_t d = 0; d < stages[s].size(); ++d)
                stages[s][d].visit("enc.s" + std::to_string(s) + ".b" + std::to_string(d), f);
        for (std::size_t s = 0; s < downs.size(); ++s)
            downs[s].visit("down.s" + std::to_string(s), f);
        for (std::size_t s = 0; s < crms.size(); ++s)
            crms[s].visit("crm.s" + std::to_string(s), f);
        for (std::size_t s = 0; s < dcims.size(); ++s)
            dcims[s].visit("dcim.s" + std::to_string(s), f);
        for (std::size_t s = 0; s < 4; ++s)
            decoder[s].visit("dec.s" + std::to_string(s), f);
        for (std::size_t s = 0; s < ups.size(); ++s)
            ups[s].visit("up.s" + std::to_string(s), f);
        f(std::string("head.w"), head_w);
        f(std::string("head.b"), head_b);
    }

    std::vector<std::pair<std::string, Tensor<T>>> named_params() {
        std::vector<std::pair<std::string, Tensor<T>>> out;
        visit_params([&](const std::string& name, Tensor<T>& t) { out.emplace_back(name, t); });
        return out;
    }

    std::size_t param_count() {
        std::size_t n = 0;
        visit_params([&](const std::string&, Tensor<T>& t) { n += t.numel(); });
        return n;
    }

    void set_requires_grad(bool v) {
        visit_params([v](const std::string&, Tensor<T>& t) { t.set_requires_grad(v); });
    }

    void zero_grads() {
        visit_params([](const std::string&, Tensor<T>& t) { t.zero_grad(); });
    }

    // pet, ct: [H,W] preprocessed planes. Returns logits [H,W,K].
    Tensor<T> forward(const Tensor<T>& pet, const Tensor<T>& ct,
                      std::vector<StageFeatures<T>>* trace = nullptr) {
        if (pet.rank() != 2 || pet.shape() != ct.shape())
            throw ShapeError("forward: modality planes must share [H,W], got " +
                             shape_str(pet.shape()) + " vs " + shape_str(ct.shape()));
        if (pet.extent(0) != cfg.resolution || pet.extent(1) != cfg.resolution)
            throw ShapeError("forward: expected " + std::to_string(cfg.resolution) + "x" +
                             std::to_string(cfg.resolution) + " inputs, got " +
                             shape_str(pet.shape()));
        const std::size_t H = pet.extent(0), W = pet.extent(1);

        Tensor<T> xp = patch_embed(reshape(pet, {H, W, 1}), embed);
        Tensor<T> xc = patch_embed(reshape(ct, {H, W, 1}), embed);

        std::array<Tensor<T>, 4> fused;
        for (std::size_t s = 0; s < 4; ++s) {
            for (auto& blk : stages[s]) {
                xp = vss_block(xp, blk);
                xc = vss_block(xc, blk);
            }
            StageFeatures<T> feats;
            feats.stage = s + 1;
            feats.pet_pre = xp;
            feats.ct_pre = xc;
            if (cfg.enable_crm) {
                CrmOutput<T> rec = crm_forward(xp, xc, crms[s]);
                xp = rec.pet_rec;
                xc = rec.ct_rec;
            }
            feats.pet_rec = xp;
            feats.ct_rec = xc;
            if (cfg.enable_dcim) {
                RegionGeometry g(xp.extent(0), xp.extent(1), cfg.stage_r(s));
                fused[s] = dcim_forward(xp, xc, g, dcims[s], cfg.dcim_variant);
            } else {
                fused[s] = mul_scalar(add(xp, xc), T(0.5));
            }
            feats.fused = fused[s];
            if (trace) trace->push_back(feats);
            if (s < 3) {
                xp = downsample(xp, downs[s]);
                xc = downsample(xc, downs[s]);
            }
        }

        Tensor<T> d = cvss_block(fused[3], decoder[3]);
        for (std::size_t s = 3; s-- > 0;) {
            d = add(upsample(d, ups[s]), fused[s]);
            d = cvss_block(d, decoder[s]);
        }
        Tensor<T> full = resize_bilinear(d, H, W);
        return conv2d(full, head_w, head_b, 1, 0);
    }
};

// ---------------------------------------------------------------------------
// Loss: mean pixelwise cross-entropy + soft Dice on the tumor class,
// equally weighted. Two-class head, so everything runs through the logit
// difference z1 - z0.
// ---------------------------------------------------------------------------

template <typename T>
struct LossTerms {
    Tensor<T> total, ce, dice;
};

template <typename T>
inline void check_binary_mask(const Tensor<T>& mask) {
    for (const T& v : mask.vec())
        if (v != T(0) && v != T(1))
            throw ContractError("loss: mask must be binary {0,1}");
}

template <typename T>
LossTerms<T> segmentation_loss(const Tensor<T>& logits, const Tensor<T>& mask) {
    if (logits.rank() != 3 || logits.shape().back() != 2)
        throw ShapeError("loss: expected logits [H,W,2], got " + shape_str(logits.shape()));
    const std::size_t H = logits.extent(0), W = logits.extent(1);
    if (mask.rank() != 2 || mask.extent(0) != H || mask.extent(1) != W)
        throw ShapeError("loss: mask " + shape_str(mask.shape()) + " does not match logits");
    check_binary_mask(mask);

    Tensor<T> diff = reshape(sub(slice(logits, 2, 1, 1), slice(logits, 2, 0, 1)), {H, W});

    // CE per pixel: softplus(-d) for tumor, softplus(d) for background.
    Tensor<T> sign(mask.shape());
    for (std::size_t i = 0; i < mask.numel(); ++i)
        sign.data()[i] = T(1) - T(2) * mask.data()[i];
    LossTerms<T> out;
    out.ce = mean_all(softplus(mul(diff, sign)));

    // Soft Dice on the tumor probability with +1 smoothing.
    Tensor<T> p1 = sigmoid(diff);
    Tensor<T> inter = sum_all(mul(p1, mask));
    Tensor<T> num = add_scalar(mul_scalar(inter, T(2)), T(1));
    Tensor<T> den = add_scalar(add(sum_all(p1), sum_all(mask)), T(1));
    out.dice = add_scalar(neg(div(num, den)), T(1));

    out.total = add(out.ce, out.dice);
    return out;
}

// Argmax over the two classes; exact ties break toward background.
template <typename T>
Tensor<T> infer_mask(const Tensor<T>& logits) {
    if (logits.rank() != 3 || logits.shape().back() != 2)
        throw ShapeError("infer: expected logits [H,W,2], got " + shape_str(logits.shape()));
    Tensor<T> out({logits.extent(0), logits.extent(1)});
    const T* z = logits.data();
    for (std::size_t i = 0; i < out.numel(); ++i)
        out.data()[i] = z[2 * i + 1] > z[2 * i] ? T(1) : T(0);
    return out;
}

}  // namespace cipa
