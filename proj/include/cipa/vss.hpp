#pragma once

#include <array>
#include <vector>

#include "cipa/ssm.hpp"

namespace cipa {

// ---------------------------------------------------------------------------
// 2D selective scanning and the encoder/decoder block types.
//
// SS2D unfolds [H,W,C] into four directed 1D sequences (row-major forward
// and reverse, column-major forward and reverse), scans each independently,
// folds back, and sums. Directions share one parameter set by default; a
// per-direction flag trades the 180-degree rotation equivariance for
// capacity.
// ---------------------------------------------------------------------------

namespace detail {

// Row index permutation taking the row-major flattening to column-major.
inline std::vector<std::size_t> colmajor_perm(std::size_t H, std::size_t W) {
    std::vector<std::size_t> perm(H * W);
    for (std::size_t w = 0; w < W; ++w)
        for (std::size_t h = 0; h < H; ++h) perm[w * H + h] = h * W + w;
    return perm;
}

inline std::vector<std::size_t> invert_perm(const std::vector<std::size_t>& p) {
    std::vector<std::size_t> inv(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) inv[p[i]] = i;
    return inv;
}

}  // namespace detail

template <typename T>
struct Ss2dParams {
    // One shared SSM for all four directions, or one each.
    std::vector<SSMParams<T>> dirs;

    bool shared() const { return dirs.size() == 1; }
    std::size_t dim() const { return dirs[0].dim(); }

    static Ss2dParams init(std::size_t D, std::size_t N, Rng& rng, bool per_direction = false) {
        Ss2dParams p;
        p.dirs.resize(per_direction ? 4 : 1);
        for (auto& d : p.dirs) d = SSMParams<T>::init(D, N, rng);
        return p;
    }

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        for (std::size_t i = 0; i < dirs.size(); ++i)
            dirs[i].visit(prefix + ".dir" + std::to_string(i), f);
    }
};

// Pre-merge directional outputs, each folded back to canonical row-major
// token order. Index: 0 row-fwd, 1 row-rev, 2 col-fwd, 3 col-rev.
template <typename T>
std::array<Tensor<T>, 4> ss2d_directional(const Tensor<T>& x, Ss2dParams<T>& p) {
    if (x.rank() != 3 || x.extent(2) != p.dim())
        throw ShapeError("ss2d: input " + shape_str(x.shape()) + " does not match width " +
                         std::to_string(p.dim()));
    const std::size_t H = x.extent(0), W = x.extent(1), C = x.extent(2);
    const std::size_t L = H * W;
    const auto cm = detail::colmajor_perm(H, W);
    const auto cm_inv = detail::invert_perm(cm);

    Tensor<T> seq = reshape(x, {L, C});
    std::array<Tensor<T>, 4> out;

    if (p.shared()) {
        // Token-wise projections are direction-independent, so compute once
        // and permute alongside the tokens; the four scans batch into one
        // graph node.
        SSMParams<T>& ssm = p.dirs[0];
        ScanInputs<T> s = ssm_projections(seq, ssm);
        auto lanes_of = [&](const Tensor<T>& t) {
            const std::size_t k = t.extent(1);
            Tensor<T> rev = flip(t, 0);
            Tensor<T> col = gather_rows(t, cm);
            Tensor<T> colrev = flip(col, 0);
            return concat<T>({reshape(t, {1, L, k}), reshape(rev, {1, L, k}),
                              reshape(col, {1, L, k}), reshape(colrev, {1, L, k})}, 0);
        };
        Tensor<T> A = neg(exp(ssm.A_log));
        Tensor<T> y = selective_scan_core(lanes_of(seq), lanes_of(s.delta), A, lanes_of(s.B),
                                          lanes_of(s.C), ssm.D_skip);
        Tensor<T> y0 = reshape(slice(y, 0, 0, 1), {L, C});
        Tensor<T> y1 = reshape(slice(y, 0, 1, 1), {L, C});
        Tensor<T> y2 = reshape(slice(y, 0, 2, 1), {L, C});
        Tensor<T> y3 = reshape(slice(y, 0, 3, 1), {L, C});
        out[0] = y0;
        out[1] = flip(y1, 0);
        out[2] = gather_rows(y2, cm_inv);
        out[3] = gather_rows(flip(y3, 0), cm_inv);
    } else {
        Tensor<T> rev = flip(seq, 0);
        Tensor<T> col = gather_rows(seq, cm);
        Tensor<T> colrev = flip(col, 0);
        out[0] = selective_scan(seq, p.dirs[0]);
        out[1] = flip(selective_scan(rev, p.dirs[1]), 0);
        out[2] = gather_rows(selective_scan(col, p.dirs[2]), cm_inv);
        out[3] = gather_rows(flip(selective_scan(colrev, p.dirs[3]), 0), cm_inv);
    }
    for (auto& o : out) o = reshape(o, {H, W, C});
    return out;
}

// Merge is a plain sum of the four directional results.
template <typename T>
Tensor<T> ss2d(const Tensor<T>& x, Ss2dParams<T>& p) {
    auto d = ss2d_directional(x, p);
    return add(add(d[0], d[1]), add(d[2], d[3]));
}

// ---------------------------------------------------------------------------
// Linear layer over the channel axis of a feature map.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> pointwise(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = {}) {
    const std::size_t H = x.extent(0), W = x.extent(1), C = x.extent(2);
    Tensor<T> y = linear(reshape(x, {H * W, C}), w, b);
    return reshape(y, {H, W, w.extent(1)});
}

// ---------------------------------------------------------------------------
// VSS block (encoder): LN -> gated SS2D mixer -> residual, then
// LN -> pointwise MLP -> residual.
// ---------------------------------------------------------------------------

template <typename T>
struct VssBlockParams {
    Tensor<T> ln1_g, ln1_b;
    Tensor<T> W_in;        // [C, 2E]
    Tensor<T> dw_w, dw_b;  // depthwise 3x3 on the content path
    Ss2dParams<T> mixer;   // width E
    Tensor<T> W_out;       // [E, C]
    Tensor<T> ln2_g, ln2_b;
    Tensor<T> mlp_w1, mlp_b1;
    Tensor<T> mlp_w2, mlp_b2;

    std::size_t dim() const { return ln1_g.numel(); }
    std::size_t inner() const { return W_out.extent(0); }

    static VssBlockParams init(std::size_t C, std::size_t N, Rng& rng,
                               std::size_t expansion = 2, std::size_t mlp_ratio = 2,
                               bool per_direction = false) {
        VssBlockParams p;
        const std::size_t E = expansion * C, Hdn = mlp_ratio * C;
        auto randn = [&rng](Tensor<T>& t, double std) {
            for (auto& v : t.vec()) v = T(rng.normal(0.0, std));
        };
        p.ln1_g = Tensor<T>({C}, T(1));
        p.ln1_b = Tensor<T>({C});
        p.W_in = Tensor<T>({C, 2 * E});
        randn(p.W_in, 1.0 / std::sqrt(double(C)));
        p.dw_w = Tensor<T>({3, 3, E});
        randn(p.dw_w, 1.0 / 3.0);
        p.dw_b = Tensor<T>({E});
        p.mixer = Ss2dParams<T>::init(E, N, rng, per_direction);
        p.W_out = Tensor<T>({E, C});
        randn(p.W_out, 0.5 / std::sqrt(double(E)));
        p.ln2_g = Tensor<T>({C}, T(1));
        p.ln2_b = Tensor<T>({C});
        p.mlp_w1 = Tensor<T>({C, Hdn});
        randn(p.mlp_w1, 1.0 / std::sqrt(double(C)));
        p.mlp_b1 = Tensor<T>({Hdn});
        p.mlp_w2 = Tensor<T>({Hdn, C});
        randn(p.mlp_w2, 0.5 / std::sqrt(double(Hdn)));
        p.mlp_b2 = Tensor<T>({C});
        return p;
    }

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".ln1_g", ln1_g);
        f(prefix + ".ln1_b", ln1_b);
        f(prefix + ".W_in", W_in);
        f(prefix + ".dw_w", dw_w);
        f(prefix + ".dw_b", dw_b);
        mixer.visit(prefix + ".mixer", f);
        f(prefix + ".W_out", W_out);
        f(prefix + ".ln2_g", ln2_g);
        f(prefix + ".ln2_b", ln2_b);
        f(prefix + ".mlp_w1", mlp_w1);
        f(prefix + ".mlp_b1", mlp_b1);
        f(prefix + ".mlp_w2", mlp_w2);
        f(prefix + ".mlp_b2", mlp_b2);
    }
};

template <typename T>
Tensor<T> vss_block(const Tensor<T>& x, VssBlockParams<T>& p) {
    const std::size_t E = p.inner();
    Tensor<T> n1 = layernorm(x, p.ln1_g, p.ln1_b);
    Tensor<T> proj = pointwise(n1, p.W_in);
    Tensor<T> content = slice(proj, 2, 0, E);
    Tensor<T> gate = slice(proj, 2, E, E);
    content = silu(dwconv2d(content, p.dw_w, p.dw_b, 1));
    Tensor<T> mixed = ss2d(content, p.mixer);
    Tensor<T> h = add(x, pointwise(mul(mixed, silu(gate)), p.W_out));

    Tensor<T> n2 = layernorm(h, p.ln2_g, p.ln2_b);
    Tensor<T> m = pointwise(silu(pointwise(n2, p.mlp_w1, p.mlp_b1)), p.mlp_w2, p.mlp_b2);
    return add(h, m);
}

// ---------------------------------------------------------------------------
// CVSS block (decoder): VSS block followed by a channel-attention rescale
// (global average pool -> two-layer MLP with reduction 4 -> sigmoid gate).
// ---------------------------------------------------------------------------

template <typename T>
struct CvssBlockParams {
    VssBlockParams<T> vss;
    Tensor<T> ca_w1, ca_b1;  // [C, C/4]
    Tensor<T> ca_w2, ca_b2;  // [C/4, C]

    static CvssBlockParams init(std::size_t C, std::size_t N, Rng& rng,
                                std::size_t expansion = 2, std::size_t mlp_ratio = 2,
                                bool per_direction = false) {
        CvssBlockParams p;
        p.vss = VssBlockParams<T>::init(C, N, rng, expansion, mlp_ratio, per_direction);
        const std::size_t R = std::max<std::size_t>(1, C / 4);
        auto randn = [&rng](Tensor<T>& t, double std) {
            for (auto& v : t.vec()) v = T(rng.normal(0.0, std));
        };
        p.ca_w1 = Tensor<T>({C, R});
        randn(p.ca_w1, 1.0 / std::sqrt(double(C)));
        p.ca_b1 = Tensor<T>({R});
        p.ca_w2 = Tensor<T>({R, C});
        randn(p.ca_w2, 1.0 / std::sqrt(double(R)));
        p.ca_b2 = Tensor<T>({C});
        return p;
    }

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        vss.visit(prefix + ".vss", f);
        f(prefix + ".ca_w1", ca_w1);
        f(prefix + ".ca_b1", ca_b1);
        f(prefix + ".ca_w2", ca_w2);
        f(prefix + ".ca_b2", ca_b2);
    }
};

// Per-channel gates of the attention sub-block; sigmoid keeps them in (0,1).
template <typename T>
Tensor<T> cvss_gates(const Tensor<T>& y, CvssBlockParams<T>& p) {
    const std::size_t C = y.extent(2);
    Tensor<T> pooled = mean_axis(reshape(y, {y.extent(0) * y.extent(1), C}), 0);  // [C]
    Tensor<T> z = reshape(pooled, {1, C});
    z = linear(silu(linear(z, p.ca_w1, p.ca_b1)), p.ca_w2, p.ca_b2);
    return reshape(sigmoid(z), {C});
}

template <typename T>
Tensor<T> cvss_block(const Tensor<T>& x, CvssBlockParams<T>& p) {
    Tensor<T> y = vss_block(x, p.vss);
    return mul(y, cvss_gates(y, p));
}

// ---------------------------------------------------------------------------
// Resolution changes: patch embedding (4x4 stride-4 conv + LN), downsample
// (2x2 stride-2 conv doubling channels), upsample (bilinear 2x + pointwise
// conv halving channels).
// ---------------------------------------------------------------------------

template <typename T>
struct PatchEmbedParams {
    Tensor<T> w, b;        // [4,4,Cin,C1]
    Tensor<T> ln_g, ln_b;  // [C1]

    static PatchEmbedParams init(std::size_t Cin, std::size_t C1, Rng& rng) {
        PatchEmbedParams p;
        p.w = Tensor<T>({4, 4, Cin, C1});
        for (auto& v : p.w.vec()) v = T(rng.normal(0.0, 1.0 / std::sqrt(16.0 * double(Cin))));
        p.b = Tensor<T>({C1});
        p.ln_g = Tensor<T>({C1}, T(1));
        p.ln_b = Tensor<T>({C1});
        return p;
    }

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".w", w);
        f(prefix + ".b", b);
        f(prefix + ".ln_g", ln_g);
        f(prefix + ".ln_b", ln_b);
    }
};

template <typename T>
Tensor<T> patch_embed(const Tensor<T>& image, PatchEmbedParams<T>& p) {
    if (image.rank() != 3 || image.extent(0) % 4 || image.extent(1) % 4)
        throw ShapeError("patch_embed: extents of " + shape_str(image.shape()) +
                         " not divisible by 4");
    Tensor<T> y = conv2d(image, p.w, p.b, 4, 0);
    return layernorm(y, p.ln_g, p.ln_b);
}

template <typename T>
struct DownsampleParams {
    Tensor<T> w, b;  // [2,2,C,2C]

    static DownsampleParams init(std::size_t C, Rng& rng) {
        DownsampleParams p;
        p.w = Tensor<T>({2, 2, C, 2 * C});
        for (auto& v : p.w.vec()) v = T(rng.normal(0.0, 1.0 / std::sqrt(4.0 * double(C))));
        p.b = Tensor<T>({2 * C});
        return p;
    }

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".w", w);
        f(prefix + ".b", b);
    }
};

template <typename T>
Tensor<T> downsample(const Tensor<T>& x, DownsampleParams<T>& p) {
    if (x.extent(0) % 2 || x.extent(1) % 2)
        throw ShapeError("downsample: extents of " + shape_str(x.shape()) +
                         " not divisible by 2");
    return conv2d(x, p.w, p.b, 2, 0);
}

template <typename T>
struct UpsampleParams {
    Tensor<T> w, b;  // [1,1,C,C/2]

    static UpsampleParams init(std::size_t C, Rng& rng) {
        UpsampleParams p;
        p.w = Tensor<T>({1, 1, C, C / 2});
        for (auto& v : p.w.vec()) v = T(rng.normal(0.0, 1.0 / std::sqrt(double(C))));
        p.b = Tensor<T>({C / 2});
        return p;
    }

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".w", w);
        f(prefix + ".b", b);
    }
};

template <typename T>
Tensor<T> upsample(const Tensor<T>& x, UpsampleParams<T>& p) {
    Tensor<T> up = resize_bilinear(x, 2 * x.extent(0), 2 * x.extent(1));
    return conv2d(up, p.w, p.b, 1, 0);
}

}  // namespace cipa
