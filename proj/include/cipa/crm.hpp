#pragma once

#include "cipa/ssm.hpp"
#include "cipa/vss.hpp"

namespace cipa {

// ---------------------------------------------------------------------------
// Channel-wise Rectification Module.
//
// Concatenate both modalities on channels, layer-normalize, and reinterpret
// each of the 2C channels as one token whose feature is the flattened
// spatial map. Tokens are compressed to a fixed length P (adaptive average
// pooling + linear) so one parameter set serves every stage resolution,
// scanned along the channel axis by a 1D selective SSM, and mapped to one
// sigmoid weight per channel. Both inputs are rescaled channel-wise by
// their half of the weight vector.
// ---------------------------------------------------------------------------

template <typename T>
struct CrmParams {
    Tensor<T> ln_g, ln_b;      // [2C]
    Tensor<T> comp_w, comp_b;  // [P,P] token compressor after pooling
    SSMParams<T> ssm;          // token width P, sequence length 2C
    Tensor<T> head_w, head_b;  // [P,1], [1]
    bool bidirectional = false;

    std::size_t channels() const { return ln_g.numel() / 2; }
    std::size_t pool() const { return comp_w.extent(0); }

    static CrmParams init(std::size_t C, std::size_t P, std::size_t N, Rng& rng,
                          bool bidirectional = false) {
        CrmParams p;
        auto randn = [&rng](Tensor<T>& t, double std) {
            for (auto& v : t.vec()) v = T(rng.normal(0.0, std));
        };
        p.ln_g = Tensor<T>({2 * C}, T(1));
        p.ln_b = Tensor<T>({2 * C});
        p.comp_w = Tensor<T>({P, P});
        randn(p.comp_w, 1.0 / std::sqrt(double(P)));
        p.comp_b = Tensor<T>({P});
        p.ssm = SSMParams<T>::init(P, N, rng);
        p.head_w = Tensor<T>({P, 1});
        randn(p.head_w, 1.0 / std::sqrt(double(P)));
        p.head_b = Tensor<T>({1});
        p.bidirectional = bidirectional;
        return p;
    }

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".ln_g", ln_g);
        f(prefix + ".ln_b", ln_b);
        f(prefix + ".comp_w", comp_w);
        f(prefix + ".comp_b", comp_b);
        ssm.visit(prefix + ".ssm", f);
        f(prefix + ".head_w", head_w);
        f(prefix + ".head_b", head_b);
    }
};

// Channel weight vector W^C in (0,1)^{2C}; PET channels first, matching the
// concat order.
template <typename T>
Tensor<T> crm_weights(const Tensor<T>& x_pet, const Tensor<T>& x_ct, CrmParams<T>& p) {
    if (x_pet.rank() != 3 || x_pet.shape() != x_ct.shape())
        throw ShapeError("crm: modality shapes differ: " + shape_str(x_pet.shape()) +
                         " vs " + shape_str(x_ct.shape()));
    const std::size_t H = x_pet.extent(0), W = x_pet.extent(1), C = x_pet.extent(2);
    if (C != p.channels())
        throw ShapeError("crm: expected " + std::to_string(p.channels()) + " channels, got " +
                         std::to_string(C));
    const std::size_t L = H * W, P = p.pool();

    Tensor<T> cat = concat<T>({x_pet, x_ct}, 2);             // [H,W,2C]
    Tensor<T> normed = layernorm(cat, p.ln_g, p.ln_b);
    Tensor<T> tokens = transpose(reshape(normed, {L, 2 * C}), 0, 1);  // [2C, L]
    Tensor<T> comp = linear(adaptive_avg_pool1d(tokens, P), p.comp_w, p.comp_b);  // [2C, P]

    Tensor<T> scanned = selective_scan(comp, p.ssm);
    if (p.bidirectional) {
        Tensor<T> rev = flip(selective_scan(flip(comp, 0), p.ssm), 0);
        scanned = mul_scalar(add(scanned, rev), T(0.5));
    }
    Tensor<T> w = sigmoid(linear(scanned, p.head_w, p.head_b));  // [2C, 1]
    return reshape(w, {2 * C});
}

template <typename T>
struct CrmOutput {
    Tensor<T> pet_rec, ct_rec;
    Tensor<T> weights;  // [2C]
};

template <typename T>
CrmOutput<T> crm_forward(const Tensor<T>& x_pet, const Tensor<T>& x_ct, CrmParams<T>& p) {
    const std::size_t C = x_pet.extent(2);
    Tensor<T> w = crm_weights(x_pet, x_ct, p);
    Tensor<T> w_pet = slice(w, 0, 0, C);
    Tensor<T> w_ct = slice(w, 0, C, C);
    CrmOutput<T> out;
    out.pet_rec = mul(x_pet, w_pet);
    out.ct_rec = mul(x_ct, w_ct);
    out.weights = w;
    return out;
}

}  // namespace cipa
