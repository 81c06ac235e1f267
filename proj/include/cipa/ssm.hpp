#pragma once

#include <cmath>
#include <vector>

#include "cipa/errors.hpp"
#include "cipa/ops.hpp"
#include "cipa/rng.hpp"

namespace cipa {

// ---------------------------------------------------------------------------
// Selective state-space machinery: exact ZOH discretization, the sequential
// recurrence, its LTI convolution-kernel form, and the gated Mamba block.
//
// Conventions: sequences are [L,D]; the diagonal state matrix A is [D,N]
// with strictly negative entries realized as A = -exp(A_log); per-token
// parameters B_t, C_t are [L,N] and the step size Delta_t is [L,D].
// ---------------------------------------------------------------------------

namespace detail {

// One recurrence step shared by every scan entry point (training kernel,
// frozen-parameter oracle runs, chunked variant). h is [N] for one channel.
//   h <- a_bar * h + b_bar * u ;  y = <c, h> + skip * u
template <typename T>
inline T scan_step(T* h, const T* a_bar, const T* b_bar, const T* c, T u, T skip,
                   std::size_t N) {
    T y = T(0);
    for (std::size_t n = 0; n < N; ++n) {
        h[n] = a_bar[n] * h[n] + b_bar[n] * u;
        y += c[n] * h[n];
    }
    return y + skip * u;
}

}  // namespace detail

// Exact ZOH discretization of the diagonal system, exposed as a
// differentiable composite:
//   A_bar = exp(Delta * A)
//   B_bar = (exp(Delta * A) - 1) / A * B  =  Delta * phi1(Delta * A) * B
// with the series limit Delta*B as Delta*A -> 0.
// A [D,N], B_t [L,N], Delta_t [L,D] -> (A_bar, B_bar) each [L,D,N].
template <typename T>
std::pair<Tensor<T>, Tensor<T>> zoh_discretize(const Tensor<T>& A, const Tensor<T>& B_t,
                                               const Tensor<T>& Delta_t) {
    if (A.rank() != 2 || B_t.rank() != 2 || Delta_t.rank() != 2)
        throw ShapeError("zoh_discretize: expected A [D,N], B [L,N], Delta [L,D]");
    const std::size_t D = A.extent(0), N = A.extent(1);
    const std::size_t L = Delta_t.extent(0);
    if (Delta_t.extent(1) != D || B_t.extent(0) != L || B_t.extent(1) != N)
        throw ShapeError("zoh_discretize: inconsistent extents A=" + shape_str(A.shape()) +
                         " B=" + shape_str(B_t.shape()) + " Delta=" + shape_str(Delta_t.shape()));
    for (const T& v : Delta_t.vec())
        if (!(v > T(0))) throw ContractError("zoh_discretize: Delta must be positive");

    Tensor<T> delta3 = reshape(Delta_t, {L, D, 1});
    Tensor<T> a3 = reshape(A, {1, D, N});
    Tensor<T> b3 = reshape(B_t, {L, 1, N});
    Tensor<T> da = mul(delta3, a3);               // [L,D,N]
    Tensor<T> a_bar = exp(da);
    Tensor<T> b_bar = mul(mul(zoh_phi(da), delta3), b3);
    return {a_bar, b_bar};
}

// ---------------------------------------------------------------------------
// Fused selective scan. Inputs carry G independent lanes that share A and
// the skip term; per-lane/per-token B, C, Delta. Recorded as a single graph
// node with a hand-derived backward (BPTT through the diagonal recurrence).
//
//   u     [G,L,D]   sequence input
//   delta [G,L,D]   positive step sizes
//   A     [D,N]     negative diagonal state matrix
//   B     [G,L,N]   input projection per token
//   C     [G,L,N]   output projection per token
//   skip  [D]       direct feedthrough
// Returns y [G,L,D].
//
// chunk tiles the time loop; state is carried across chunk boundaries so any
// chunk size is bit-identical to the plain scan.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> selective_scan_core(const Tensor<T>& u, const Tensor<T>& delta, const Tensor<T>& A,
                              const Tensor<T>& B, const Tensor<T>& C, const Tensor<T>& skip,
                              std::size_t chunk = 0) {
    if (u.rank() != 3 || delta.rank() != 3 || B.rank() != 3 || C.rank() != 3 || A.rank() != 2)
        throw ShapeError("selective_scan: expected u,delta [G,L,D]; B,C [G,L,N]; A [D,N]");
    const std::size_t G = u.extent(0), L = u.extent(1), D = u.extent(2);
    const std::size_t N = A.extent(1);
    if (L < 1) throw ContractError("selective_scan: empty sequence");
    if (A.extent(0) != D || skip.numel() != D || delta.shape() != u.shape() ||
        B.extent(0) != G || B.extent(1) != L || B.extent(2) != N || C.shape() != B.shape())
        throw ShapeError("selective_scan: inconsistent extents u=" + shape_str(u.shape()) +
                         " A=" + shape_str(A.shape()) + " B=" + shape_str(B.shape()));
    for (const T& v : delta.vec())
        if (!(v > T(0))) throw ContractError("selective_scan: Delta must be positive");
    if (chunk == 0) chunk = L;

    const bool tracked = autograd::tracing<T>({u, delta, A, B, C, skip});
    Tensor<T> y({G, L, D});
    // States are saved for backward only; [G,L,D,N] at desk shapes.
    std::vector<T> h_all(tracked ? G * L * D * N : 0);

    const T* ud = u.data();
    const T* dd = delta.data();
    const T* ad = A.data();
    const T* bd = B.data();
    const T* cd = C.data();
    const T* sd = skip.data();
    T* yd = y.data();
    const T skip_sign = fault::active("scan") ? T(-1) : T(1);

    std::vector<T> h(D * N);
    std::vector<T> ab(N), bb(N);
    for (std::size_t g = 0; g < G; ++g) {
        std::fill(h.begin(), h.end(), T(0));
        for (std::size_t t0 = 0; t0 < L; t0 += chunk) {
            const std::size_t t1 = std::min(L, t0 + chunk);
            for (std::size_t t = t0; t < t1; ++t) {
                const std::size_t tb = g * L + t;
                const T* brow = bd + tb * N;
                const T* crow = cd + tb * N;
                for (std::size_t d = 0; d < D; ++d) {
                    const T dt = dd[tb * D + d];
                    const T* arow = ad + d * N;
                    for (std::size_t n = 0; n < N; ++n) {
                        const T z = dt * arow[n];
                        ab[n] = std::exp(z);
                        bb[n] = dt * scalar::zoh_phi(z) * brow[n];
                    }
                    T* hrow = h.data() + d * N;
                    const T uv = ud[tb * D + d];
                    yd[tb * D + d] =
                        detail::scan_step(hrow, ab.data(), bb.data(), crow, uv,
                                          skip_sign * sd[d], N);
                    if (tracked)
                        std::copy(hrow, hrow + N, h_all.data() + (tb * D + d) * N);
                }
            }
        }
    }
    check_finite("selective_scan", y);

    if (tracked) {
        autograd::record<T>("selective_scan", {u, delta, A, B, C, skip}, y,
                            [ui = u.impl(), di = delta.impl(), ai = A.impl(), bi = B.impl(),
                             ci = C.impl(), si = skip.impl(), yi = y.impl(),
                             h_all = std::move(h_all), G, L, D, N, skip_sign] {
            const T* gy = yi->grad.data();
            const T* ud = ui->data.data();
            const T* dd = di->data.data();
            const T* ad = ai->data.data();
            const T* bd = bi->data.data();
            const T* cd = ci->data.data();
            const T* sd = si->data.data();
            std::vector<T> gu(ui->data.size(), T(0));
            std::vector<T> gdelta(di->data.size(), T(0));
            std::vector<T> gA(ai->data.size(), T(0));
            std::vector<T> gB(bi->data.size(), T(0));
            std::vector<T> gC(ci->data.size(), T(0));
            std::vector<T> gskip(si->data.size(), T(0));
            std::vector<T> lam(D * N), carry(D * N);
            for (std::size_t g = 0; g < G; ++g) {
                std::fill(carry.begin(), carry.end(), T(0));
                for (std::size_t t = L; t-- > 0;) {
                    const std::size_t tb = g * L + t;
                    const T* brow = bd + tb * N;
                    const T* crow = cd + tb * N;
                    const T* hrow_all = h_all.data() + tb * D * N;
                    const T* hprev_all = t > 0 ? h_all.data() + (tb - 1) * D * N : nullptr;
                    for (std::size_t d = 0; d < D; ++d) {
                        const T gyv = gy[tb * D + d];
                        const T uv = ud[tb * D + d];
                        const T dt = dd[tb * D + d];
                        const T* arow = ad + d * N;
                        const T* hrow = hrow_all + d * N;
                        T* lrow = lam.data() + d * N;
                        T* krow = carry.data() + d * N;
                        T gu_acc = skip_sign * sd[d] * gyv;
                        T gdt_acc = T(0);
                        for (std::size_t n = 0; n < N; ++n) {
                            const T z = dt * arow[n];
                            const T a_bar = std::exp(z);
                            const T phi = scalar::zoh_phi(z);
                            const T b_bar = dt * phi * brow[n];
                            // dL/dh[t,d,n]
                            const T l = gyv * crow[n] + krow[n];
                            lrow[n] = l;
                            gC[tb * N + n] += gyv * hrow[n];
                            const T hprev = hprev_all ? hprev_all[d * N + n] : T(0);
                            const T d_abar = l * hprev;  // dL/dA_bar
                            const T d_bbar = l * uv;     // dL/dB_bar
                            gu_acc += l * b_bar;
                            // A_bar = exp(dt*a): d/ddt = a*A_bar, d/da = dt*A_bar
                            // B_bar = b*(exp(dt*a)-1)/a: d/ddt = b*A_bar,
                            //         d/da = b*dt^2*phi1'(dt*a)
                            gdt_acc += d_abar * arow[n] * a_bar + d_bbar * brow[n] * a_bar;
                            gA[d * N + n] += d_abar * dt * a_bar +
                                             d_bbar * brow[n] * dt * dt * scalar::zoh_phi_grad(z);
                            gB[tb * N + n] += l * uv * dt * phi;
                            krow[n] = l * a_bar;
                        }
                        gu[tb * D + d] += gu_acc;
                        gdelta[tb * D + d] += gdt_acc;
                        gskip[d] += skip_sign * gyv * uv;
                    }
                }
            }
            autograd::accumulate(ui, gu.data(), gu.size());
            autograd::accumulate(di, gdelta.data(), gdelta.size());
            autograd::accumulate(ai, gA.data(), gA.size());
            autograd::accumulate(bi, gB.data(), gB.size());
            autograd::accumulate(ci, gC.data(), gC.size());
            autograd::accumulate(si, gskip.data(), gskip.size());
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Parameter bundle for one selective SSM over token width D.
// ---------------------------------------------------------------------------

template <typename T>
struct SSMParams {
    Tensor<T> A_log;    // [D,N]; realized state matrix A = -exp(A_log)
    Tensor<T> W_B;      // [D,N]
    Tensor<T> W_C;      // [D,N]
    Tensor<T> w_delta;  // [D,1]; per-token scalar step, broadcast over channels
    Tensor<T> dt_bias;  // [D]; per-channel bias before softplus
    Tensor<T> D_skip;   // [D]

    std::size_t dim() const { return A_log.extent(0); }
    std::size_t state_size() const { return A_log.extent(1); }

    static SSMParams init(std::size_t D, std::size_t N, Rng& rng) {
        SSMParams p;
        p.A_log = Tensor<T>({D, N});
        for (std::size_t d = 0; d < D; ++d)
            for (std::size_t n = 0; n < N; ++n)
                p.A_log.data()[d * N + n] = T(std::log(double(n + 1)));
        auto randn = [&rng](Tensor<T>& t, double std) {
            for (auto& v : t.vec()) v = T(rng.normal(0.0, std));
        };
        p.W_B = Tensor<T>({D, N});
        p.W_C = Tensor<T>({D, N});
        p.w_delta = Tensor<T>({D, 1});
        randn(p.W_B, 1.0 / std::sqrt(double(D)));
        randn(p.W_C, 1.0 / std::sqrt(double(D)));
        randn(p.w_delta, 1.0 / std::sqrt(double(D)));
        p.dt_bias = Tensor<T>({D});
        for (auto& v : p.dt_bias.vec()) {
            // softplus(bias) log-uniform in [1e-3, 1e-1]
            double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
            v = T(std::log(std::expm1(dt)));
        }
        p.D_skip = Tensor<T>({D}, T(1));
        return p;
    }

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".A_log", A_log);
        f(prefix + ".W_B", W_B);
        f(prefix + ".W_C", W_C);
        f(prefix + ".w_delta", w_delta);
        f(prefix + ".dt_bias", dt_bias);
        f(prefix + ".D_skip", D_skip);
    }
};

// Data-dependent parameterization: B_t, C_t, Delta_t are linear in the token.
template <typename T>
struct ScanInputs {
    Tensor<T> delta;  // [L,D]
    Tensor<T> B;      // [L,N]
    Tensor<T> C;      // [L,N]
};

template <typename T>
ScanInputs<T> ssm_projections(const Tensor<T>& x, SSMParams<T>& p) {
    ScanInputs<T> s;
    s.B = matmul(x, p.W_B);
    s.C = matmul(x, p.W_C);
    Tensor<T> dt = add(matmul(x, p.w_delta), reshape(p.dt_bias, {1, p.dim()}));
    s.delta = softplus(dt);
    return s;
}

// Selective scan of one sequence [L,D] under data-dependent parameters.
template <typename T>
Tensor<T> selective_scan(const Tensor<T>& x, SSMParams<T>& p, std::size_t chunk = 0) {
    if (x.rank() != 2 || x.extent(1) != p.dim())
        throw ShapeError("selective_scan: input " + shape_str(x.shape()) +
                         " does not match width " + std::to_string(p.dim()));
    if (x.extent(0) < 1) throw ContractError("selective_scan: empty sequence");
    const std::size_t L = x.extent(0), D = p.dim(), N = p.state_size();
    ScanInputs<T> s = ssm_projections(x, p);
    Tensor<T> A = neg(exp(p.A_log));
    Tensor<T> y = selective_scan_core(reshape(x, {1, L, D}), reshape(s.delta, {1, L, D}), A,
                                      reshape(s.B, {1, L, N}), reshape(s.C, {1, L, N}),
                                      p.D_skip, chunk);
    return reshape(y, {L, D});
}

// Chunked variant: identical semantics, time loop tiled by `chunk`.
template <typename T>
Tensor<T> chunked_scan(const Tensor<T>& x, SSMParams<T>& p, std::size_t chunk) {
    if (chunk < 1) throw ContractError("chunked_scan: chunk must be >= 1");
    return selective_scan(x, p, chunk);
}

// G independent sequences under one parameter set; states reset per lane.
template <typename T>
Tensor<T> selective_scan_batched(const Tensor<T>& x, SSMParams<T>& p) {
    if (x.rank() != 3 || x.extent(2) != p.dim())
        throw ShapeError("selective_scan_batched: input " + shape_str(x.shape()) +
                         " does not match width " + std::to_string(p.dim()));
    const std::size_t G = x.extent(0), L = x.extent(1), D = p.dim(), N = p.state_size();
    if (L < 1) throw ContractError("selective_scan: empty sequence");
    Tensor<T> flat = reshape(x, {G * L, D});
    ScanInputs<T> s = ssm_projections(flat, p);
    Tensor<T> A = neg(exp(p.A_log));
    return selective_scan_core(x, reshape(s.delta, {G, L, D}), A, reshape(s.B, {G, L, N}),
                               reshape(s.C, {G, L, N}), p.D_skip);
}

// ---------------------------------------------------------------------------
// Frozen-parameter (LTI) forms, used by the oracle equivalence checks.
// ---------------------------------------------------------------------------

// Run the recurrence with time-invariant per-channel (A_bar, B_bar, C) and a
// skip term. Not recorded on any graph; shares scan_step with the kernel.
template <typename T>
Tensor<T> scan_frozen(const Tensor<T>& x, const Tensor<T>& A_bar, const Tensor<T>& B_bar,
                      const Tensor<T>& C, const Tensor<T>& skip) {
    const std::size_t L = x.extent(0), D = x.extent(1), N = A_bar.extent(1);
    if (A_bar.extent(0) != D || B_bar.shape() != A_bar.shape() || C.shape() != A_bar.shape() ||
        skip.numel() != D)
        throw ShapeError("scan_frozen: inconsistent parameter shapes");
    if (L < 1) throw ContractError("scan_frozen: empty sequence");
    Tensor<T> y({L, D});
    std::vector<T> h(D * N, T(0));
    for (std::size_t t = 0; t < L; ++t)
        for (std::size_t d = 0; d < D; ++d)
            y.data()[t * D + d] = detail::scan_step(
                h.data() + d * N, A_bar.data() + d * N, B_bar.data() + d * N,
                C.data() + d * N, x.data()[t * D + d], skip.data()[d], N);
    return y;
}

// LTI kernel: K[d,l] = <C_d, A_bar_d^l B_bar_d>, l = 0..L-1.
// Causal convolution of x with K equals scan_frozen with zero skip.
template <typename T>
Tensor<T> lti_kernel(const Tensor<T>& A_bar, const Tensor<T>& B_bar, const Tensor<T>& C,
                     std::size_t L) {
    if (L < 1) throw ContractError("lti_kernel: L must be >= 1");
    const std::size_t D = A_bar.extent(0), N = A_bar.extent(1);
    if (B_bar.shape() != A_bar.shape() || C.shape() != A_bar.shape())
        throw ShapeError("lti_kernel: parameter shape mismatch");
    Tensor<T> K({D, L});
    std::vector<T> pow_b(N);
    for (std::size_t d = 0; d < D; ++d) {
        for (std::size_t n = 0; n < N; ++n) pow_b[n] = B_bar.data()[d * N + n];
        for (std::size_t l = 0; l < L; ++l) {
            T acc = T(0);
            for (std::size_t n = 0; n < N; ++n) acc += C.data()[d * N + n] * pow_b[n];
            K.data()[d * L + l] = acc;
            for (std::size_t n = 0; n < N; ++n) pow_b[n] *= A_bar.data()[d * N + n];
        }
    }
    return K;
}

// Per-channel causal convolution y[t,d] = sum_{s<=t} K[d,t-s] x[s,d].
template <typename T>
Tensor<T> causal_conv_with_kernel(const Tensor<T>& x, const Tensor<T>& K) {
    const std::size_t L = x.extent(0), D = x.extent(1);
    if (K.extent(0) != D || K.extent(1) != L)
        throw ShapeError("causal_conv_with_kernel: kernel shape mismatch");
    Tensor<T> y({L, D});
    for (std::size_t d = 0; d < D; ++d)
        for (std::size_t t = 0; t < L; ++t) {
            T acc = T(0);
            for (std::size_t s = 0; s <= t; ++s)
                acc += K.data()[d * L + (t - s)] * x.data()[s * D + d];
            y.data()[t * D + d] = acc;
        }
    return y;
}

// ---------------------------------------------------------------------------
// Mamba block: in-projection to content/gate, causal depthwise conv + SiLU
// on the content path, selective scan, SiLU-gated merge, out-projection.
// ---------------------------------------------------------------------------

template <typename T>
struct MambaBlockParams {
    Tensor<T> W_in;    // [D, 2E]
    Tensor<T> conv_w;  // [K, E]
    Tensor<T> conv_b;  // [E]
    SSMParams<T> ssm;  // width E
    Tensor<T> W_out;   // [E, D]

    std::size_t dim() const { return W_in.extent(0); }
    std::size_t inner() const { return W_out.extent(0); }

    static MambaBlockParams init(std::size_t D, std::size_t N, Rng& rng,
                                 std::size_t expansion = 2, std::size_t conv_width = 4) {
        MambaBlockParams p;
        const std::size_t E = expansion * D;
        auto randn = [&rng](Tensor<T>& t, double std) {
            for (auto& v : t.vec()) v = T(rng.normal(0.0, std));
        };
        p.W_in = Tensor<T>({D, 2 * E});
        randn(p.W_in, 1.0 / std::sqrt(double(D)));
        p.conv_w = Tensor<T>({conv_width, E});
        randn(p.conv_w, 1.0 / std::sqrt(double(conv_width)));
        p.conv_b = Tensor<T>({E});
        p.ssm = SSMParams<T>::init(E, N, rng);
        p.W_out = Tensor<T>({E, D});
        randn(p.W_out, 1.0 / std::sqrt(double(E)));
        return p;
    }

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".W_in", W_in);
        f(prefix + ".conv_w", conv_w);
        f(prefix + ".conv_b", conv_b);
        ssm.visit(prefix + ".ssm", f);
        f(prefix + ".W_out", W_out);
    }
};

// Batched form: [G,L,D] lanes run independently (conv and scan state both
// reset at lane boundaries).
template <typename T>
Tensor<T> mamba_block_batched(const Tensor<T>& x, MambaBlockParams<T>& p) {
    if (x.rank() != 3 || x.extent(2) != p.dim())
        throw ShapeError("mamba_block: input " + shape_str(x.shape()) +
                         " does not match width " + std::to_string(p.dim()));
    const std::size_t G = x.extent(0), L = x.extent(1), E = p.inner();
    Tensor<T> proj = matmul(reshape(x, {G * L, p.dim()}), p.W_in);  // [G*L, 2E]
    Tensor<T> content = reshape(slice(proj, 1, 0, E), {G, L, E});
    Tensor<T> gate = slice(proj, 1, E, E);
    content = silu(dwconv1d_causal(content, p.conv_w, p.conv_b));
    Tensor<T> scanned = selective_scan_batched(content, p.ssm);
    Tensor<T> gated = mul(reshape(scanned, {G * L, E}), silu(gate));
    return reshape(matmul(gated, p.W_out), {G, L, p.dim()});
}

template <typename T>
Tensor<T> mamba_block(const Tensor<T>& x, MambaBlockParams<T>& p) {
    if (x.rank() != 2)
        throw ShapeError("mamba_block: expected [L,D], got " + shape_str(x.shape()));
    const std::size_t L = x.extent(0), D = x.extent(1);
    return reshape(mamba_block_batched(reshape(x, {1, L, D}), p), {L, D});
}

}  // namespace cipa
