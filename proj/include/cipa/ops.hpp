#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "cipa/autograd.hpp"
#include "cipa/tensor.hpp"

namespace cipa {

// ---------------------------------------------------------------------------
// scalar helpers
// ---------------------------------------------------------------------------

namespace scalar {

template <typename T>
inline T sigmoid(T x) {
    if (x >= T(0)) {
        T e = std::exp(-x);
        return T(1) / (T(1) + e);
    }
    T e = std::exp(x);
    return e / (T(1) + e);
}

template <typename T>
inline T softplus(T x) {
    // max(x,0) + log1p(exp(-|x|)) is overflow-safe
    T m = x > T(0) ? x : T(0);
    return m + std::log1p(std::exp(-std::abs(x)));
}

template <typename T>
inline T silu(T x) {
    return x * sigmoid(x);
}

// phi1(z) = (exp(z) - 1) / z with the removable singularity filled by its
// series; used by the exact ZOH input discretization.
template <typename T>
inline T zoh_phi(T z) {
    if (std::abs(z) < T(1e-6)) return T(1) + z / T(2) + z * z / T(6);
    return std::expm1(z) / z;
}

// d/dz phi1(z) = (exp(z)(z-1) + 1) / z^2
template <typename T>
inline T zoh_phi_grad(T z) {
    if (std::abs(z) < T(1e-4))
        return T(0.5) + z / T(3) + z * z / T(8) + z * z * z / T(30);
    return (std::exp(z) * (z - T(1)) + T(1)) / (z * z);
}

}  // namespace scalar

// ---------------------------------------------------------------------------
// broadcasting machinery
// ---------------------------------------------------------------------------

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    std::size_t r = std::max(a.size(), b.size());
    Shape out(r);
    for (std::size_t i = 0; i < r; ++i) {
        std::size_t ea = i < r - a.size() ? 1 : a[i - (r - a.size())];
        std::size_t eb = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (ea != eb && ea != 1 && eb != 1)
            throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) +
                             " with " + shape_str(b));
        out[i] = ea == 1 ? eb : ea;
    }
    return out;
}

// Row-major strides of `in` aligned to a broadcast result of rank r; zero on
// broadcast axes.
inline std::vector<std::size_t> bcast_strides(const Shape& in, std::size_t r) {
    std::vector<std::size_t> st(r, 0);
    auto own = strides_of(in);
    std::size_t off = r - in.size();
    for (std::size_t i = 0; i < in.size(); ++i)
        st[off + i] = in[i] == 1 ? 0 : own[i];
    return st;
}

// Applies fn(out_offset, a_offset, b_offset) over every element of `out`.
template <typename F>
inline void for_broadcast(const Shape& out, const Shape& a, const Shape& b, F&& fn) {
    std::size_t r = out.size();
    auto sa = bcast_strides(a, r);
    auto sb = bcast_strides(b, r);
    std::vector<std::size_t> idx(r, 0);
    std::size_t oa = 0, ob = 0, n = numel_of(out);
    for (std::size_t o = 0; o < n; ++o) {
        fn(o, oa, ob);
        for (std::size_t i = r; i-- > 0;) {
            ++idx[i];
            oa += sa[i];
            ob += sb[i];
            if (idx[i] < out[i]) break;
            oa -= sa[i] * out[i];
            ob -= sb[i] * out[i];
            idx[i] = 0;
        }
    }
}

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

// True when b broadcasts as a contiguous repeating suffix of a (e.g. bias
// vectors over the last axis).
inline bool suffix_bcast(const Shape& a, const Shape& b) {
    std::size_t nb = numel_of(b);
    if (nb == 0) return false;
    // b's shape, with leading 1s stripped, must equal a's trailing extents
    std::size_t j = b.size();
    std::size_t prod = 1;
    while (j > 0 && b[j - 1] != 1) {
        prod *= b[j - 1];
        --j;
    }
    for (std::size_t i = 0; i < j; ++i)
        if (b[i] != 1) return false;
    if (prod != nb) return false;
    std::size_t need = b.size() - j;
    if (need > a.size()) return false;
    for (std::size_t i = 0; i < need; ++i)
        if (a[a.size() - need + i] != b[j + i]) return false;
    return true;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary ops
// ---------------------------------------------------------------------------

namespace detail {

enum class BinOp { Add, Sub, Mul, Div };

template <typename T>
inline T bin_eval(BinOp op, T a, T b) {
    switch (op) {
        case BinOp::Add: return a + b;
        case BinOp::Sub: return a - b;
        case BinOp::Mul: return a * b;
        default: return a / b;
    }
}

template <typename T>
Tensor<T> binary(const char* name, BinOp op, const Tensor<T>& a, const Tensor<T>& b) {
    Shape os = broadcast_shape(a.shape(), b.shape(), name);
    Tensor<T> out(os);
    const T* ad = a.data();
    const T* bd = b.data();
    T* od = out.data();
    const std::size_t n = out.numel();

    if (same_shape(a.shape(), os) && same_shape(b.shape(), os)) {
        for (std::size_t i = 0; i < n; ++i) od[i] = bin_eval(op, ad[i], bd[i]);
    } else if (same_shape(a.shape(), os) && suffix_bcast(os, b.shape())) {
        const std::size_t nb = b.numel();
        for (std::size_t i = 0; i < n; ++i) od[i] = bin_eval(op, ad[i], bd[i % nb]);
    } else {
        for_broadcast(os, a.shape(), b.shape(), [&](std::size_t o, std::size_t ia, std::size_t ib) {
            od[o] = bin_eval(op, ad[ia], bd[ib]);
        });
    }
    check_finite(name, out);

    autograd::record<T>(name, {a, b}, out, [op, ai = a.impl(), bi = b.impl(), oi = out.impl()] {
        const T* g = oi->grad.data();
        const T* av = ai->data.data();
        const T* bv = bi->data.data();
        Shape os2 = oi->shape;
        std::vector<T> ga(ai->requires_grad ? ai->data.size() : 0, T(0));
        std::vector<T> gb(bi->requires_grad ? bi->data.size() : 0, T(0));
        for_broadcast(os2, ai->shape, bi->shape, [&](std::size_t o, std::size_t ia, std::size_t ib) {
            T gy = g[o];
            switch (op) {
                case BinOp::Add:
                    if (!ga.empty()) ga[ia] += gy;
                    if (!gb.empty()) gb[ib] += gy;
                    break;
                case BinOp::Sub:
                    if (!ga.empty()) ga[ia] += gy;
                    if (!gb.empty()) gb[ib] -= gy;
                    break;
                case BinOp::Mul:
                    if (!ga.empty()) ga[ia] += gy * bv[ib];
                    if (!gb.empty()) gb[ib] += gy * av[ia];
                    break;
                case BinOp::Div:
                    if (!ga.empty()) ga[ia] += gy / bv[ib];
                    if (!gb.empty()) gb[ib] -= gy * av[ia] / (bv[ib] * bv[ib]);
                    break;
            }
        });
        if (!ga.empty()) autograd::accumulate(ai, ga.data(), ga.size());
        if (!gb.empty()) autograd::accumulate(bi, gb.data(), gb.size());
    });
    return out;
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary("add", detail::BinOp::Add, a, b);
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary("sub", detail::BinOp::Sub, a, b);
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary("mul", detail::BinOp::Mul, a, b);
}
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary("div", detail::BinOp::Div, a, b);
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }

// ---------------------------------------------------------------------------
// elementwise unary ops
// ---------------------------------------------------------------------------

namespace detail {

// fwd: y = f(x); dydx: local derivative from (x, y)
template <typename T, typename Fwd, typename Dydx>
Tensor<T> unary(const char* name, const Tensor<T>& x, Fwd fwd, Dydx dydx) {
    Tensor<T> out(x.shape());
    const T* xd = x.data();
    T* od = out.data();
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) od[i] = fwd(xd[i]);
    check_finite(name, out);
    autograd::record<T>(name, {x}, out, [xi = x.impl(), oi = out.impl(), dydx] {
        const T* g = oi->grad.data();
        const T* xv = xi->data.data();
        const T* yv = oi->data.data();
        std::vector<T> gx(xi->data.size());
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = g[i] * dydx(xv[i], yv[i]);
        autograd::accumulate(xi, gx.data(), gx.size());
    });
    return out;
}

}  // namespace detail

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    return detail::unary(
        "sigmoid", x, [](T v) { return scalar::sigmoid(v); },
        [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
    return detail::unary(
        "silu", x, [](T v) { return scalar::silu(v); },
        [](T v, T) {
            T s = scalar::sigmoid(v);
            return s * (T(1) + v * (T(1) - s));
        });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
    return detail::unary(
        "softplus", x, [](T v) { return scalar::softplus(v); },
        [](T v, T) { return scalar::sigmoid(v); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
    return detail::unary(
        "exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
    return detail::unary(
        "log", x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
    return detail::unary(
        "neg", x, [](T v) { return -v; }, [](T, T) { return T(-1); });
}

// (exp(z)-1)/z with series fallback near zero; the building block of the
// exact ZOH B discretization.
template <typename T>
Tensor<T> zoh_phi(const Tensor<T>& z) {
    return detail::unary(
        "zoh_phi", z, [](T v) { return scalar::zoh_phi(v); },
        [](T v, T) { return scalar::zoh_phi_grad(v); });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
    return detail::unary(
        "add_scalar", x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, T c) {
    return detail::unary(
        "mul_scalar", x, [c](T v) { return v * c; }, [c](T, T) { return c; });
}

// ---------------------------------------------------------------------------
// matmul / linear
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0))
        throw ShapeError("matmul: incompatible " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    const std::size_t M = a.extent(0), K = a.extent(1), N = b.extent(1);
    Tensor<T> out({M, N});
    const T* A = a.data();
    const T* B = b.data();
    T* O = out.data();
    for (std::size_t i = 0; i < M; ++i)
        for (std::size_t k = 0; k < K; ++k) {
            T av = A[i * K + k];
            const T* brow = B + k * N;
            T* orow = O + i * N;
            for (std::size_t j = 0; j < N; ++j) orow[j] += av * brow[j];
        }
    check_finite("matmul", out);

    autograd::record<T>("matmul", {a, b}, out, [ai = a.impl(), bi = b.impl(), oi = out.impl(), M, K, N] {
        const T* g = oi->grad.data();
        if (ai->requires_grad) {
            std::vector<T> ga(M * K, T(0));
            const T* B = bi->data.data();
            for (std::size_t i = 0; i < M; ++i)
                for (std::size_t j = 0; j < N; ++j) {
                    T gv = g[i * N + j];
                    const T* brow = B + j;  // column j
                    for (std::size_t k = 0; k < K; ++k) ga[i * K + k] += gv * brow[k * N];
                }
            autograd::accumulate(ai, ga.data(), ga.size());
        }
        if (bi->requires_grad) {
            std::vector<T> gb(K * N, T(0));
            const T* A = ai->data.data();
            for (std::size_t i = 0; i < M; ++i)
                for (std::size_t k = 0; k < K; ++k) {
                    T av = A[i * K + k];
                    const T* grow = g + i * N;
                    T* gbrow = gb.data() + k * N;
                    for (std::size_t j = 0; j < N; ++j) gbrow[j] += av * grow[j];
                }
            autograd::accumulate(bi, gb.data(), gb.size());
        }
    });
    return out;
}

// x [M,K] @ w [K,N] (+ bias [N])
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias = {}) {
    Tensor<T> y = matmul(x, w);
    if (bias.defined()) y = add(y, bias);
    return y;
}

// ---------------------------------------------------------------------------
// convolutions
// ---------------------------------------------------------------------------

// x [H,W,Ci], w [kh,kw,Ci,Co], bias [Co] optional; symmetric zero padding.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 std::size_t stride, std::size_t pad) {
    if (x.rank() != 3 || w.rank() != 4 || x.extent(2) != w.extent(2))
        throw ShapeError("conv2d: incompatible input " + shape_str(x.shape()) +
                         " and kernel " + shape_str(w.shape()));
    const std::size_t H = x.extent(0), W = x.extent(1), Ci = x.extent(2);
    const std::size_t kh = w.extent(0), kw = w.extent(1), Co = w.extent(3);
    if (H + 2 * pad < kh || W + 2 * pad < kw)
        throw ShapeError("conv2d: kernel larger than padded input");
    const std::size_t Ho = (H + 2 * pad - kh) / stride + 1;
    const std::size_t Wo = (W + 2 * pad - kw) / stride + 1;
    Tensor<T> out({Ho, Wo, Co});
    const T* X = x.data();
    const T* Wd = w.data();
    T* O = out.data();
    for (std::size_t oy = 0; oy < Ho; ++oy)
        for (std::size_t ox = 0; ox < Wo; ++ox) {
            T* orow = O + (oy * Wo + ox) * Co;
            for (std::size_t ky = 0; ky < kh; ++ky) {
                std::ptrdiff_t iy = std::ptrdiff_t(oy * stride + ky) - std::ptrdiff_t(pad);
                if (iy < 0 || iy >= std::ptrdiff_t(H)) continue;
                for (std::size_t kx = 0; kx < kw; ++kx) {
                    std::ptrdiff_t ix = std::ptrdiff_t(ox * stride + kx) - std::ptrdiff_t(pad);
                    if (ix < 0 || ix >= std::ptrdiff_t(W)) continue;
                    const T* xrow = X + (std::size_t(iy) * W + std::size_t(ix)) * Ci;
                    const T* wrow = Wd + (ky * kw + kx) * Ci * Co;
                    for (std::size_t ci = 0; ci < Ci; ++ci) {
                        T xv = xrow[ci];
                        const T* wo = wrow + ci * Co;
                        for (std::size_t co = 0; co < Co; ++co) orow[co] += xv * wo[co];
                    }
                }
            }
        }
    if (bias.defined()) {
        if (bias.numel() != Co) throw ShapeError("conv2d: bias size mismatch");
        const T* B = bias.data();
        for (std::size_t i = 0; i < Ho * Wo; ++i)
            for (std::size_t co = 0; co < Co; ++co) O[i * Co + co] += B[co];
    }
    check_finite("conv2d", out);

    autograd::record<T>("conv2d", {x, w, bias.defined() ? bias : x}, out,
                        [xi = x.impl(), wi = w.impl(), bi = bias.defined() ? bias.impl() : nullptr,
                         oi = out.impl(), H, W, Ci, kh, kw, Co, Ho, Wo, stride, pad] {
        const T* g = oi->grad.data();
        const T* X = xi->data.data();
        const T* Wd = wi->data.data();
        std::vector<T> gx(xi->requires_grad ? xi->data.size() : 0, T(0));
        std::vector<T> gw(wi->requires_grad ? wi->data.size() : 0, T(0));
        for (std::size_t oy = 0; oy < Ho; ++oy)
            for (std::size_t ox = 0; ox < Wo; ++ox) {
                const T* grow = g + (oy * Wo + ox) * Co;
                for (std::size_t ky = 0; ky < kh; ++ky) {
                    std::ptrdiff_t iy = std::ptrdiff_t(oy * stride + ky) - std::ptrdiff_t(pad);
                    if (iy < 0 || iy >= std::ptrdiff_t(H)) continue;
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                        std::ptrdiff_t ix = std::ptrdiff_t(ox * stride + kx) - std::ptrdiff_t(pad);
                        if (ix < 0 || ix >= std::ptrdiff_t(W)) continue;
                        std::size_t xoff = (std::size_t(iy) * W + std::size_t(ix)) * Ci;
                        std::size_t woff = (ky * kw + kx) * Ci * Co;
                        for (std::size_t ci = 0; ci < Ci; ++ci) {
                            const T* wo = Wd + woff + ci * Co;
                            T acc = T(0);
                            for (std::size_t co = 0; co < Co; ++co) acc += grow[co] * wo[co];
                            if (!gx.empty()) gx[xoff + ci] += acc;
                            if (!gw.empty()) {
                                T xv = X[xoff + ci];
                                T* gwo = gw.data() + woff + ci * Co;
                                for (std::size_t co = 0; co < Co; ++co) gwo[co] += xv * grow[co];
                            }
                        }
                    }
                }
            }
        if (!gx.empty()) autograd::accumulate(xi, gx.data(), gx.size());
        if (!gw.empty()) autograd::accumulate(wi, gw.data(), gw.size());
        if (bi && bi->requires_grad) {
            std::vector<T> gb(Co, T(0));
            for (std::size_t i = 0; i < Ho * Wo; ++i)
                for (std::size_t co = 0; co < Co; ++co) gb[co] += g[i * Co + co];
            autograd::accumulate(bi, gb.data(), gb.size());
        }
    });
    return out;
}

// Depthwise 2D conv; w [kh,kw,C], bias [C] optional, stride 1.
template <typename T>
Tensor<T> dwconv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                   std::size_t pad) {
    if (x.rank() != 3 || w.rank() != 3 || x.extent(2) != w.extent(2))
        throw ShapeError("dwconv2d: incompatible input " + shape_str(x.shape()) +
                         " and kernel " + shape_str(w.shape()));
    const std::size_t H = x.extent(0), W = x.extent(1), C = x.extent(2);
    const std::size_t kh = w.extent(0), kw = w.extent(1);
    const std::size_t Ho = H + 2 * pad - kh + 1, Wo = W + 2 * pad - kw + 1;
    Tensor<T> out({Ho, Wo, C});
    const T* X = x.data();
    const T* Wd = w.data();
    T* O = out.data();
    for (std::size_t oy = 0; oy < Ho; ++oy)
        for (std::size_t ox = 0; ox < Wo; ++ox) {
            T* orow = O + (oy * Wo + ox) * C;
            for (std::size_t ky = 0; ky < kh; ++ky) {
                std::ptrdiff_t iy = std::ptrdiff_t(oy + ky) - std::ptrdiff_t(pad);
                if (iy < 0 || iy >= std::ptrdiff_t(H)) continue;
                for (std::size_t kx = 0; kx < kw; ++kx) {
                    std::ptrdiff_t ix = std::ptrdiff_t(ox + kx) - std::ptrdiff_t(pad);
                    if (ix < 0 || ix >= std::ptrdiff_t(W)) continue;
                    const T* xrow = X + (std::size_t(iy) * W + std::size_t(ix)) * C;
                    const T* wrow = Wd + (ky * kw + kx) * C;
                    for (std::size_t c = 0; c < C; ++c) orow[c] += xrow[c] * wrow[c];
                }
            }
        }
    if (bias.defined()) {
        const T* B = bias.data();
        for (std::size_t i = 0; i < Ho * Wo; ++i)
            for (std::size_t c = 0; c < C; ++c) O[i * C + c] += B[c];
    }
    check_finite("dwconv2d", out);

    autograd::record<T>("dwconv2d", {x, w, bias.defined() ? bias : x}, out,
                        [xi = x.impl(), wi = w.impl(), bi = bias.defined() ? bias.impl() : nullptr,
                         oi = out.impl(), H, W, C, kh, kw, Ho, Wo, pad] {
        const T* g = oi->grad.data();
        const T* X = xi->data.data();
        const T* Wd = wi->data.data();
        std::vector<T> gx(xi->requires_grad ? xi->data.size() : 0, T(0));
        std::vector<T> gw(wi->requires_grad ? wi->data.size() : 0, T(0));
        for (std::size_t oy = 0; oy < Ho; ++oy)
            for (std::size_t ox = 0; ox < Wo; ++ox) {
                const T* grow = g + (oy * Wo + ox) * C;
                for (std::size_t ky = 0; ky < kh; ++ky) {
                    std::ptrdiff_t iy = std::ptrdiff_t(oy + ky) - std::ptrdiff_t(pad);
                    if (iy < 0 || iy >= std::ptrdiff_t(H)) continue;
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                        std::ptrdiff_t ix = std::ptrdiff_t(ox + kx) - std::ptrdiff_t(pad);
                        if (ix < 0 || ix >= std::ptrdiff_t(W)) continue;
                        std::size_t xoff = (std::size_t(iy) * W + std::size_t(ix)) * C;
                        std::size_t woff = (ky * kw + kx) * C;
                        for (std::size_t c = 0; c < C; ++c) {
                            if (!gx.empty()) gx[xoff + c] += grow[c] * Wd[woff + c];
                            if (!gw.empty()) gw[woff + c] += grow[c] * X[xoff + c];
                        }
                    }
                }
            }
        if (!gx.empty()) autograd::accumulate(xi, gx.data(), gx.size());
        if (!gw.empty()) autograd::accumulate(wi, gw.data(), gw.size());
        if (bi && bi->requires_grad) {
            std::vector<T> gb(C, T(0));
            for (std::size_t i = 0; i < Ho * Wo; ++i)
                for (std::size_t c = 0; c < C; ++c) gb[c] += g[i * C + c];
            autograd::accumulate(bi, gb.data(), gb.size());
        }
    });
    return out;
}

// Causal depthwise 1D conv; w [K,D], left-padded by K-1 so y[t] depends on
// x[t-K+1..t] only. Accepts [L,D] or [G,L,D] (lanes convolved independently,
// no state leaks across lane boundaries).
template <typename T>
Tensor<T> dwconv1d_causal(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias = {}) {
    if ((x.rank() != 2 && x.rank() != 3) || w.rank() != 2 ||
        x.shape().back() != w.extent(1))
        throw ShapeError("dwconv1d_causal: incompatible input " + shape_str(x.shape()) +
                         " and kernel " + shape_str(w.shape()));
    const std::size_t G = x.rank() == 3 ? x.extent(0) : 1;
    const std::size_t L = x.rank() == 3 ? x.extent(1) : x.extent(0);
    const std::size_t D = x.shape().back(), K = w.extent(0);
    Tensor<T> out(x.shape());
    const T* Wd = w.data();
    for (std::size_t g = 0; g < G; ++g) {
        const T* X = x.data() + g * L * D;
        T* O = out.data() + g * L * D;
        for (std::size_t t = 0; t < L; ++t) {
            T* orow = O + t * D;
            for (std::size_t k = 0; k < K; ++k) {
                std::ptrdiff_t s = std::ptrdiff_t(t) - std::ptrdiff_t(K - 1) + std::ptrdiff_t(k);
                if (s < 0) continue;
                const T* xrow = X + std::size_t(s) * D;
                const T* wrow = Wd + k * D;
                for (std::size_t d = 0; d < D; ++d) orow[d] += xrow[d] * wrow[d];
            }
        }
    }
    if (bias.defined()) {
        const T* B = bias.data();
        T* O = out.data();
        for (std::size_t t = 0; t < G * L; ++t)
            for (std::size_t d = 0; d < D; ++d) O[t * D + d] += B[d];
    }
    check_finite("dwconv1d_causal", out);

    autograd::record<T>("dwconv1d_causal", {x, w, bias.defined() ? bias : x}, out,
                        [xi = x.impl(), wi = w.impl(), bi = bias.defined() ? bias.impl() : nullptr,
                         oi = out.impl(), G, L, D, K] {
        const T* Wd = wi->data.data();
        std::vector<T> gx(xi->requires_grad ? xi->data.size() : 0, T(0));
        std::vector<T> gw(wi->requires_grad ? wi->data.size() : 0, T(0));
        for (std::size_t lane = 0; lane < G; ++lane) {
            const T* g = oi->grad.data() + lane * L * D;
            const T* X = xi->data.data() + lane * L * D;
            for (std::size_t t = 0; t < L; ++t)
                for (std::size_t k = 0; k < K; ++k) {
                    std::ptrdiff_t s = std::ptrdiff_t(t) - std::ptrdiff_t(K - 1) + std::ptrdiff_t(k);
                    if (s < 0) continue;
                    for (std::size_t d = 0; d < D; ++d) {
                        T gy = g[t * D + d];
                        if (!gx.empty()) gx[(lane * L + std::size_t(s)) * D + d] += gy * Wd[k * D + d];
                        if (!gw.empty()) gw[k * D + d] += gy * X[std::size_t(s) * D + d];
                    }
                }
        }
        if (!gx.empty()) autograd::accumulate(xi, gx.data(), gx.size());
        if (!gw.empty()) autograd::accumulate(wi, gw.data(), gw.size());
        if (bi && bi->requires_grad) {
            std::vector<T> gb(D, T(0));
            const T* g = oi->grad.data();
            for (std::size_t t = 0; t < G * L; ++t)
                for (std::size_t d = 0; d < D; ++d) gb[d] += g[t * D + d];
            autograd::accumulate(bi, gb.data(), gb.size());
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// layer normalization (over the last axis, variance epsilon 1e-5)
// ---------------------------------------------------------------------------

inline constexpr double kLayerNormEps = 1e-5;

template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta) {
    if (x.rank() < 1) throw ShapeError("layernorm: rank-0 input");
    const std::size_t D = x.shape().back();
    if (gamma.numel() != D || beta.numel() != D)
        throw ShapeError("layernorm: affine params must have " + std::to_string(D) +
                         " entries");
    const std::size_t R = x.numel() / D;
    Tensor<T> out(x.shape());
    std::vector<T> inv_sigma(R), xhat(x.numel());
    const T* X = x.data();
    const T* G = gamma.data();
    const T* B = beta.data();
    T* O = out.data();
    for (std::size_t r = 0; r < R; ++r) {
        const T* row = X + r * D;
        T mu = T(0);
        for (std::size_t d = 0; d < D; ++d) mu += row[d];
        mu /= T(D);
        T var = T(0);
        for (std::size_t d = 0; d < D; ++d) {
            T c = row[d] - mu;
            var += c * c;
        }
        var /= T(D);
        T is = T(1) / std::sqrt(var + T(kLayerNormEps));
        inv_sigma[r] = is;
        T* xh = xhat.data() + r * D;
        T* orow = O + r * D;
        for (std::size_t d = 0; d < D; ++d) {
            xh[d] = (row[d] - mu) * is;
            orow[d] = xh[d] * G[d] + B[d];
        }
    }
    check_finite("layernorm", out);

    autograd::record<T>("layernorm", {x, gamma, beta}, out,
                        [xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), oi = out.impl(),
                         R, D, inv_sigma = std::move(inv_sigma), xhat = std::move(xhat)] {
        const T* g = oi->grad.data();
        const T* G = gi->data.data();
        std::vector<T> gx(xi->requires_grad ? xi->data.size() : 0, T(0));
        std::vector<T> gg(gi->requires_grad ? D : 0, T(0));
        std::vector<T> gb(bi->requires_grad ? D : 0, T(0));
        for (std::size_t r = 0; r < R; ++r) {
            const T* grow = g + r * D;
            const T* xh = xhat.data() + r * D;
            if (!gg.empty())
                for (std::size_t d = 0; d < D; ++d) gg[d] += grow[d] * xh[d];
            if (!gb.empty())
                for (std::size_t d = 0; d < D; ++d) gb[d] += grow[d];
            if (!gx.empty()) {
                T m1 = T(0), m2 = T(0);
                for (std::size_t d = 0; d < D; ++d) {
                    T gh = grow[d] * G[d];
                    m1 += gh;
                    m2 += gh * xh[d];
                }
                m1 /= T(D);
                m2 /= T(D);
                T is = inv_sigma[r];
                T* gxr = gx.data() + r * D;
                for (std::size_t d = 0; d < D; ++d) {
                    T gh = grow[d] * G[d];
                    gxr[d] += (gh - m1 - xh[d] * m2) * is;
                }
            }
        }
        if (!gx.empty()) autograd::accumulate(xi, gx.data(), gx.size());
        if (!gg.empty()) autograd::accumulate(gi, gg.data(), gg.size());
        if (!gb.empty()) autograd::accumulate(bi, gb.data(), gb.size());
    });
    return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
    T acc = T(0);
    for (const T& v : x.vec()) acc += v;
    Tensor<T> out = Tensor<T>::scalar(acc);
    check_finite("sum_all", out);
    autograd::record<T>("sum_all", {x}, out, [xi = x.impl(), oi = out.impl()] {
        T g = oi->grad[0];
        std::vector<T> gx(xi->data.size(), g);
        autograd::accumulate(xi, gx.data(), gx.size());
    });
    return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
    return mul_scalar(sum_all(x), T(1) / T(x.numel()));
}

// Sum over one axis (axis removed from the shape).
template <typename T>
Tensor<T> sum_axis(const Tensor<T>& x, std::size_t axis) {
    if (axis >= x.rank()) throw ShapeError("sum_axis: axis out of range");
    Shape os;
    for (std::size_t i = 0; i < x.rank(); ++i)
        if (i != axis) os.push_back(x.extent(i));
    if (os.empty()) os.push_back(1);
    std::size_t outer = 1, mid = x.extent(axis), inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= x.extent(i);
    for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.extent(i);
    Tensor<T> out(os);
    const T* X = x.data();
    T* O = out.data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t m = 0; m < mid; ++m) {
            const T* src = X + (o * mid + m) * inner;
            T* dst = O + o * inner;
            for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    check_finite("sum_axis", out);
    autograd::record<T>("sum_axis", {x}, out, [xi = x.impl(), oi = out.impl(), outer, mid, inner] {
        const T* g = oi->grad.data();
        std::vector<T> gx(xi->data.size());
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t m = 0; m < mid; ++m) {
                const T* src = g + o * inner;
                T* dst = gx.data() + (o * mid + m) * inner;
                for (std::size_t i = 0; i < inner; ++i) dst[i] = src[i];
            }
        autograd::accumulate(xi, gx.data(), gx.size());
    });
    return out;
}

template <typename T>
Tensor<T> mean_axis(const Tensor<T>& x, std::size_t axis) {
    return mul_scalar(sum_axis(x, axis), T(1) / T(x.extent(axis)));
}

// ---------------------------------------------------------------------------
// movement ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (numel_of(shape) != x.numel())
        throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) +
                         " changes element count");
    Tensor<T> out = Tensor<T>::from_data(std::move(shape), x.vec());
    autograd::record<T>("reshape", {x}, out, [xi = x.impl(), oi = out.impl()] {
        autograd::accumulate(xi, oi->grad.data(), oi->grad.size());
    });
    return out;
}

// Swap two axes (involution).
template <typename T>
Tensor<T> transpose(const Tensor<T>& x, std::size_t a0, std::size_t a1) {
    if (a0 >= x.rank() || a1 >= x.rank())
        throw ShapeError("transpose: axis out of range for " + shape_str(x.shape()));
    Shape os = x.shape();
    std::swap(os[a0], os[a1]);
    Tensor<T> out(os);
    auto sx = strides_of(x.shape());
    auto so = strides_of(os);
    std::swap(sx[a0], sx[a1]);  // sx now maps out multi-index -> x offset
    const T* X = x.data();
    T* O = out.data();
    const std::size_t r = os.size(), n = out.numel();
    std::vector<std::size_t> idx(r, 0);
    std::size_t xo = 0;
    for (std::size_t o = 0; o < n; ++o) {
        O[o] = X[xo];
        for (std::size_t i = r; i-- > 0;) {
            ++idx[i];
            xo += sx[i];
            if (idx[i] < os[i]) break;
            xo -= sx[i] * os[i];
            idx[i] = 0;
        }
    }
    autograd::record<T>("transpose", {x}, out, [xi = x.impl(), oi = out.impl(), a0, a1] {
        // transpose of the gradient with the same axis swap
        Shape gs = oi->shape;
        auto sg = strides_of(xi->shape);
        std::swap(sg[a0], sg[a1]);
        const T* g = oi->grad.data();
        std::vector<T> gx(xi->data.size());
        const std::size_t r = gs.size(), n = oi->grad.size();
        std::vector<std::size_t> idx(r, 0);
        std::size_t xo = 0;
        for (std::size_t o = 0; o < n; ++o) {
            gx[xo] = g[o];
            for (std::size_t i = r; i-- > 0;) {
                ++idx[i];
                xo += sg[i];
                if (idx[i] < gs[i]) break;
                xo -= sg[i] * gs[i];
                idx[i] = 0;
            }
        }
        autograd::accumulate(xi, gx.data(), gx.size());
    });
    return out;
}

// Reverse along one axis.
template <typename T>
Tensor<T> flip(const Tensor<T>& x, std::size_t axis) {
    if (axis >= x.rank()) throw ShapeError("flip: axis out of range");
    std::size_t outer = 1, mid = x.extent(axis), inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= x.extent(i);
    for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.extent(i);
    Tensor<T> out(x.shape());
    const T* X = x.data();
    T* O = out.data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t m = 0; m < mid; ++m) {
            const T* src = X + (o * mid + m) * inner;
            T* dst = O + (o * mid + (mid - 1 - m)) * inner;
            std::copy(src, src + inner, dst);
        }
    autograd::record<T>("flip", {x}, out, [xi = x.impl(), oi = out.impl(), outer, mid, inner] {
        const T* g = oi->grad.data();
        std::vector<T> gx(xi->data.size());
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t m = 0; m < mid; ++m) {
                const T* src = g + (o * mid + (mid - 1 - m)) * inner;
                T* dst = gx.data() + (o * mid + m) * inner;
                std::copy(src, src + inner, dst);
            }
        autograd::accumulate(xi, gx.data(), gx.size());
    });
    return out;
}

// Contiguous slab along one axis.
template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t len) {
    if (axis >= x.rank() || start + len > x.extent(axis))
        throw ShapeError("slice: [" + std::to_string(start) + "," +
                         std::to_string(start + len) + ") out of range on axis " +
                         std::to_string(axis) + " of " + shape_str(x.shape()));
    std::size_t outer = 1, mid = x.extent(axis), inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= x.extent(i);
    for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.extent(i);
    Shape os = x.shape();
    os[axis] = len;
    Tensor<T> out(os);
    const T* X = x.data();
    T* O = out.data();
    for (std::size_t o = 0; o < outer; ++o)
        std::copy(X + (o * mid + start) * inner, X + (o * mid + start + len) * inner,
                  O + o * len * inner);
    autograd::record<T>("slice", {x}, out,
                        [xi = x.impl(), oi = out.impl(), outer, mid, inner, start, len] {
        const T* g = oi->grad.data();
        std::vector<T> gx(xi->data.size(), T(0));
        for (std::size_t o = 0; o < outer; ++o)
            std::copy(g + o * len * inner, g + (o + 1) * len * inner,
                      gx.data() + (o * mid + start) * inner);
        autograd::accumulate(xi, gx.data(), gx.size());
    });
    return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
    if (parts.empty()) throw ContractError("concat: no inputs");
    const Shape& s0 = parts[0].shape();
    if (axis >= s0.size()) throw ShapeError("concat: axis out of range");
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != s0.size()) throw ShapeError("concat: rank mismatch");
        for (std::size_t i = 0; i < s0.size(); ++i)
            if (i != axis && p.extent(i) != s0[i])
                throw ShapeError("concat: extent mismatch on axis " + std::to_string(i) +
                                 ": " + shape_str(p.shape()) + " vs " + shape_str(s0));
        total += p.extent(axis);
    }
    Shape os = s0;
    os[axis] = total;
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
    for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
    Tensor<T> out(os);
    T* O = out.data();
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::size_t mid = p.extent(axis);
        const T* X = p.data();
        for (std::size_t o = 0; o < outer; ++o)
            std::copy(X + o * mid * inner, X + (o + 1) * mid * inner,
                      O + (o * total + off) * inner);
        off += mid;
    }
    bool track = OpGraph<T>::current() != nullptr;
    bool any = false;
    for (const auto& p : parts) any = any || p.requires_grad();
    if (track && any) {
        std::vector<std::shared_ptr<TensorImpl<T>>> impls;
        for (const auto& p : parts) impls.push_back(p.impl());
        auto oimpl = out.impl();
        oimpl->requires_grad = true;
        oimpl->is_leaf = false;
        OpGraph<T>::current()->record("concat", oimpl, [impls, oimpl, outer, inner, total, axis] {
            const T* g = oimpl->grad.data();
            std::size_t off = 0;
            for (const auto& xi : impls) {
                std::size_t mid = xi->shape[axis];
                if (xi->requires_grad) {
                    std::vector<T> gx(xi->data.size());
                    for (std::size_t o = 0; o < outer; ++o)
                        std::copy(g + (o * total + off) * inner, g + (o * total + off + mid) * inner,
                                  gx.data() + o * mid * inner);
                    autograd::accumulate(xi, gx.data(), gx.size());
                }
                off += mid;
            }
        });
    }
    return out;
}

// Row gather on the leading axis: out[r] = x[index[r]]. With a bijective
// index this is a permutation; backward scatter-adds.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::size_t>& index) {
    if (x.rank() < 1) throw ShapeError("gather_rows: rank-0 input");
    const std::size_t R = x.extent(0), inner = x.numel() / std::max<std::size_t>(R, 1);
    for (std::size_t i : index)
        if (i >= R) throw ShapeError("gather_rows: index out of range");
    Shape os = x.shape();
    os[0] = index.size();
    Tensor<T> out(os);
    const T* X = x.data();
    T* O = out.data();
    for (std::size_t r = 0; r < index.size(); ++r)
        std::copy(X + index[r] * inner, X + (index[r] + 1) * inner, O + r * inner);
    autograd::record<T>("gather_rows", {x}, out, [xi = x.impl(), oi = out.impl(), index, inner] {
        const T* g = oi->grad.data();
        std::vector<T> gx(xi->data.size(), T(0));
        for (std::size_t r = 0; r < index.size(); ++r) {
            const T* src = g + r * inner;
            T* dst = gx.data() + index[r] * inner;
            for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
        autograd::accumulate(xi, gx.data(), gx.size());
    });
    return out;
}

// ---------------------------------------------------------------------------
// pooling / resizing
// ---------------------------------------------------------------------------

// Adaptive average pooling over the last axis: [.., L] -> [.., P].
// Bin k covers [floor(kL/P), ceil((k+1)L/P)); works for P < L and P > L.
template <typename T>
Tensor<T> adaptive_avg_pool1d(const Tensor<T>& x, std::size_t P) {
    if (x.rank() < 1 || P == 0) throw ShapeError("adaptive_avg_pool1d: bad arguments");
    const std::size_t L = x.shape().back();
    const std::size_t R = x.numel() / L;
    Shape os = x.shape();
    os.back() = P;
    Tensor<T> out(os);
    const T* X = x.data();
    T* O = out.data();
    std::vector<std::size_t> lo(P), hi(P);
    for (std::size_t k = 0; k < P; ++k) {
        lo[k] = k * L / P;
        hi[k] = ((k + 1) * L + P - 1) / P;
    }
    for (std::size_t r = 0; r < R; ++r) {
        const T* row = X + r * L;
        T* orow = O + r * P;
        for (std::size_t k = 0; k < P; ++k) {
            T acc = T(0);
            for (std::size_t i = lo[k]; i < hi[k]; ++i) acc += row[i];
            orow[k] = acc / T(hi[k] - lo[k]);
        }
    }
    check_finite("adaptive_avg_pool1d", out);
    autograd::record<T>("adaptive_avg_pool1d", {x}, out,
                        [xi = x.impl(), oi = out.impl(), R, L, P, lo, hi] {
        const T* g = oi->grad.data();
        std::vector<T> gx(xi->data.size(), T(0));
        for (std::size_t r = 0; r < R; ++r) {
            const T* grow = g + r * P;
            T* gxr = gx.data() + r * L;
            for (std::size_t k = 0; k < P; ++k) {
                T share = grow[k] / T(hi[k] - lo[k]);
                for (std::size_t i = lo[k]; i < hi[k]; ++i) gxr[i] += share;
            }
        }
        autograd::accumulate(xi, gx.data(), gx.size());
    });
    return out;
}

namespace detail {

// Half-pixel-center source coordinate for bilinear resampling.
inline void bilerp_coeff(std::size_t o, std::size_t in, std::size_t out_n,
                         std::size_t& i0, std::size_t& i1, double& w1) {
    double src = (double(o) + 0.5) * double(in) / double(out_n) - 0.5;
    if (src < 0) src = 0;
    if (src > double(in - 1)) src = double(in - 1);
    i0 = std::size_t(src);
    i1 = std::min(i0 + 1, in - 1);
    w1 = src - double(i0);
}

}  // namespace detail

// Bilinear resize with half-pixel centers; preserves constants exactly.
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, std::size_t H2, std::size_t W2) {
    if (x.rank() != 3) throw ShapeError("resize_bilinear: expected [H,W,C]");
    const std::size_t H = x.extent(0), W = x.extent(1), C = x.extent(2);
    if (H2 == 0 || W2 == 0) throw ShapeError("resize_bilinear: zero target extent");
    Tensor<T> out({H2, W2, C});
    const T* X = x.data();
    T* O = out.data();
    for (std::size_t oy = 0; oy < H2; ++oy) {
        std::size_t y0, y1;
        double wy;
        detail::bilerp_coeff(oy, H, H2, y0, y1, wy);
        for (std::size_t ox = 0; ox < W2; ++ox) {
            std::size_t x0, x1;
            double wx;
            detail::bilerp_coeff(ox, W, W2, x0, x1, wx);
            const T* p00 = X + (y0 * W + x0) * C;
            const T* p01 = X + (y0 * W + x1) * C;
            const T* p10 = X + (y1 * W + x0) * C;
            const T* p11 = X + (y1 * W + x1) * C;
            T* orow = O + (oy * W2 + ox) * C;
            T a = T((1 - wy) * (1 - wx)), b = T((1 - wy) * wx);
            T c = T(wy * (1 - wx)), d = T(wy * wx);
            for (std::size_t ch = 0; ch < C; ++ch)
                orow[ch] = a * p00[ch] + b * p01[ch] + c * p10[ch] + d * p11[ch];
        }
    }
    check_finite("resize_bilinear", out);
    autograd::record<T>("resize_bilinear", {x}, out, [xi = x.impl(), oi = out.impl(), H, W, C, H2, W2] {
        const T* g = oi->grad.data();
        std::vector<T> gx(xi->data.size(), T(0));
        for (std::size_t oy = 0; oy < H2; ++oy) {
            std::size_t y0, y1;
            double wy;
            detail::bilerp_coeff(oy, H, H2, y0, y1, wy);
            for (std::size_t ox = 0; ox < W2; ++ox) {
                std::size_t x0, x1;
                double wx;
                detail::bilerp_coeff(ox, W, W2, x0, x1, wx);
                const T* grow = g + (oy * W2 + ox) * C;
                T a = T((1 - wy) * (1 - wx)), b = T((1 - wy) * wx);
                T c = T(wy * (1 - wx)), d = T(wy * wx);
                for (std::size_t ch = 0; ch < C; ++ch) {
                    gx[(y0 * W + x0) * C + ch] += a * grow[ch];
                    gx[(y0 * W + x1) * C + ch] += b * grow[ch];
                    gx[(y1 * W + x0) * C + ch] += c * grow[ch];
                    gx[(y1 * W + x1) * C + ch] += d * grow[ch];
                }
            }
        }
        autograd::accumulate(xi, gx.data(), gx.size());
    });
    return out;
}

// Nearest-neighbor resize (half-pixel centers); used for masks.
template <typename T>
Tensor<T> resize_nearest(const Tensor<T>& x, std::size_t H2, std::size_t W2) {
    if (x.rank() != 3) throw ShapeError("resize_nearest: expected [H,W,C]");
    const std::size_t H = x.extent(0), W = x.extent(1), C = x.extent(2);
    Tensor<T> out({H2, W2, C});
    const T* X = x.data();
    T* O = out.data();
    std::vector<std::size_t> sy(H2), sx(W2);
    for (std::size_t oy = 0; oy < H2; ++oy)
        sy[oy] = std::min<std::size_t>(H - 1, std::size_t((double(oy) + 0.5) * double(H) / double(H2)));
    for (std::size_t ox = 0; ox < W2; ++ox)
        sx[ox] = std::min<std::size_t>(W - 1, std::size_t((double(ox) + 0.5) * double(W) / double(W2)));
    for (std::size_t oy = 0; oy < H2; ++oy)
        for (std::size_t ox = 0; ox < W2; ++ox)
            std::copy(X + (sy[oy] * W + sx[ox]) * C, X + (sy[oy] * W + sx[ox] + 1) * C,
                      O + (oy * W2 + ox) * C);
    autograd::record<T>("resize_nearest", {x}, out, [xi = x.impl(), oi = out.impl(), W, C, H2, W2, sy, sx] {
        const T* g = oi->grad.data();
        std::vector<T> gx(xi->data.size(), T(0));
        for (std::size_t oy = 0; oy < H2; ++oy)
            for (std::size_t ox = 0; ox < W2; ++ox) {
                const T* grow = g + (oy * W2 + ox) * C;
                T* dst = gx.data() + (sy[oy] * W + sx[ox]) * C;
                for (std::size_t ch = 0; ch < C; ++ch) dst[ch] += grow[ch];
            }
        autograd::accumulate(xi, gx.data(), gx.size());
    });
    return out;
}

// Keep every second pixel: y[i,j] = x[2i,2j].
template <typename T>
Tensor<T> stride2_downsample(const Tensor<T>& x) {
    if (x.rank() != 3 || x.extent(0) % 2 || x.extent(1) % 2)
        throw ShapeError("stride2_downsample: extents of " + shape_str(x.shape()) +
                         " not divisible by 2");
    const std::size_t H = x.extent(0), W = x.extent(1), C = x.extent(2);
    Tensor<T> out({H / 2, W / 2, C});
    const T* X = x.data();
    T* O = out.data();
    for (std::size_t i = 0; i < H / 2; ++i)
        for (std::size_t j = 0; j < W / 2; ++j)
            std::copy(X + (2 * i * W + 2 * j) * C, X + (2 * i * W + 2 * j + 1) * C,
                      O + (i * (W / 2) + j) * C);
    autograd::record<T>("stride2_downsample", {x}, out, [xi = x.impl(), oi = out.impl(), H, W, C] {
        const T* g = oi->grad.data();
        std::vector<T> gx(xi->data.size(), T(0));
        for (std::size_t i = 0; i < H / 2; ++i)
            for (std::size_t j = 0; j < W / 2; ++j) {
                const T* src = g + (i * (W / 2) + j) * C;
                T* dst = gx.data() + (2 * i * W + 2 * j) * C;
                for (std::size_t ch = 0; ch < C; ++ch) dst[ch] += src[ch];
            }
        autograd::accumulate(xi, gx.data(), gx.size());
    });
    return out;
}

}  // namespace cipa
