#pragma once

#include <functional>

#include "cipa/tensor.hpp"

namespace cipa {

// Central-difference gradient oracle: (f(x+eps e_i) - f(x-eps e_i)) / (2 eps)
// per coordinate, accumulated in 64-bit regardless of T. `f` must be
// deterministic; probes are detached so nothing records on any active graph.
template <typename T>
Tensor<T> finite_diff_grad(const std::function<T(const Tensor<T>&)>& f,
                           const Tensor<T>& x, T eps) {
    if (!(eps > T(0))) throw ContractError("finite_diff_grad: eps must be positive");
    Tensor<T> g(x.shape());
    Tensor<T> probe = x.clone();
    T* pd = probe.data();
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const T saved = pd[i];
        pd[i] = saved + eps;
        const double fp = double(f(probe));
        pd[i] = saved - eps;
        const double fm = double(f(probe));
        pd[i] = saved;
        g.data()[i] = T((fp - fm) / (2.0 * double(eps)));
    }
    return g;
}

// Normalized max-gradient error used by all gradient checks: the worst
// coordinate discrepancy relative to the larger gradient magnitude, with a
// unit floor so near-zero gradients compare absolutely.
template <typename T>
double grad_rel_error(const std::vector<T>& analytic, const Tensor<T>& fd) {
    double max_diff = 0.0, max_mag = 1.0;
    for (std::size_t i = 0; i < fd.numel(); ++i) {
        double a = double(analytic[i]);
        double b = double(fd.data()[i]);
        max_diff = std::max(max_diff, std::abs(a - b));
        max_mag = std::max({max_mag, std::abs(a), std::abs(b)});
    }
    return max_diff / max_mag;
}

}  // namespace cipa
