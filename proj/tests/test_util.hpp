#pragma once

#include <functional>
#include <vector>

#include "cipa/autograd.hpp"
#include "cipa/finite_diff.hpp"
#include "cipa/rng.hpp"
#include "cipa/tensor.hpp"

namespace testutil {

inline cipa::Tensor<double> rand_tensor(cipa::Shape shape, cipa::Rng& rng, double lo = -2.0,
                                        double hi = 2.0) {
    cipa::Tensor<double> t(std::move(shape));
    for (auto& v : t.vec()) v = rng.uniform(lo, hi);
    return t;
}

inline cipa::Tensor<float> rand_tensor_f(cipa::Shape shape, cipa::Rng& rng, double lo = -2.0,
                                         double hi = 2.0) {
    cipa::Tensor<float> t(std::move(shape));
    for (auto& v : t.vec()) v = float(rng.uniform(lo, hi));
    return t;
}

// Central differences w.r.t. `target`, perturbing it in place so the probe
// reaches parameters captured inside `eval`.
inline cipa::Tensor<double> fd_wrt(const std::function<double()>& eval,
                                   cipa::Tensor<double>& target, double eps = 1e-3) {
    cipa::Tensor<double> g(target.shape());
    double* d = target.data();
    for (std::size_t i = 0; i < target.numel(); ++i) {
        const double saved = d[i];
        d[i] = saved + eps;
        const double fp = eval();
        d[i] = saved - eps;
        const double fm = eval();
        d[i] = saved;
        g.data()[i] = (fp - fm) / (2.0 * eps);
    }
    return g;
}

// Max normalized gradient error of scalar-valued `build` over the given
// leaves, comparing reverse mode against central differences (64-bit).
inline double max_grad_err(const std::function<cipa::Tensor<double>()>& build,
                           std::vector<cipa::Tensor<double>> leaves, double eps = 1e-3) {
    for (auto& l : leaves) {
        l.set_requires_grad(true);
        l.zero_grad();
    }
    {
        cipa::OpGraph<double> g;
        cipa::Tensor<double> y = build();
        cipa::backward(g, y);
    }
    double worst = 0.0;
    for (auto& l : leaves) {
        cipa::Tensor<double> fd = fd_wrt([&] { return build().item(); }, l, eps);
        worst = std::max(worst, cipa::grad_rel_error(l.grad(), fd));
    }
    return worst;
}

}  // namespace testutil
