#pragma once

#include <cmath>
#include <vector>

#include "cipa/net.hpp"

namespace cipa {

// AdamW with decoupled weight decay and cosine-annealed learning rate
// (base at step 0, zero at the final step).

struct OptimConfig {
    float lr = 6e-5f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float weight_decay = 0.01f;
    std::size_t total_steps = 500;
};

inline float cosine_lr(float base, std::size_t step, std::size_t total_steps) {
    const std::size_t last = total_steps > 1 ? total_steps - 1 : 1;
    if (step >= total_steps) return 0.0f;
    const double t = double(step) / double(last);
    return float(double(base) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t)));
}

template <typename T>
struct AdamWState {
    std::vector<std::vector<T>> m, v;  // first/second moments per parameter
    std::size_t step = 0;              // completed optimizer steps

    template <typename Net>
    static AdamWState init(Net& net) {
        AdamWState st;
        net.visit_params([&](const std::string&, Tensor<T>& t) {
            st.m.emplace_back(t.numel(), T(0));
            st.v.emplace_back(t.numel(), T(0));
        });
        return st;
    }
};

// One AdamW update over the accumulated gradients. Parameters with no
// gradient this step are only weight-decayed through their (zero) update.
template <typename T, typename Net>
void adamw_update(Net& net, AdamWState<T>& state, const OptimConfig& cfg) {
    const float lr = cosine_lr(cfg.lr, state.step, cfg.total_steps);
    const std::size_t t = state.step + 1;
    const T bc1 = T(1) - T(std::pow(double(cfg.beta1), double(t)));
    const T bc2 = T(1) - T(std::pow(double(cfg.beta2), double(t)));
    std::size_t k = 0;
    net.visit_params([&](const std::string&, Tensor<T>& p) {
        std::vector<T>& m = state.m[k];
        std::vector<T>& v = state.v[k];
        ++k;
        T* w = p.data();
        const bool has_grad = p.has_grad();
        for (std::size_t i = 0; i < p.numel(); ++i) {
            const T g = has_grad ? p.grad()[i] : T(0);
            m[i] = T(cfg.beta1) * m[i] + (T(1) - T(cfg.beta1)) * g;
            v[i] = T(cfg.beta2) * v[i] + (T(1) - T(cfg.beta2)) * g * g;
            const T mhat = m[i] / bc1;
            const T vhat = v[i] / bc2;
            w[i] -= T(lr) * (mhat / (std::sqrt(vhat) + T(cfg.eps)) + T(cfg.weight_decay) * w[i]);
        }
    });
    ++state.step;
}

// One training item: preprocessed planes plus ground truth.
template <typename T>
struct TrainItem {
    Tensor<T> pet, ct, mask;
    std::string id;
};

template <typename T>
struct StepResult {
    double loss = 0.0, ce = 0.0, dice = 0.0;
    float lr = 0.0f;
};

// Forward/backward over the batch (sequential, deterministic), one AdamW
// update. Loss is the batch mean.
template <typename T>
StepResult<T> train_step(CipaNet<T>& net, std::vector<TrainItem<T>>& batch,
                         AdamWState<T>& state, const OptimConfig& cfg) {
    if (batch.empty()) throw ContractError("train_step: empty batch");
    net.zero_grads();
    StepResult<T> res;
    res.lr = cosine_lr(cfg.lr, state.step, cfg.total_steps);
    const T inv_b = T(1) / T(batch.size());
    for (auto& item : batch) {
        OpGraph<T> graph;
        Tensor<T> logits = net.forward(item.pet, item.ct);
        LossTerms<T> terms = segmentation_loss(logits, item.mask);
        Tensor<T> scaled = mul_scalar(terms.total, inv_b);
        backward(graph, scaled);
        res.loss += double(terms.total.item()) / double(batch.size());
        res.ce += double(terms.ce.item()) / double(batch.size());
        res.dice += double(terms.dice.item()) / double(batch.size());
    }
    if (!std::isfinite(res.loss))
        throw NumericFault("train_step: non-finite batch loss");
    adamw_update(net, state, cfg);
    return res;
}

}  // namespace cipa
