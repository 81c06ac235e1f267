#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "cipa/tensor.hpp"

namespace cipa {

// Dynamic tape. Ops append themselves in execution order (which is a valid
// topological order), so reverse iteration visits every node exactly once.
// One graph per forward pass; the graph owns the backward closures and the
// saved tensors they capture, and both die with it.
template <typename T>
class OpGraph {
public:
    struct Node {
        const char* op;
        std::shared_ptr<TensorImpl<T>> output;
        std::function<void()> backward;
    };

    OpGraph() : prev_(current_ptr()) { current_ptr() = this; }
    ~OpGraph() { current_ptr() = prev_; }

    OpGraph(const OpGraph&) = delete;
    OpGraph& operator=(const OpGraph&) = delete;

    static OpGraph* current() { return current_ptr(); }

    void record(const char* op, std::shared_ptr<TensorImpl<T>> output,
                std::function<void()> backward) {
        nodes_.push_back({op, std::move(output), std::move(backward)});
    }

    std::size_t size() const { return nodes_.size(); }
    const std::vector<Node>& nodes() const { return nodes_; }
    std::vector<Node>& nodes() { return nodes_; }

private:
    static OpGraph*& current_ptr() {
        thread_local OpGraph* cur = nullptr;
        return cur;
    }

    std::vector<Node> nodes_;
    OpGraph* prev_;
};

namespace autograd {

template <typename T>
inline bool tracing(std::initializer_list<Tensor<T>> inputs) {
    if (!OpGraph<T>::current()) return false;
    for (const auto& t : inputs)
        if (t.defined() && t.requires_grad()) return true;
    return false;
}

// Registers `out` as produced by `op` when any input is tracked. The
// backward closure reads out->grad and accumulates into input grads.
template <typename T>
inline void record(const char* op, std::initializer_list<Tensor<T>> inputs,
                   Tensor<T>& out, std::function<void()> backward) {
    if (!tracing(inputs)) return;
    auto impl = out.impl();
    impl->requires_grad = true;
    impl->is_leaf = false;
    OpGraph<T>::current()->record(op, std::move(impl), std::move(backward));
}

// += grad into an impl, allocating a zero buffer on first touch.
template <typename T>
inline void accumulate(const std::shared_ptr<TensorImpl<T>>& impl, const T* g,
                       std::size_t n) {
    if (!impl->requires_grad) return;
    impl->ensure_grad();
    T* dst = impl->grad.data();
    for (std::size_t i = 0; i < n; ++i) dst[i] += g[i];
}

}  // namespace autograd

// Reverse-mode sweep. Leaf gradients accumulate across calls; gradients of
// op outputs are reset each sweep so repeated backward over the same graph
// stays correct.
template <typename T>
inline void backward(OpGraph<T>& graph, const Tensor<T>& loss) {
    if (loss.numel() != 1)
        throw ContractError("backward: loss must be scalar, got " +
                            shape_str(loss.shape()));
    for (auto& node : graph.nodes()) node.output->grad.clear();
    loss.impl()->ensure_grad();
    loss.impl()->grad[0] = T(1);
    auto& nodes = graph.nodes();
    for (std::size_t i = nodes.size(); i-- > 0;) {
        auto& node = nodes[i];
        if (node.output->grad.empty()) continue;  // no gradient flowed here
        node.backward();
    }
}

}  // namespace cipa
