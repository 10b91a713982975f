#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "maenas/tensor.hpp"

namespace maenas {

struct Node {
    Tensor value;
    Tensor grad; // empty until something flows into it
    bool requires_grad = false;
    bool retain_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this->grad and accumulates into parents.
    std::function<void(Node&)> backward;

    void accumulate(const Tensor& g) {
        if (grad.empty()) grad = g;
        else grad += g;
    }
    Tensor& grad_buffer() {
        if (grad.empty()) grad = zeros_like(value);
        return grad;
    }
};

namespace detail {
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}
} // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// RAII guard disabling graph construction on the current thread.
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

/// Handle to a node of the dynamic computation graph. Copies share the node.
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

    static Var constant(Tensor t) {
        auto n = std::make_shared<Node>();
        n->value = std::move(t);
        return Var(std::move(n));
    }
    static Var leaf(Tensor t, bool requires_grad = true) {
        auto n = std::make_shared<Node>();
        n->value = std::move(t);
        n->requires_grad = requires_grad;
        return Var(std::move(n));
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Tensor& value() const { return node_->value; }
    Tensor& mutable_value() { return node_->value; }
    const Tensor& grad() const { return node_->grad; }
    Tensor& mutable_grad() { return node_->grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    bool requires_grad() const { return node_->requires_grad; }
    const Shape& shape() const { return node_->value.shape(); }
    void zero_grad() { node_->grad = Tensor(); }
    /// Keeps an interior node's gradient after backward().
    Var& retain_grad() {
        node_->retain_grad = true;
        return *this;
    }
    Node* node() const { return node_.get(); }
    const std::shared_ptr<Node>& shared() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

/// Builds a result node. The backward closure is dropped when no input needs a gradient
/// or grad mode is off.
inline Var make_result(Tensor value, const char* op, std::vector<Var> inputs,
                       std::function<void(Node&)> backward) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->op = op;
    if (!grad_enabled()) return Var(std::move(n));
    bool any = false;
    for (const auto& v : inputs) any = any || (v.defined() && v.requires_grad());
    if (!any) return Var(std::move(n));
    n->requires_grad = true;
    n->parents.reserve(inputs.size());
    for (auto& v : inputs)
        if (v.defined()) n->parents.push_back(v.shared());
    n->backward = std::move(backward);
    return Var(std::move(n));
}

/// Reverse-mode sweep from a scalar root. Leaf gradients accumulate across calls.
inline void backward(const Var& root) {
    if (root.value().numel() != 1) throw std::invalid_argument("backward() needs a scalar root");
    if (!root.requires_grad()) return;
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack{{root.node(), 0}};
    seen.insert(root.node());
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            Node* p = n->parents[i++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    root.node()->accumulate(Tensor(root.value().shape(), 1.f));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && !n->grad.empty()) n->backward(*n);
        // interior gradients are no longer needed once propagated
        if (n->backward && !n->retain_grad) n->grad = Tensor();
    }
}

} // namespace maenas
