#pragma once

#include <atomic>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "treenet/tensor.hpp"

namespace treenet {

/// One recorded operation. The backward closure owns whatever activations it saved.
template <Scalar T>
struct Node {
    using BackwardFn = std::function<void(std::span<const T> grad_out, std::span<std::span<T>> grad_in)>;

    std::string kind;
    std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
    BackwardFn backward;
    bool consumed = false;
};

namespace detail {
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

/// Disables graph recording for the current thread while alive.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Test hook: when set, backward() seeds the root with a wrong gradient so that
/// every downstream gradient is corrupted.
inline std::atomic<bool>& backward_fault_injection() {
    static std::atomic<bool> flag{false};
    return flag;
}

template <Scalar T>
bool needs_grad(const Tensor<T>& t) {
    return t.defined() && t.requires_grad();
}

/// Attaches a node to `out` when recording is on and any input needs a gradient.
template <Scalar T>
void record(Tensor<T>& out, std::string kind, std::vector<Tensor<T>> inputs,
            typename Node<T>::BackwardFn backward) {
    if (!grad_enabled()) return;
    bool any = false;
    for (const auto& in : inputs) any = any || needs_grad(in);
    if (!any) return;
    auto node = std::make_shared<Node<T>>();
    node->kind = std::move(kind);
    node->inputs.reserve(inputs.size());
    for (const auto& in : inputs) node->inputs.push_back(in.impl());
    node->backward = std::move(backward);
    out.impl()->grad_fn = std::move(node);
    out.impl()->requires_grad = true;
}

/// Reverse-mode sweep from a scalar root. Leaf tensors accumulate into their grad;
/// the traversed graph is released and cannot be replayed.
template <Scalar T>
void backward(const Tensor<T>& root) {
    if (!root.defined() || root.numel() != 1)
        throw GraphError("backward root must be a scalar, got shape " +
                         (root.defined() ? to_string(root.shape()) : std::string("<undefined>")));
    const auto& root_impl = root.impl();
    if (!root_impl->grad_fn)
        throw GraphError("backward root was not produced by a recorded graph");
    if (root_impl->grad_fn->consumed) throw GraphError("graph already consumed by a previous backward");

    // Iterative post-order DFS over tensors carrying a node.
    std::vector<std::shared_ptr<TensorImpl<T>>> order;
    std::unordered_set<const TensorImpl<T>*> visited;
    std::vector<std::pair<std::shared_ptr<TensorImpl<T>>, std::size_t>> stack;
    stack.emplace_back(root_impl, 0);
    visited.insert(root_impl.get());
    while (!stack.empty()) {
        auto& [impl, next] = stack.back();
        const auto& node = impl->grad_fn;
        if (node && next < node->inputs.size()) {
            std::shared_ptr<TensorImpl<T>> child = node->inputs[next++];
            if (child->grad_fn && !visited.contains(child.get())) {
                visited.insert(child.get());
                stack.emplace_back(std::move(child), 0);
            }
            continue;
        }
        order.push_back(impl);
        stack.pop_back();
    }

    for (const auto& impl : order)
        if (impl->grad_fn->consumed) throw GraphError("graph already consumed by a previous backward");

    root_impl->grad.assign(1, backward_fault_injection().load() ? T(1.5) : T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl<T>* impl = it->get();
        auto& node = *impl->grad_fn;
        if (impl->grad.size() == impl->data.size()) {
            std::vector<std::span<T>> grad_in;
            grad_in.reserve(node.inputs.size());
            for (auto& in : node.inputs) {
                if (in->requires_grad) {
                    in->ensure_grad();
                    grad_in.emplace_back(in->grad);
                } else {
                    grad_in.emplace_back();
                }
            }
            node.backward(std::span<const T>(impl->grad), std::span<std::span<T>>(grad_in));
        }
        node.consumed = true;
        node.backward = nullptr;
        node.inputs.clear();
        // Intermediate gradients are scratch; only leaves keep theirs.
        std::vector<T>().swap(impl->grad);
    }
}

}  // namespace treenet
