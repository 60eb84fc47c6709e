#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace diffmorph {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

// One recorded value in the autodiff graph. Leaves have no backward_fn.
template <class T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    bool is_leaf() const { return !backward_fn; }

    std::vector<T>& ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
        return grad;
    }

    Node& parent(std::size_t i) { return *parents[i]; }
};

inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

// Fingerprint of the branch decisions taken by piecewise ops (leaky-ReLU
// sign, max winners, bilinear cells). Gradient checks compare fingerprints
// to detect finite-difference probes that straddle a kink.
struct BranchTrace {
    std::uint64_t hash = 1469598103934665603ull;
    void mix(std::uint64_t v) { hash = (hash ^ v) * 1099511628211ull; }
};

inline BranchTrace*& branch_trace() {
    thread_local BranchTrace* active = nullptr;
    return active;
}

}  // namespace detail

class BranchTraceScope {
public:
    BranchTraceScope() : previous_(detail::branch_trace()) { detail::branch_trace() = &trace_; }
    ~BranchTraceScope() { detail::branch_trace() = previous_; }
    BranchTraceScope(const BranchTraceScope&) = delete;
    BranchTraceScope& operator=(const BranchTraceScope&) = delete;
    std::uint64_t fingerprint() const { return trace_.hash; }

private:
    detail::BranchTrace trace_;
    detail::BranchTrace* previous_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

/// Disables graph recording for the lifetime of the guard (inference paths).
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Row-major N-d array with reverse-mode autodiff. Copies share storage;
/// use detach() or clone() for an independent value.
template <class T>
class BasicTensor {
public:
    using value_type = T;
    using NodeT = detail::Node<T>;
    using NodePtr = std::shared_ptr<NodeT>;

    BasicTensor() = default;

    explicit BasicTensor(Shape shape, T fill = T(0), bool requires_grad = false)
        : node_(std::make_shared<NodeT>()) {
        node_->data.assign(shape_numel(shape), fill);
        node_->shape = std::move(shape);
        node_->requires_grad = requires_grad;
    }

    BasicTensor(Shape shape, std::vector<T> data, bool requires_grad = false)
        : node_(std::make_shared<NodeT>()) {
        if (data.size() != shape_numel(shape)) {
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        }
        node_->shape = std::move(shape);
        node_->data = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static BasicTensor scalar(T v) { return BasicTensor(Shape{}, v); }
    static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape), T(0)); }
    static BasicTensor ones(Shape shape) { return BasicTensor(std::move(shape), T(1)); }
    static BasicTensor full(Shape shape, T v) { return BasicTensor(std::move(shape), v); }

    template <class Rng>
    static BasicTensor randn(Shape shape, Rng& rng, T stddev = T(1)) {
        std::normal_distribution<T> dist(T(0), stddev);
        std::vector<T> data(shape_numel(shape));
        for (auto& v : data) v = dist(rng);
        return BasicTensor(std::move(shape), std::move(data));
    }

    // Used by operation implementations: records `backward` when grad mode is
    // on and any input requires a gradient.
    static BasicTensor from_op(Shape shape, std::vector<T> data, const char* op,
                               std::vector<BasicTensor> inputs,
                               std::function<void(NodeT&)> backward) {
        BasicTensor out(std::move(shape), std::move(data));
        out.node_->op = op;
        if (!grad_enabled()) return out;
        bool any = false;
        for (const auto& in : inputs) any = any || in.requires_grad();
        if (!any) return out;
        out.node_->requires_grad = true;
        out.node_->parents.reserve(inputs.size());
        for (auto& in : inputs) out.node_->parents.push_back(in.node_);
        out.node_->backward_fn = std::move(backward);
        return out;
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t numel() const { return node_->data.size(); }
    const char* op_name() const { return node_->op; }

    std::span<const T> data() const { return node_->data; }
    // In-place writes are for leaves (parameters, buffers); never mutate a
    // value that a recorded graph still depends on.
    std::span<T> mutable_data() { return node_->data; }
    const std::vector<T>& vec() const { return node_->data; }

    bool has_grad() const { return node_->grad.size() == node_->data.size(); }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> mutable_grad() { return node_->ensure_grad(); }
    void zero_grad() { node_->grad.clear(); }

    bool requires_grad() const { return node_ && node_->requires_grad; }
    BasicTensor& set_requires_grad(bool on) {
        node_->requires_grad = on;
        return *this;
    }

    T item() const {
        if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
        return node_->data[0];
    }

    T operator[](std::size_t i) const { return node_->data[i]; }

    BasicTensor detach() const { return BasicTensor(shape(), node_->data); }
    BasicTensor clone() const { return detach(); }

    template <class U>
    BasicTensor<U> cast() const {
        std::vector<U> out(numel());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>(node_->data[i]);
        return BasicTensor<U>(shape(), std::move(out));
    }

    const NodePtr& node() const { return node_; }

    /// Reverse-mode sweep from this scalar. Leaf gradients accumulate across
    /// calls; intermediate gradients are reset on every call.
    void backward() const {
        if (numel() != 1) {
            throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(shape()));
        }
        if (!node_->requires_grad) return;
        std::vector<NodeT*> order = topological_order();
        for (NodeT* n : order) {
            if (!n->is_leaf()) n->grad.assign(n->data.size(), T(0));
        }
        node_->ensure_grad()[0] += T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            NodeT* n = *it;
            if (!n->is_leaf()) n->backward_fn(*n);
        }
    }

private:
    // Post-order DFS; each node appears once, parents before children.
    std::vector<NodeT*> topological_order() const {
        std::vector<NodeT*> order;
        std::unordered_set<NodeT*> visited;
        std::vector<std::pair<NodeT*, std::size_t>> stack;
        stack.emplace_back(node_.get(), 0);
        visited.insert(node_.get());
        while (!stack.empty()) {
            auto& [n, next] = stack.back();
            if (next < n->parents.size()) {
                NodeT* p = n->parents[next++].get();
                if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }
        return order;
    }

    NodePtr node_;
};

using Tensor = BasicTensor<float>;

template <class T>
bool all_finite(std::span<const T> values) {
    for (T v : values) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

template <class T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* what) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

}  // namespace diffmorph
