#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "vitstem/error.hpp"

namespace vitstem {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& shape) {
    std::int64_t n = 1;
    for (std::int64_t e : shape) {
        n *= e;
    }
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << shape[i] << (i + 1 < shape.size() ? "," : "");
    }
    os << ')';
    return os.str();
}

// Thread-local taping switch. Evaluation paths run inside NoGradGuard and
// build no graph.
struct GradMode {
    static bool& flag() {
        thread_local bool on = true;
        return on;
    }
    static bool enabled() { return flag(); }
    static void set(bool on) { flag() = on; }
};

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(GradMode::enabled()) { GradMode::set(false); }
    ~NoGradGuard() { GradMode::set(prev); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

namespace detail {

template <class T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // allocated on first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;

    std::int64_t size() const { return static_cast<std::int64_t>(value.size()); }

    std::vector<T>& ensure_grad() {
        if (grad.size() != value.size()) {
            grad.assign(value.size(), T(0));
        }
        return grad;
    }
};

}  // namespace detail

// Define-by-run tensor: a shared handle to one tape node. The graph lives in
// the parent links and is released by backward().
template <class T>
class TensorT {
public:
    using Node = detail::Node<T>;

    TensorT() = default;
    explicit TensorT(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static TensorT zeros(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), T(0), requires_grad);
    }

    static TensorT filled(Shape shape, T v, bool requires_grad = false) {
        auto node = std::make_shared<Node>();
        const std::int64_t n = numel(shape);
        check_extents(shape);
        node->shape = std::move(shape);
        node->value.assign(static_cast<std::size_t>(n), v);
        node->requires_grad = requires_grad;
        return TensorT(std::move(node));
    }

    static TensorT from(Shape shape, std::vector<T> values, bool requires_grad = false) {
        check_extents(shape);
        if (numel(shape) != static_cast<std::int64_t>(values.size())) {
            throw ShapeError("tensor data size " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
        }
        auto node = std::make_shared<Node>();
        node->shape = std::move(shape);
        node->value = std::move(values);
        node->requires_grad = requires_grad;
        return TensorT(std::move(node));
    }

    static TensorT scalar(T v, bool requires_grad = false) {
        return from({}, std::vector<T>{v}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t ndim() const { return node_->shape.size(); }
    std::int64_t size() const { return node_->size(); }

    std::int64_t dim(int i) const {
        const int nd = static_cast<int>(node_->shape.size());
        if (i < 0) {
            i += nd;
        }
        if (i < 0 || i >= nd) {
            throw ShapeError("dim index out of range for shape " + shape_str(node_->shape));
        }
        return node_->shape[static_cast<std::size_t>(i)];
    }

    std::vector<T>& data() { return node_->value; }
    const std::vector<T>& data() const { return node_->value; }

    T item() const {
        if (size() != 1) {
            throw ShapeError("item() requires a single-element tensor, got " + shape_str(shape()));
        }
        return node_->value[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }

    bool has_grad() const { return node_ && node_->grad.size() == node_->value.size(); }

    std::vector<T>& grad() {
        if (!has_grad()) {
            throw Error("gradient not populated; call backward() first");
        }
        return node_->grad;
    }
    const std::vector<T>& grad() const { return const_cast<TensorT*>(this)->grad(); }

    void zero_grad() {
        if (node_ && node_->requires_grad) {
            node_->ensure_grad();
            std::fill(node_->grad.begin(), node_->grad.end(), T(0));
        }
    }

    // Reverse-mode accumulation from this scalar. Populates grad for every
    // reachable tensor with requires_grad, then releases the graph so the
    // tape can be rebuilt on the next step.
    void backward() {
        if (size() != 1) {
            throw ShapeError("backward() requires a scalar output, got " + shape_str(shape()));
        }
        std::vector<Node*> order = topo_order();
        node_->ensure_grad();
        node_->grad[0] += T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node* n = *it;
            if (n->backprop && n->grad.size() == n->value.size()) {
                n->backprop(*n);
            }
        }
        for (Node* n : order) {
            n->parents.clear();
            n->backprop = nullptr;
        }
    }

    std::shared_ptr<Node> node() const { return node_; }

private:
    static void check_extents(const Shape& shape) {
        for (std::int64_t e : shape) {
            if (e <= 0) {
                throw ShapeError("non-positive extent in shape " + shape_str(shape));
            }
        }
    }

    std::vector<Node*> topo_order() const {
        std::vector<Node*> order;
        std::unordered_set<Node*> seen;
        // Iterative post-order DFS over parent links.
        std::vector<std::pair<Node*, std::size_t>> stack;
        stack.emplace_back(node_.get(), 0);
        seen.insert(node_.get());
        while (!stack.empty()) {
            auto& [n, next] = stack.back();
            if (next < n->parents.size()) {
                Node* p = n->parents[next++].get();
                if (seen.insert(p).second) {
                    stack.emplace_back(p, 0);
                }
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }
        return order;
    }

    std::shared_ptr<Node> node_;
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

}  // namespace vitstem
