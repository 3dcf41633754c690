#pragma once

// Reverse-mode differentiation over small dense tensors.
//
// A Tensor is a cheap handle to a graph node. Operations in ops.hpp build
// new nodes that remember their parents and a backward closure; backward()
// walks the graph in reverse topological order. Values are stored as 32-bit
// floats, reductions accumulate in double.

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dbs/error.hpp"

namespace dbs {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out << 'x';
        out << shape[i];
    }
    out << ']';
    return out.str();
}

namespace detail {

struct Node {
    Shape shape;
    std::vector<float> values;
    std::vector<float> grad;
    bool requires_grad = false;
    bool is_leaf = true;
    std::string op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this node's grad and accumulates into the parents' grads.
    std::function<void(Node&)> backward;

    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), 0.0f);
    }
};

} // namespace detail

class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<float> values, bool requires_grad = false)
        : node_(std::make_shared<detail::Node>()) {
        for (auto d : shape) {
            if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + shape_string(shape));
        }
        if (shape.empty()) throw ShapeError("tensor: empty shape");
        if (shape_size(shape) != values.size()) {
            throw ShapeError("tensor: " + std::to_string(values.size()) + " values for shape " +
                             shape_string(shape));
        }
        for (float v : values) {
            if (!std::isfinite(v)) throw NumericError("tensor: non-finite value at construction");
        }
        node_->shape = std::move(shape);
        node_->values = std::move(values);
        node_->requires_grad = requires_grad;
        if (requires_grad) node_->ensure_grad();
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto n = shape_size(shape);
        return Tensor(std::move(shape), std::vector<float>(n, 0.0f), requires_grad);
    }

    static Tensor scalar(float v, bool requires_grad = false) { return Tensor({1}, {v}, requires_grad); }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<float> values,
                         bool requires_grad = false) {
        return Tensor({rows, cols}, std::move(values), requires_grad);
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t size() const { return node_->values.size(); }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t rows() const { return rank() == 2 ? node_->shape[0] : 1; }
    std::size_t cols() const { return node_->shape.back(); }

    std::span<const float> values() const { return node_->values; }
    // Mutable access is meant for leaves (optimizer updates, randomization).
    std::span<float> data() { return node_->values; }

    float item() const {
        if (size() != 1) throw ContractError("item: tensor of shape " + shape_string(shape()) + " is not scalar");
        return node_->values[0];
    }
    float at(std::size_t r, std::size_t c) const { return node_->values[r * cols() + c]; }

    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return node_->grad.size() == node_->values.size(); }
    std::span<const float> grad() const {
        if (!has_grad()) throw ContractError("grad: tensor has no gradient");
        return node_->grad;
    }
    void zero_grad() {
        if (node_->requires_grad) node_->grad.assign(node_->values.size(), 0.0f);
    }

    const std::string& op() const { return node_->op; }
    const std::shared_ptr<detail::Node>& node() const { return node_; }

    // Deep copy of the values as a fresh leaf (no history).
    Tensor detach(bool requires_grad = false) const {
        return Tensor(node_->shape, node_->values, requires_grad);
    }

private:
    std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline void require_finite(const std::vector<float>& values, const std::string& op) {
    for (float v : values) {
        if (!std::isfinite(v)) throw NumericError(op + ": non-finite intermediate value (numeric overflow)");
    }
}

// Builds the output node for an operation. `backward` is attached only when
// some parent needs a gradient.
inline Tensor make_result(std::string op, Shape shape, std::vector<float> values,
                          std::vector<Tensor> parents, std::function<void(Node&)> backward) {
    require_finite(values, op);
    Tensor out(std::move(shape), std::move(values), false);
    auto& node = *out.node();
    node.op = std::move(op);
    node.is_leaf = false;
    bool needs = false;
    for (const auto& p : parents) needs = needs || p.requires_grad();
    if (needs) {
        node.requires_grad = true;
        for (const auto& p : parents) node.parents.push_back(p.node());
        node.backward = std::move(backward);
    }
    return out;
}

} // namespace detail

// Computes d(loss)/d(t) for every requires_grad tensor reachable from
// `loss`. Leaf gradients accumulate across calls; use zero_grad() between
// optimization steps.
inline void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1) {
        throw ContractError("backward: loss must be a scalar, got shape " +
                            (loss.defined() ? shape_string(loss.shape()) : std::string("<undefined>")));
    }
    if (!loss.requires_grad()) {
        throw ContractError("backward: loss is not reachable from any requires_grad tensor");
    }

    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack{{loss.node().get(), 0}};
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            auto* parent = node->parents[next++].get();
            if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (auto* node : order) {
        if (!node->is_leaf) node->grad.assign(node->values.size(), 0.0f);
        else node->ensure_grad();
    }
    loss.node()->grad[0] = 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward) (*it)->backward(**it);
    }
}

} // namespace dbs
