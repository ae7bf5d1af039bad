// Copyright 2026 The usdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "usdiff/rng.hpp"

namespace usdiff {

/// Violated precondition: bad shapes, out-of-range arguments, misuse of the graph.
class ContractError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// NaN/Inf produced by a primitive, or a numerically impossible request.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<int64_t>;

int64_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // lazily allocated
    bool requires_grad = false;
    bool leaf = true;
    bool grad_ready = false;  // leaf was written by a backward since the last zero_grad
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    // Reads `self.grad` and accumulates into the parents that require grad.
    std::function<void(Node& self)> backward;

    std::vector<T>& grad_buffer()
    {
        if (grad.empty()) {
            grad.assign(value.size(), T(0));
        }
        return grad;
    }
};

} // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

/// Dense row-major tensor handle. Copies share the underlying node.
///
/// Values are immutable once created; only leaves expose mutable storage, and
/// only for optimizer updates and checkpoint loading.
template <typename T>
class Tensor {
public:
    using value_type = T;
    using NodePtr = std::shared_ptr<detail::Node<T>>;

    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, T v);
    static Tensor scalar(T v);
    static Tensor from(Shape shape, std::vector<T> values);
    static Tensor randn(Shape shape, Rng& rng);
    /// Leaf that participates in backward.
    static Tensor parameter(Shape shape, std::vector<T> values);

    /// Result of a primitive. Validates finiteness; records the graph edge only
    /// when grad mode is on and some parent requires grad.
    static Tensor make_result(Shape shape, std::vector<T> values, const char* op, std::vector<Tensor> parents,
                              std::function<void(detail::Node<T>&)> backward);

    bool defined() const noexcept { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int64_t dim(int i) const;
    int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }
    std::span<const T> data() const { return node_->value; }
    const std::vector<T>& values() const { return node_->value; }
    T item() const;

    bool requires_grad() const { return node_->requires_grad; }
    bool is_leaf() const { return node_->leaf; }
    const char* op_name() const { return node_->op; }

    /// Gradient from the last backward, or zeros when this leaf was not reached.
    std::vector<T> grad() const;
    bool has_grad() const { return node_->grad_ready; }
    void zero_grad();

    /// Mutable storage of a leaf; throws for graph results.
    std::span<T> mutable_data();

    /// New leaf holding a copy of the value, detached from any graph.
    Tensor detach() const;

    /// Same elements, new shape (differentiable).
    Tensor reshape(Shape shape) const;

    template <typename U>
    Tensor<U> cast() const
    {
        std::vector<U> out(node_->value.begin(), node_->value.end());
        return Tensor<U>::from(node_->shape, std::move(out));
    }

    const NodePtr& node() const { return node_; }

private:
    explicit Tensor(NodePtr node) : node_(std::move(node)) {}
    NodePtr node_;
};

/// Reverse sweep from a scalar loss. Each requires-grad leaf reached receives
/// dLoss/dLeaf once; calling again before `zero_grad` on those leaves throws.
/// Returns the number of graph nodes visited.
template <typename T>
size_t backward(const Tensor<T>& loss);

template <typename T>
void zero_grad(std::span<Tensor<T>> tensors)
{
    for (auto& t : tensors) {
        t.zero_grad();
    }
}

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template size_t backward(const Tensor<float>&);
extern template size_t backward(const Tensor<double>&);

} // namespace usdiff
