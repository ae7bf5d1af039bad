// Copyright 2026 The usdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "usdiff/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace usdiff {

namespace {
thread_local bool g_grad_enabled = true;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

int64_t numel(const Shape& shape)
{
    int64_t n = 1;
    for (int64_t e : shape) {
        if (e <= 0) {
            throw ContractError("shape extents must be positive: " + to_string(shape));
        }
        n *= e;
    }
    return n;
}

std::string to_string(const Shape& shape)
{
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "," : "") << shape[i];
    }
    os << ']';
    return os.str();
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape)
{
    return full(std::move(shape), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T v)
{
    const int64_t n = usdiff::numel(shape);
    return from(std::move(shape), std::vector<T>(static_cast<size_t>(n), v));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T v)
{
    return from({}, {v});
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values)
{
    if (usdiff::numel(shape) != static_cast<int64_t>(values.size())) {
        throw ContractError("element count " + std::to_string(values.size()) + " does not match shape " +
                            to_string(shape));
    }
    auto node = std::make_shared<detail::Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::randn(Shape shape, Rng& rng)
{
    std::vector<T> v(static_cast<size_t>(usdiff::numel(shape)));
    for (auto& x : v) {
        x = static_cast<T>(rng.normal());
    }
    return from(std::move(shape), std::move(v));
}

template <typename T>
Tensor<T> Tensor<T>::parameter(Shape shape, std::vector<T> values)
{
    Tensor t = from(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
}

template <typename T>
Tensor<T> Tensor<T>::make_result(Shape shape, std::vector<T> values, const char* op, std::vector<Tensor> parents,
                                 std::function<void(detail::Node<T>&)> backward)
{
    for (const T& v : values) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string("non-finite value produced by ") + op);
        }
    }
    Tensor out = from(std::move(shape), std::move(values));
    out.node_->op = op;
    out.node_->leaf = false;
    if (!g_grad_enabled) {
        return out;
    }
    bool any = false;
    for (const auto& p : parents) {
        any = any || p.requires_grad();
    }
    if (any) {
        out.node_->requires_grad = true;
        out.node_->parents.reserve(parents.size());
        for (auto& p : parents) {
            out.node_->parents.push_back(p.node_);
        }
        out.node_->backward = std::move(backward);
    }
    return out;
}

template <typename T>
int64_t Tensor<T>::dim(int i) const
{
    const int r = rank();
    if (i < 0) {
        i += r;
    }
    if (i < 0 || i >= r) {
        throw ContractError("dimension index out of range for shape " + to_string(shape()));
    }
    return node_->shape[static_cast<size_t>(i)];
}

template <typename T>
T Tensor<T>::item() const
{
    if (numel() != 1) {
        throw ContractError("item() on non-scalar tensor of shape " + to_string(shape()));
    }
    return node_->value[0];
}

template <typename T>
std::vector<T> Tensor<T>::grad() const
{
    if (node_->grad_ready && !node_->grad.empty()) {
        return node_->grad;
    }
    return std::vector<T>(node_->value.size(), T(0));
}

template <typename T>
void Tensor<T>::zero_grad()
{
    node_->grad.clear();
    node_->grad_ready = false;
}

template <typename T>
std::span<T> Tensor<T>::mutable_data()
{
    if (!node_->leaf) {
        throw ContractError("mutable_data() is only available on leaf tensors");
    }
    return node_->value;
}

template <typename T>
Tensor<T> Tensor<T>::detach() const
{
    return from(node_->shape, node_->value);
}

template <typename T>
Tensor<T> Tensor<T>::reshape(Shape shape) const
{
    if (usdiff::numel(shape) != numel()) {
        throw ContractError("reshape from " + to_string(this->shape()) + " to " + to_string(shape));
    }
    return make_result(std::move(shape), node_->value, "reshape", {*this}, [](detail::Node<T>& self) {
        auto& parent = *self.parents[0];
        auto& g = parent.grad_buffer();
        for (size_t i = 0; i < g.size(); ++i) {
            g[i] += self.grad[i];
        }
    });
}

template <typename T>
size_t backward(const Tensor<T>& loss)
{
    if (!loss.defined() || loss.numel() != 1) {
        throw ContractError("backward requires a scalar loss");
    }
    using NodeT = detail::Node<T>;
    if (!loss.requires_grad()) {
        return 0;
    }

    // Iterative post-order DFS gives a topological order (parents before children).
    std::vector<NodeT*> order;
    std::unordered_set<NodeT*> visited;
    std::vector<std::pair<NodeT*, size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            NodeT* parent = node->parents[next++].get();
            if (parent->requires_grad && visited.insert(parent).second) {
                stack.emplace_back(parent, 0);
            }
            continue;
        }
        order.push_back(node);
        stack.pop_back();
    }

    for (NodeT* node : order) {
        if (node->leaf && node->grad_ready) {
            throw ContractError("backward called again before zero_grad on a leaf");
        }
    }

    NodeT* root = loss.node().get();
    root->grad_buffer()[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        NodeT* node = *it;
        if (node->leaf) {
            node->grad_buffer();
            node->grad_ready = true;
            continue;
        }
        if (node->backward) {
            node->grad_buffer();
            node->backward(*node);
        }
        // Intermediate gradients are not retained.
        std::vector<T>().swap(node->grad);
    }
    return order.size();
}

template class Tensor<float>;
template class Tensor<double>;
template size_t backward(const Tensor<float>&);
template size_t backward(const Tensor<double>&);

} // namespace usdiff
