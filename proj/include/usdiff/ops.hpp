// Copyright 2026 The usdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <vector>

#include "usdiff/tensor.hpp"

// Differentiable primitives. Shapes must match exactly except for the two
// documented broadcasts: scalar-times-tensor and per-channel bias.
namespace usdiff {

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
/// s * a
template <typename T> Tensor<T> scale(const Tensor<T>& a, T s);
/// s * a + c
template <typename T> Tensor<T> affine(const Tensor<T>& a, T s, T c);

template <typename T> Tensor<T> silu(const Tensor<T>& a);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& a);
template <typename T> Tensor<T> tanh(const Tensor<T>& a);
template <typename T> Tensor<T> square(const Tensor<T>& a);
/// sqrt(a + eps), eps > 0 keeps the derivative bounded at zero.
template <typename T> Tensor<T> sqrt_eps(const Tensor<T>& a, T eps);
/// Hard clamp; the derivative is 1 strictly inside [lo, hi] and 0 outside.
template <typename T> Tensor<T> clamp(const Tensor<T>& a, T lo, T hi);

/// x: [N,C,H,W], gamma/beta: [C]. Statistics per (sample, group).
template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, int groups, T eps = T(1e-5));

/// Concatenate [N,C_i,H,W] tensors along channels.
template <typename T> Tensor<T> concat_channels(std::span<const Tensor<T>> parts);
/// Concatenate tensors along the leading (batch) dimension.
template <typename T> Tensor<T> concat_batch(std::span<const Tensor<T>> parts);
/// Rows [begin, begin + count) of the leading dimension.
template <typename T> Tensor<T> slice_batch(const Tensor<T>& x, int64_t begin, int64_t count);

template <typename T> Tensor<T> upsample2x(const Tensor<T>& x);
template <typename T> Tensor<T> avgpool2x(const Tensor<T>& x);
/// Edge-replicating spatial padding of an [N,C,H,W] tensor.
template <typename T> Tensor<T> pad_replicate(const Tensor<T>& x, int pad);

/// x: [N,in], weight: [out,in], bias: [out] (may be undefined).
template <typename T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);
/// x: [N,C,H,W] plus bias [N,C] broadcast over space.
template <typename T> Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& bias);
/// Multiply sample n of x by the constant coeffs[n].
template <typename T> Tensor<T> mul_per_sample(const Tensor<T>& x, std::span<const T> coeffs);
/// Rows of table [K,D] selected by ids (0-based) -> [N,D].
template <typename T> Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids);

/// Cross-correlation with zero padding. bias may be undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, int stride, int pad);

template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);
/// Mean over all elements of (a - b)^2.
template <typename T> Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b);

/// Number of groups used by the model's normalization layers.
inline int default_groups(int64_t channels) { return channels < 4 ? static_cast<int>(channels) : 4; }

} // namespace usdiff
