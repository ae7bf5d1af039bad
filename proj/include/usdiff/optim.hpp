// Copyright 2026 The usdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "usdiff/tensor.hpp"

namespace usdiff {

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    /// Global gradient-norm clip; <= 0 disables.
    double grad_clip = 1.0;

    bool operator==(const AdamWConfig&) const = default;
};

/// Adam with decoupled weight decay over a fixed list of leaf tensors.
class AdamW {
public:
    AdamW(std::vector<Tensor<float>> params, const AdamWConfig& cfg);

    /// Applies one update from the current gradients and returns the
    /// pre-clip global gradient norm.
    double step();
    void zero_grad();
    int64_t steps() const { return t_; }

private:
    std::vector<Tensor<float>> params_;
    AdamWConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    int64_t t_ = 0;
};

} // namespace usdiff
