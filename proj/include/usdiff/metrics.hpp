// Copyright 2026 The usdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "usdiff/tasks.hpp"
#include "usdiff/tensor.hpp"

namespace usdiff {

/// sqrt(mean((a - b)^2)) after rescaling both from [-1,1] to [0,1].
double rmse(const Tensor<float>& pred, const Tensor<float>& gt);
double rmse(const Tensor<double>& pred, const Tensor<double>& gt);

/// Frozen random-projection features: flatten -> 128 -> SiLU -> 64.
/// Weights depend only on (feature_seed, input size).
class FeatureExtractor {
public:
    static constexpr int kHidden = 128;
    static constexpr int kOut = 64;

    FeatureExtractor(uint64_t feature_seed, int64_t input_size);

    /// images: [n, ...] with input_size elements per item -> n x kOut, row-major.
    std::vector<double> features(const Tensor<float>& images) const;
    int64_t input_size() const { return input_size_; }

private:
    int64_t input_size_;
    std::vector<double> w1_, w2_;  // [kHidden, input_size], [kOut, kHidden]
};

/// Frechet distance between Gaussians fitted to two feature sets (rows of
/// length `dim`); covariances use the n - 1 denominator.
double frechet_from_features(const std::vector<double>& a, const std::vector<double>& b, int dim);

/// Frechet distance of the extractor features of two image sets; n, m >= 50.
double frechet_proxy(const Tensor<float>& set_a, const Tensor<float>& set_b, uint64_t feature_seed);

struct EvalReport {
    std::string checkpoint;
    TaskKind task;
    int n = 0;
    uint64_t seed = 0;
    std::optional<double> rmse;
    std::optional<double> fd;
    std::string plan_strategy;
    int K = 0;
    int denoiser_calls = 0;  // per image

    std::string metric() const { return rmse ? "rmse" : "fd"; }
    double value() const { return rmse ? *rmse : *fd; }
};

/// results.csv columns: checkpoint,task,direction,metric,value,n,seed,plan_strategy,K
std::string results_csv_header();
std::string results_csv_row(const EvalReport& r);

} // namespace usdiff
