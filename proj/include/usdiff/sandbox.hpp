// Copyright 2026 The usdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "usdiff/schedule.hpp"
#include "usdiff/tensor.hpp"

namespace usdiff {

/// Data distribution N(mu0, sigma0^2) per coordinate.
struct GaussianSpec {
    double mu0 = 0.0;
    double sigma0 = 1.0;
    int dim = 1;

    bool operator==(const GaussianSpec&) const = default;
};

/// Posterior mean E[eps | x_t] for Gaussian data:
/// sqrt(1 - ab) * (x_t - sqrt(ab) * mu0) / (ab * sigma0^2 + 1 - ab).
Tensor<double> analytic_eps(const Tensor<double>& x_t, int t, const GaussianSpec& g, const NoiseSchedule& s);

/// Mean |x_(i) - F^-1((i - 0.5) / n)| against the N(mu0, sigma0^2) quantiles.
double wasserstein_1d(std::span<const double> samples, const GaussianSpec& g);

struct SandboxReport {
    std::string strategy;
    int K = 0;
    double eta = 0.0;
    int n = 0;
    uint64_t seed = 0;
    int denoiser_calls = 0;
    // Per coordinate.
    std::vector<double> mean;
    std::vector<double> var;
    std::vector<double> w1;

    double mean_avg() const;
    double var_avg() const;
    double w1_avg() const;
};

SandboxReport run_sandbox(const StepPlan& plan, const GaussianSpec& g, const NoiseSchedule& s, int n, uint64_t seed,
                          double eta = 0.0);

/// CSV columns: strategy,K,eta,n,mean,var,w1,denoiser_calls,seed
std::string sandbox_csv_header();
std::string sandbox_csv_row(const SandboxReport& r);

} // namespace usdiff
