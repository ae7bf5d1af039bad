// Copyright 2026 The usdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <span>
#include <vector>

#include "usdiff/rng.hpp"
#include "usdiff/schedule.hpp"
#include "usdiff/tasks.hpp"
#include "usdiff/tensor.hpp"

namespace usdiff {

/// Conditional noise predictor: (x_t [N,...], per-sample t, per-sample context) -> eps_hat.
template <typename T>
using DenoiseFn =
    std::function<Tensor<T>(const Tensor<T>& x_t, std::span<const int> t, std::span<const ContextSample<T>> context)>;

/// Unconditional form used by the samplers: (x_t, t) -> eps_hat.
template <typename T>
using EpsFn = std::function<Tensor<T>(const Tensor<T>& x_t, int t)>;

/// sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps.
template <typename T>
Tensor<T> forward_sample(const Tensor<T>& x0, int t, const Tensor<T>& eps, const NoiseSchedule& s);

/// Per-sample time steps along the leading dimension.
template <typename T>
Tensor<T> forward_sample(const Tensor<T>& x0, std::span<const int> t, const Tensor<T>& eps, const NoiseSchedule& s);

/// (x_t - sqrt(1 - alpha_bar[t]) * eps_hat) / sqrt(alpha_bar[t]); differentiable.
template <typename T>
Tensor<T> predict_x0(const Tensor<T>& x_t, const Tensor<T>& eps_hat, int t, const NoiseSchedule& s);

template <typename T>
Tensor<T> predict_x0(const Tensor<T>& x_t, const Tensor<T>& eps_hat, std::span<const int> t, const NoiseSchedule& s);

/// DDIM update from t_from to t_to < t_from. eta = 0 is deterministic and
/// ignores `rng`; t_to = 0 returns the x0 estimate.
template <typename T>
Tensor<T> ddim_step(const Tensor<T>& x_t, const Tensor<T>& eps_hat, int t_from, int t_to, const NoiseSchedule& s,
                    double eta = 0.0, Rng* rng = nullptr);

/// DDPM ancestral update x_t -> x_{t-1}; no noise is added at t = 1.
template <typename T>
Tensor<T> ancestral_step(const Tensor<T>& x_t, const Tensor<T>& eps_hat, int t, const NoiseSchedule& s, Rng& rng);

template <typename T>
struct SampleResult {
    Tensor<T> x0;
    int denoiser_calls = 0;
};

/// Plan-driven DDIM sampling from standard normal noise of `shape`. Calls the
/// denoiser exactly once per plan step, highest step first.
template <typename T>
SampleResult<T> sample(const EpsFn<T>& eps_fn, const StepPlan& plan, const Shape& shape, const NoiseSchedule& s,
                       Rng& rng, double eta = 0.0);

/// Same as `sample` but starting from a given x_T.
template <typename T>
SampleResult<T> sample_from(const EpsFn<T>& eps_fn, const StepPlan& plan, Tensor<T> x_T, const NoiseSchedule& s,
                            Rng& rng, double eta = 0.0);

/// Full-length ancestral (DDPM) sampling over t = T..1.
template <typename T>
SampleResult<T> sample_ancestral(const EpsFn<T>& eps_fn, const Shape& shape, const NoiseSchedule& s, Rng& rng);

enum class TimestepSampling { plan, full };

struct TrainingLossOptions {
    TimestepSampling timesteps = TimestepSampling::plan;
};

/// Mean over the batch of mse(eps, eps_theta(x_t, t, context)), with t drawn
/// uniformly from the plan steps (or from [1, T] when timesteps = full).
template <typename T>
Tensor<T> training_loss(const DenoiseFn<T>& model, std::span<const ContextSample<T>> batch, const NoiseSchedule& s,
                        const StepPlan& plan, Rng& rng, const TrainingLossOptions& opt = {});

} // namespace usdiff
