// Copyright 2026 The usdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>

#include "usdiff/diffusion.hpp"
#include "usdiff/kv.hpp"
#include "usdiff/tasks.hpp"

namespace usdiff {

struct FeedbackConfig {
    double lambda = 1.0;
    int t_prime = 200;
    bool enabled = true;
    /// false: the annotator output is treated as a constant (stop-gradient).
    bool annotator_grad = true;
    /// Draw t from plan steps within [1, t_prime] instead of the full interval.
    bool restrict_to_plan = false;
    /// Items of each training batch that enter the feedback pass.
    int batch = 4;

    /// True when the feedback term contributes to the objective.
    bool active() const { return enabled && lambda != 0.0; }
    void validate(const NoiseSchedule& s) const;

    void write_kv(KeyValues& kv, const std::string& prefix) const;
    static FeedbackConfig read_kv(const KeyValues& kv, const std::string& prefix);
    bool operator==(const FeedbackConfig&) const = default;
};

/// Feedback time step in [1, t_prime], or a plan step inside that range when
/// `restrict_to_plan` is set.
int draw_feedback_t(const FeedbackConfig& cfg, const StepPlan& plan, Rng& rng);

/// mse(annotate(query), clamp(x0')) where x0' is the one-step prediction of
/// the map from a noised target.
template <typename T>
Tensor<T> feedback_loss_image2map(const DenoiseFn<T>& model, std::span<const ContextSample<T>> items,
                                  const NoiseSchedule& s, const FeedbackConfig& cfg, const StepPlan& plan, Rng& rng,
                                  const AnnotatorOptions& opt = {});

/// mse(query, annotate(clamp(x0'))) where x0' is the one-step prediction of
/// the image from a noised target.
template <typename T>
Tensor<T> feedback_loss_map2image(const DenoiseFn<T>& model, std::span<const ContextSample<T>> items,
                                  const NoiseSchedule& s, const FeedbackConfig& cfg, const StepPlan& plan, Rng& rng,
                                  const AnnotatorOptions& opt = {});

/// Dispatches on the direction shared by all items.
template <typename T>
Tensor<T> feedback_loss(const DenoiseFn<T>& model, std::span<const ContextSample<T>> items, const NoiseSchedule& s,
                        const FeedbackConfig& cfg, const StepPlan& plan, Rng& rng, const AnnotatorOptions& opt = {});

/// l_train + lambda * l_feedback; returns l_train itself when feedback is inactive.
template <typename T>
Tensor<T> total_loss(const Tensor<T>& l_train, const Tensor<T>& l_feedback, const FeedbackConfig& cfg);

} // namespace usdiff
