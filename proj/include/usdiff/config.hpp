// Copyright 2026 The usdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "usdiff/diffusion.hpp"
#include "usdiff/fal.hpp"
#include "usdiff/kv.hpp"
#include "usdiff/model.hpp"
#include "usdiff/optim.hpp"
#include "usdiff/sandbox.hpp"
#include "usdiff/schedule.hpp"

namespace usdiff {

/// Every knob of a run as one flat key=value document.
struct RunConfig {
    std::string preset = "desk";
    uint64_t seed = 0;
    std::string out = "out";

    int T = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;

    StepStrategy plan_strategy = StepStrategy::power(0.5);
    int plan_K = 10;

    ModelConfig model;
    FeedbackConfig fal;

    int train_steps = 2000;
    int train_batch = 8;
    std::string optimizer = "adamw";
    AdamWConfig adamw{1e-3, 0.9, 0.999, 1e-8, 0.01, 1.0};
    TimestepSampling train_timesteps = TimestepSampling::plan;
    int checkpoint_every = 500;

    double sample_eta = 0.0;
    /// Images per denoiser call when sampling or evaluating.
    int sample_chunk = 25;

    int eval_n = 100;
    uint64_t eval_feature_seed = 7;

    int sandbox_n = 100000;
    GaussianSpec sandbox_gaussian;
    double sandbox_eta = 0.0;

    /// 0 means train.steps.
    int ablate_steps = 0;
    int ablate_eval_n = 100;
    std::vector<double> ablate_lambdas{0.0, 0.1, 1.0, 10.0, 100.0};

    int gen_n = 16;
    Split gen_split = Split::train;

    /// "desk" (32x32, 2000 steps) or "micro" (8x8, 50 steps).
    static RunConfig defaults(const std::string& preset);

    NoiseSchedule schedule() const { return build_schedule(T, beta_start, beta_end); }
    StepPlan plan() const;
    void validate() const;

    KeyValues to_kv() const;
    /// Strict: every key must be present and known.
    static RunConfig from_kv(const KeyValues& kv);
    bool operator==(const RunConfig&) const = default;
};

/// Preset defaults, then `file` keys, then `overrides`. The preset is taken
/// from the overrides, else the file, else "desk". Unknown keys throw.
RunConfig resolve_config(const KeyValues& file, const KeyValues& overrides = {});

/// Parses "key=value" into (key, value).
std::pair<std::string, std::string> parse_override(const std::string& text);

std::string to_string(Split s);
Split parse_split(const std::string& s);

} // namespace usdiff
