// Copyright 2026 The usdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "usdiff/kv.hpp"

namespace usdiff {

/// Discrete linear-beta noise schedule. Arrays are indexed by time step;
/// index 0 of beta/alpha/beta_tilde is unused so that index t means step t.
struct NoiseSchedule {
    int T = 0;
    double beta_start = 0.0;
    double beta_end = 0.0;
    std::vector<double> beta;        // [0..T], beta[0] = 0
    std::vector<double> alpha;       // [0..T], alpha[0] = 1
    std::vector<double> alpha_bar;   // [0..T], alpha_bar[0] = 1
    std::vector<double> beta_tilde;  // [0..T], beta_tilde[1] = beta[1]
};

NoiseSchedule build_schedule(int T = 1000, double beta_start = 1e-4, double beta_end = 0.02);

/// alpha_bar[t] for 0 <= t <= T.
double alpha_bar_at(const NoiseSchedule& s, int t);

enum class StepStrategyKind { uniform, power, alpha_quantile };

struct StepStrategy {
    StepStrategyKind kind = StepStrategyKind::power;
    double gamma = 0.5;  // power only

    static StepStrategy uniform() { return {StepStrategyKind::uniform, 1.0}; }
    static StepStrategy power(double gamma) { return {StepStrategyKind::power, gamma}; }
    static StepStrategy alpha_quantile() { return {StepStrategyKind::alpha_quantile, 1.0}; }

    bool operator==(const StepStrategy&) const = default;
};

/// "uniform", "power(0.5)", "alpha_quantile".
std::string to_string(const StepStrategy& s);
StepStrategy parse_strategy(const std::string& text);

/// Strictly increasing K-subset of [1, T] that always ends at T.
struct StepPlan {
    std::vector<int> steps;
    StepStrategy strategy;
    int T = 0;

    int K() const { return static_cast<int>(steps.size()); }
    bool operator==(const StepPlan&) const = default;
};

StepPlan select_steps(const NoiseSchedule& s, int K, const StepStrategy& strategy);

/// Key-value serialization under a prefix (e.g. "schedule." / "plan.").
void write_kv(KeyValues& kv, const std::string& prefix, const NoiseSchedule& s);
NoiseSchedule read_schedule_kv(const KeyValues& kv, const std::string& prefix);
void write_kv(KeyValues& kv, const std::string& prefix, const StepPlan& p);
StepPlan read_plan_kv(const KeyValues& kv, const std::string& prefix);

} // namespace usdiff
