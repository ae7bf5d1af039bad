// Copyright 2026 The usdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "usdiff/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "usdiff/tensor.hpp"

namespace usdiff {

NoiseSchedule build_schedule(int T, double beta_start, double beta_end)
{
    if (T < 1) {
        throw ContractError("build_schedule: T must be >= 1");
    }
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
        throw ContractError("build_schedule: need 0 < beta_start <= beta_end < 1");
    }
    NoiseSchedule s;
    s.T = T;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    s.beta.assign(T + 1, 0.0);
    s.alpha.assign(T + 1, 1.0);
    s.alpha_bar.assign(T + 1, 1.0);
    s.beta_tilde.assign(T + 1, 0.0);
    for (int i = 1; i <= T; ++i) {
        const double frac = T == 1 ? 0.0 : static_cast<double>(i - 1) / static_cast<double>(T - 1);
        s.beta[i] = beta_start + (beta_end - beta_start) * frac;
        s.alpha[i] = 1.0 - s.beta[i];
        s.alpha_bar[i] = s.alpha_bar[i - 1] * s.alpha[i];
    }
    s.beta_tilde[1] = s.beta[1];
    for (int i = 2; i <= T; ++i) {
        s.beta_tilde[i] = (1.0 - s.alpha_bar[i - 1]) / (1.0 - s.alpha_bar[i]) * s.beta[i];
    }
    if (!(s.alpha_bar[T] > 0.0)) {
        throw NumericError("build_schedule: alpha_bar underflows to zero");
    }
    return s;
}

double alpha_bar_at(const NoiseSchedule& s, int t)
{
    if (t < 0 || t > s.T) {
        throw ContractError("alpha_bar_at: t=" + std::to_string(t) + " outside [0, " + std::to_string(s.T) + "]");
    }
    return s.alpha_bar[t];
}

std::string to_string(const StepStrategy& s)
{
    switch (s.kind) {
    case StepStrategyKind::uniform:
        return "uniform";
    case StepStrategyKind::alpha_quantile:
        return "alpha_quantile";
    case StepStrategyKind::power:
        return "power(" + format_double(s.gamma) + ")";
    }
    return "?";
}

StepStrategy parse_strategy(const std::string& text)
{
    if (text == "uniform") {
        return StepStrategy::uniform();
    }
    if (text == "alpha_quantile") {
        return StepStrategy::alpha_quantile();
    }
    if (text.starts_with("power(") && text.ends_with(")")) {
        return StepStrategy::power(parse_double("strategy", text.substr(6, text.size() - 7)));
    }
    throw ConfigError("unknown step strategy '" + text + "'");
}

namespace {

// Integer pool-adjacent-violators: turns `gaps` into a non-increasing sequence
// with the same sum. Within a pooled block the remainder goes to the earliest
// entries so the block itself stays non-increasing.
std::vector<int> pool_non_increasing(const std::vector<int>& gaps)
{
    struct Block {
        int64_t sum;
        int64_t count;
        int64_t first() const { return sum / count + (sum % count ? 1 : 0); }
        int64_t last() const { return sum / count; }
    };
    std::vector<Block> blocks;
    for (int g : gaps) {
        blocks.push_back({g, 1});
        while (blocks.size() >= 2 && blocks[blocks.size() - 2].last() < blocks.back().first()) {
            const Block b = blocks.back();
            blocks.pop_back();
            blocks.back().sum += b.sum;
            blocks.back().count += b.count;
        }
    }
    std::vector<int> out;
    for (const auto& b : blocks) {
        const int64_t q = b.sum / b.count, r = b.sum % b.count;
        for (int64_t i = 0; i < b.count; ++i) {
            out.push_back(static_cast<int>(q + (i < r ? 1 : 0)));
        }
    }
    return out;
}

// Upward dedupe; if that runs past T, pull entries back down from T.
void dedupe(std::vector<int>& steps, int T)
{
    for (size_t j = 1; j < steps.size(); ++j) {
        steps[j] = std::max(steps[j], steps[j - 1] + 1);
    }
    steps.back() = T;
    for (size_t j = steps.size() - 1; j-- > 0;) {
        steps[j] = std::min(steps[j], steps[j + 1] - 1);
    }
    if (steps.front() < 1) {
        throw ContractError("select_steps: cannot place distinct steps in [1, T]");
    }
}

} // namespace

StepPlan select_steps(const NoiseSchedule& s, int K, const StepStrategy& strategy)
{
    const int T = s.T;
    if (K < 1 || K > T) {
        throw ContractError("select_steps: K=" + std::to_string(K) + " outside [1, " + std::to_string(T) + "]");
    }
    std::vector<int> steps(K);
    switch (strategy.kind) {
    case StepStrategyKind::uniform:
        for (int j = 1; j <= K; ++j) {
            steps[j - 1] = static_cast<int>(std::lround(static_cast<double>(j) * T / K));
        }
        break;
    case StepStrategyKind::power:
        if (!(strategy.gamma > 0.0)) {
            throw ContractError("select_steps: power gamma must be > 0");
        }
        for (int j = 1; j <= K; ++j) {
            steps[j - 1] = static_cast<int>(std::lround(T * std::pow(static_cast<double>(j) / K, strategy.gamma)));
        }
        break;
    case StepStrategyKind::alpha_quantile: {
        // Targets split the alpha_bar^2 range over [1, T] into K equal parts.
        const double hi = s.alpha_bar[1] * s.alpha_bar[1];
        const double lo = s.alpha_bar[T] * s.alpha_bar[T];
        int t = 1;
        for (int j = 1; j <= K; ++j) {
            const double target = hi - (hi - lo) * static_cast<double>(j) / K;
            // alpha_bar^2 is decreasing: advance while the next step is closer.
            while (t < T && std::abs(s.alpha_bar[t + 1] * s.alpha_bar[t + 1] - target) <=
                                std::abs(s.alpha_bar[t] * s.alpha_bar[t] - target)) {
                ++t;
            }
            steps[j - 1] = t;
        }
        break;
    }
    }
    for (auto& v : steps) {
        v = std::clamp(v, 1, T);
    }
    dedupe(steps, T);

    if (strategy.kind == StepStrategyKind::power && strategy.gamma < 1.0 && K >= 3) {
        std::vector<int> gaps(K - 1);
        bool violated = false;
        for (int j = 0; j + 1 < K; ++j) {
            gaps[j] = steps[j + 1] - steps[j];
            violated = violated || (j > 0 && gaps[j] > gaps[j - 1]);
        }
        if (violated) {
            gaps = pool_non_increasing(gaps);
            for (int j = 0; j + 1 < K; ++j) {
                steps[j + 1] = steps[j] + gaps[j];
            }
        }
    }
    return StepPlan{std::move(steps), strategy, T};
}

void write_kv(KeyValues& kv, const std::string& prefix, const NoiseSchedule& s)
{
    kv[prefix + "T"] = std::to_string(s.T);
    kv[prefix + "beta_start"] = format_double(s.beta_start);
    kv[prefix + "beta_end"] = format_double(s.beta_end);
}

NoiseSchedule read_schedule_kv(const KeyValues& kv, const std::string& prefix)
{
    auto get = [&](const std::string& k) -> const std::string& {
        auto it = kv.find(prefix + k);
        if (it == kv.end()) {
            throw ConfigError("missing key '" + prefix + k + "'");
        }
        return it->second;
    };
    return build_schedule(static_cast<int>(parse_int(prefix + "T", get("T"))),
                          parse_double(prefix + "beta_start", get("beta_start")),
                          parse_double(prefix + "beta_end", get("beta_end")));
}

void write_kv(KeyValues& kv, const std::string& prefix, const StepPlan& p)
{
    std::vector<std::string> items;
    for (int t : p.steps) {
        items.push_back(std::to_string(t));
    }
    kv[prefix + "strategy"] = to_string(p.strategy);
    kv[prefix + "K"] = std::to_string(p.K());
    kv[prefix + "T"] = std::to_string(p.T);
    kv[prefix + "steps"] = join_list(items);
}

StepPlan read_plan_kv(const KeyValues& kv, const std::string& prefix)
{
    auto get = [&](const std::string& k) -> const std::string& {
        auto it = kv.find(prefix + k);
        if (it == kv.end()) {
            throw ConfigError("missing key '" + prefix + k + "'");
        }
        return it->second;
    };
    StepPlan p;
    p.strategy = parse_strategy(get("strategy"));
    p.T = static_cast<int>(parse_int(prefix + "T", get("T")));
    for (const auto& item : split_list(get("steps"))) {
        p.steps.push_back(static_cast<int>(parse_int(prefix + "steps", item)));
    }
    if (p.K() != parse_int(prefix + "K", get("K"))) {
        throw ConfigError("plan K does not match the number of steps");
    }
    for (int j = 0; j < p.K(); ++j) {
        if (p.steps[j] < 1 || p.steps[j] > p.T || (j > 0 && p.steps[j] <= p.steps[j - 1])) {
            throw ConfigError("plan steps must be strictly increasing within [1, T]");
        }
    }
    if (p.steps.empty() || p.steps.back() != p.T) {
        throw ConfigError("plan must end at T");
    }
    return p;
}

} // namespace usdiff
