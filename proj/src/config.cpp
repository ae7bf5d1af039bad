// Copyright 2026 The usdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "usdiff/config.hpp"

#include <set>

namespace usdiff {

namespace {

class Reader {
public:
    explicit Reader(const KeyValues& kv) : kv_(kv) {}

    const std::string& str(const std::string& key)
    {
        const auto it = kv_.find(key);
        if (it == kv_.end()) {
            throw ConfigError("missing key: " + key);
        }
        used_.insert(key);
        return it->second;
    }
    double dbl(const std::string& key) { return parse_double(key, str(key)); }
    int i32(const std::string& key) { return static_cast<int>(parse_int(key, str(key))); }
    uint64_t u64(const std::string& key) { return parse_u64(key, str(key)); }
    bool boolean(const std::string& key) { return parse_bool(key, str(key)); }

    void finish() const
    {
        for (const auto& [k, v] : kv_) {
            if (!used_.contains(k)) {
                throw ConfigError("unknown key: " + k);
            }
        }
    }

private:
    const KeyValues& kv_;
    std::set<std::string> used_;
};

} // namespace

std::string to_string(Split s) { return s == Split::train ? "train" : "eval"; }

Split parse_split(const std::string& s)
{
    if (s == "train") {
        return Split::train;
    }
    if (s == "eval") {
        return Split::eval;
    }
    throw ConfigError("unknown split '" + s + "'");
}

RunConfig RunConfig::defaults(const std::string& preset)
{
    RunConfig c;
    c.preset = preset;
    if (preset == "desk") {
        return c;
    }
    if (preset == "micro") {
        c.model = ModelConfig::micro();
        c.train_steps = 50;
        c.train_batch = 4;
        c.fal.batch = 2;
        c.checkpoint_every = 25;
        c.eval_n = 50;
        c.ablate_eval_n = 50;
        c.sandbox_n = 10000;
        return c;
    }
    throw ConfigError("unknown preset '" + preset + "' (expected desk or micro)");
}

StepPlan RunConfig::plan() const { return select_steps(schedule(), plan_K, plan_strategy); }

void RunConfig::validate() const
{
    try {
        model.validate();
        const NoiseSchedule s = schedule();
        fal.validate(s);
        (void)plan();
    } catch (const ContractError& e) {
        throw ConfigError(e.what());
    }
    if (optimizer != "adamw") {
        throw ConfigError("train.optimizer: only adamw is supported");
    }
    if (train_steps < 0 || train_batch < 1 || checkpoint_every < 0) {
        throw ConfigError("train: steps >= 0, batch >= 1, checkpoint_every >= 0 required");
    }
    if (!(adamw.lr > 0.0) || !(adamw.beta1 >= 0.0 && adamw.beta1 < 1.0) || !(adamw.beta2 >= 0.0 && adamw.beta2 < 1.0) ||
        !(adamw.eps > 0.0) || !(adamw.weight_decay >= 0.0)) {
        throw ConfigError("train: invalid optimizer hyper-parameters");
    }
    if (sample_chunk < 1 || !(sample_eta >= 0.0)) {
        throw ConfigError("sample: chunk >= 1 and eta >= 0 required");
    }
    if (eval_n < 1 || ablate_eval_n < 1) {
        throw ConfigError("eval.n and ablate.eval_n must be positive");
    }
    if (sandbox_n < 2 || !(sandbox_gaussian.sigma0 > 0.0) || sandbox_gaussian.dim < 1) {
        throw ConfigError("sandbox: n >= 2, sigma0 > 0, dim >= 1 required");
    }
    if (ablate_steps < 0) {
        throw ConfigError("ablate.steps must be >= 0");
    }
    for (double l : ablate_lambdas) {
        if (!(l >= 0.0)) {
            throw ConfigError("ablate.lambdas must be >= 0");
        }
    }
    if (gen_n < 1) {
        throw ConfigError("gen.n must be positive");
    }
}

KeyValues RunConfig::to_kv() const
{
    KeyValues kv;
    kv["preset"] = preset;
    kv["seed"] = std::to_string(seed);
    kv["out"] = out;
    kv["schedule.T"] = std::to_string(T);
    kv["schedule.beta_start"] = format_double(beta_start);
    kv["schedule.beta_end"] = format_double(beta_end);
    kv["plan.strategy"] = to_string(plan_strategy);
    kv["plan.K"] = std::to_string(plan_K);
    model.write_kv(kv, "model.");
    fal.write_kv(kv, "fal.");
    kv["train.steps"] = std::to_string(train_steps);
    kv["train.batch"] = std::to_string(train_batch);
    kv["train.optimizer"] = optimizer;
    kv["train.lr"] = format_double(adamw.lr);
    kv["train.beta1"] = format_double(adamw.beta1);
    kv["train.beta2"] = format_double(adamw.beta2);
    kv["train.eps"] = format_double(adamw.eps);
    kv["train.weight_decay"] = format_double(adamw.weight_decay);
    kv["train.grad_clip"] = format_double(adamw.grad_clip);
    kv["train.timesteps"] = train_timesteps == TimestepSampling::plan ? "plan" : "full";
    kv["train.checkpoint_every"] = std::to_string(checkpoint_every);
    kv["sample.eta"] = format_double(sample_eta);
    kv["sample.chunk"] = std::to_string(sample_chunk);
    kv["eval.n"] = std::to_string(eval_n);
    kv["eval.feature_seed"] = std::to_string(eval_feature_seed);
    kv["sandbox.n"] = std::to_string(sandbox_n);
    kv["sandbox.mu0"] = format_double(sandbox_gaussian.mu0);
    kv["sandbox.sigma0"] = format_double(sandbox_gaussian.sigma0);
    kv["sandbox.dim"] = std::to_string(sandbox_gaussian.dim);
    kv["sandbox.eta"] = format_double(sandbox_eta);
    kv["ablate.steps"] = std::to_string(ablate_steps);
    kv["ablate.eval_n"] = std::to_string(ablate_eval_n);
    std::vector<std::string> lambdas;
    for (double l : ablate_lambdas) {
        lambdas.push_back(format_double(l));
    }
    kv["ablate.lambdas"] = join_list(lambdas);
    kv["gen.n"] = std::to_string(gen_n);
    kv["gen.split"] = to_string(gen_split);
    return kv;
}

RunConfig RunConfig::from_kv(const KeyValues& kv)
{
    Reader r(kv);
    RunConfig c;
    c.preset = r.str("preset");
    c.seed = r.u64("seed");
    c.out = r.str("out");
    c.T = r.i32("schedule.T");
    c.beta_start = r.dbl("schedule.beta_start");
    c.beta_end = r.dbl("schedule.beta_end");
    c.plan_strategy = parse_strategy(r.str("plan.strategy"));
    c.plan_K = r.i32("plan.K");

    c.model = ModelConfig::read_kv(kv, "model.");
    c.fal = FeedbackConfig::read_kv(kv, "fal.");
    KeyValues expected;
    c.model.write_kv(expected, "model.");
    c.fal.write_kv(expected, "fal.");
    for (const auto& [k, v] : expected) {
        r.str(k);
    }

    c.train_steps = r.i32("train.steps");
    c.train_batch = r.i32("train.batch");
    c.optimizer = r.str("train.optimizer");
    c.adamw.lr = r.dbl("train.lr");
    c.adamw.beta1 = r.dbl("train.beta1");
    c.adamw.beta2 = r.dbl("train.beta2");
    c.adamw.eps = r.dbl("train.eps");
    c.adamw.weight_decay = r.dbl("train.weight_decay");
    c.adamw.grad_clip = r.dbl("train.grad_clip");
    const std::string& ts = r.str("train.timesteps");
    if (ts == "plan") {
        c.train_timesteps = TimestepSampling::plan;
    } else if (ts == "full") {
        c.train_timesteps = TimestepSampling::full;
    } else {
        throw ConfigError("train.timesteps must be plan or full, got '" + ts + "'");
    }
    c.checkpoint_every = r.i32("train.checkpoint_every");
    c.sample_eta = r.dbl("sample.eta");
    c.sample_chunk = r.i32("sample.chunk");
    c.eval_n = r.i32("eval.n");
    c.eval_feature_seed = r.u64("eval.feature_seed");
    c.sandbox_n = r.i32("sandbox.n");
    c.sandbox_gaussian.mu0 = r.dbl("sandbox.mu0");
    c.sandbox_gaussian.sigma0 = r.dbl("sandbox.sigma0");
    c.sandbox_gaussian.dim = r.i32("sandbox.dim");
    c.sandbox_eta = r.dbl("sandbox.eta");
    c.ablate_steps = r.i32("ablate.steps");
    c.ablate_eval_n = r.i32("ablate.eval_n");
    c.ablate_lambdas.clear();
    for (const auto& item : split_list(r.str("ablate.lambdas"))) {
        c.ablate_lambdas.push_back(parse_double("ablate.lambdas", item));
    }
    c.gen_n = r.i32("gen.n");
    c.gen_split = parse_split(r.str("gen.split"));
    r.finish();
    c.validate();
    return c;
}

RunConfig resolve_config(const KeyValues& file, const KeyValues& overrides)
{
    std::string preset = "desk";
    if (const auto it = file.find("preset"); it != file.end()) {
        preset = it->second;
    }
    if (const auto it = overrides.find("preset"); it != overrides.end()) {
        preset = it->second;
    }
    KeyValues kv = RunConfig::defaults(preset).to_kv();
    for (const KeyValues* layer : {&file, &overrides}) {
        for (const auto& [k, v] : *layer) {
            if (!kv.contains(k)) {
                throw ConfigError("unknown key: " + k);
            }
            kv[k] = v;
        }
    }
    return RunConfig::from_kv(kv);
}

std::pair<std::string, std::string> parse_override(const std::string& text)
{
    const auto eq = text.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw ConfigError("override must look like key=value, got '" + text + "'");
    }
    return {text.substr(0, eq), text.substr(eq + 1)};
}

} // namespace usdiff
