// Copyright 2026 The usdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "usdiff/config.hpp"
#include "usdiff/io.hpp"
#include "usdiff/metrics.hpp"

namespace usdiff {

struct LossRow {
    int step = 0;
    TaskKind task;
    double train_loss = 0.0;
    double feedback_loss = 0.0;  // 0 when feedback is inactive
    double total_loss = 0.0;
};

/// loss.csv columns: step,task,direction,train_loss,feedback_loss,total_loss
std::string loss_csv_header();
std::string loss_csv_row(const LossRow& r);

struct TrainResult {
    DenoiserModel<float> model;
    std::vector<LossRow> losses;
};

/// Trains from scratch (init seed = config seed) over the six training tasks
/// round-robin. Writes config.kv, loss.csv, ckpt_<step>.usdf every
/// checkpoint_every steps and model.usdf into `out`. Progress goes to `log`.
TrainResult run_train(const RunConfig& cfg, const std::filesystem::path& out, std::ostream* log = nullptr);

/// Mean train_loss over rows [begin, end).
double mean_train_loss(const std::vector<LossRow>& rows, size_t begin, size_t end);

struct SampleOptions {
    TaskKind task;
    int n = 8;
    StepPlan plan;
    uint64_t seed = 0;
    int chunk = 25;
    double eta = 0.0;
};

struct SampleOutput {
    Tensor<float> images;      // [n,3,H,W], clamped to [-1,1]
    Tensor<float> targets;     // ground truth for the same context items
    int denoiser_calls = 0;    // per image
    double seconds = 0.0;      // sampling wall-clock
};

/// Conditional plan-driven sampling on held-out context items.
SampleOutput sample_images(const DenoiseFn<float>& model, int image_size, const SampleOptions& opt,
                           const NoiseSchedule& s);

/// Writes sample_<i>.ppm and report.csv (image,task,plan_strategy,K,denoiser_calls).
SampleOutput run_sample(const Checkpoint& ckpt, const SampleOptions& opt, const std::filesystem::path& out);

/// Samples n held-out items and scores RMSE (image2map) or the Frechet proxy
/// against the targets (map2image).
EvalReport evaluate(const DenoiseFn<float>& model, int image_size, const TaskKind& task, int n, const StepPlan& plan,
                    uint64_t seed, const NoiseSchedule& s, uint64_t feature_seed, int chunk = 25);

/// Evaluates one task and appends to <out>/results.csv.
EvalReport run_eval(const Checkpoint& ckpt, const std::string& checkpoint_id, const TaskKind& task, int n,
                    const StepPlan& plan, uint64_t seed, const std::filesystem::path& out);

/// {uniform, power(.3), power(.5), power(.7), alpha_quantile} x K {5,10,20,50}.
std::vector<SandboxReport> sandbox_grid(const RunConfig& cfg);
std::vector<SandboxReport> run_sandbox_cmd(const RunConfig& cfg, const std::filesystem::path& out);

struct AblationRow {
    std::string section;  // "grid" or "lambda"
    bool sga = true;
    bool fal = true;
    bool ess = true;
    double lambda = 1.0;
    int steps = 0;
    double recon_loss = 0.0;  // mean train loss of the last min(100, steps) steps
    double image2map_rmse = 0.0;
    double map2image_fd = 0.0;
    uint64_t seed = 0;
    std::string cell;
};

std::string ablation_csv_header();
std::string ablation_csv_row(const AblationRow& r);

/// Training config of one ablation cell. ESS off trains on [1, T] and
/// samples with 100 uniform steps.
RunConfig ablation_cell_config(const RunConfig& base, bool sga, bool fal, bool ess, double lambda);
StepPlan ablation_inference_plan(const RunConfig& cell, bool ess);

/// 2x2x2 grid then the lambda sweep; writes ablate.csv and one directory per cell.
std::vector<AblationRow> run_ablate(const RunConfig& cfg, const std::filesystem::path& out,
                                    std::ostream* log = nullptr);

/// <seed>_<kind>.ppm for the scene image and every map kind, plus manifest.csv
/// (seed,task,split).
void run_gen_data(const RunConfig& cfg, const std::filesystem::path& out);

} // namespace usdiff
