// Copyright 2026 The usdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "usdiff/experiments.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <ostream>

#include "usdiff/ops.hpp"

namespace usdiff {

namespace {

constexpr uint64_t kTrainStream = 0x7121;
constexpr uint64_t kSampleStream = 0x5a3e;

std::string step_name(const char* prefix, int64_t step, const char* suffix)
{
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%s%06lld%s", prefix, static_cast<long long>(step), suffix);
    return buf;
}

void write_resolved_config(const RunConfig& cfg, const std::filesystem::path& out)
{
    write_text_file(out / "config.kv", format_kv(cfg.to_kv()));
}

std::vector<ContextSample<float>> slice(const std::vector<ContextSample<float>>& v, size_t begin, size_t end)
{
    return {v.begin() + static_cast<std::ptrdiff_t>(begin), v.begin() + static_cast<std::ptrdiff_t>(end)};
}

} // namespace

std::string loss_csv_header() { return "step,task,direction,train_loss,feedback_loss,total_loss"; }

std::string loss_csv_row(const LossRow& r)
{
    return std::to_string(r.step) + "," + to_string(r.task.kind) + "," + to_string(r.task.direction) + "," +
           format_double(r.train_loss) + "," + format_double(r.feedback_loss) + "," + format_double(r.total_loss);
}

double mean_train_loss(const std::vector<LossRow>& rows, size_t begin, size_t end)
{
    if (begin >= end || end > rows.size()) {
        throw ContractError("mean_train_loss: empty or out-of-range window");
    }
    double acc = 0.0;
    for (size_t i = begin; i < end; ++i) {
        acc += rows[i].train_loss;
    }
    return acc / static_cast<double>(end - begin);
}

TrainResult run_train(const RunConfig& cfg, const std::filesystem::path& out, std::ostream* log)
{
    cfg.validate();
    write_resolved_config(cfg, out);
    const NoiseSchedule s = cfg.schedule();
    const StepPlan plan = cfg.plan();
    const auto tasks = training_tasks();
    const int size = cfg.model.image_size;

    TrainResult result{DenoiserModel<float>(cfg.model, cfg.seed), {}};
    DenoiserModel<float>& model = result.model;
    const auto fn = as_denoise_fn(model);
    AdamW opt(model.parameter_tensors(), cfg.adamw);
    const TrainingLossOptions loss_opt{cfg.train_timesteps};
    const Rng base(cfg.seed, kTrainStream);

    std::string csv = loss_csv_header() + "\n";
    const auto start = std::chrono::steady_clock::now();
    for (int step = 0; step < cfg.train_steps; ++step) {
        const TaskKind task = tasks[static_cast<size_t>(step) % tasks.size()];
        const Rng step_rng = base.fork(static_cast<uint64_t>(step));
        Rng seed_rng = step_rng.fork(0);
        Rng recon_rng = step_rng.fork(1);
        Rng fal_rng = step_rng.fork(2);

        LossRow row{step, task, 0.0, 0.0, 0.0};
        try {
            const auto batch = make_training_batch<float>(task, cfg.train_batch, seed_rng.next_u64(), size);
            const Tensor<float> l_train =
                training_loss<float>(fn, std::span<const ContextSample<float>>(batch), s, plan, recon_rng, loss_opt);
            Tensor<float> l_fb;
            if (cfg.fal.active()) {
                const auto sub = slice(batch, 0, std::min<size_t>(batch.size(), static_cast<size_t>(cfg.fal.batch)));
                l_fb = feedback_loss<float>(fn, std::span<const ContextSample<float>>(sub), s, cfg.fal, plan, fal_rng);
                row.feedback_loss = l_fb.item();
            }
            const Tensor<float> total = total_loss(l_train, l_fb, cfg.fal);
            row.train_loss = l_train.item();
            row.total_loss = total.item();
            if (!std::isfinite(row.total_loss)) {
                throw NumericError("non-finite loss");
            }
            backward(total);
            opt.step();
            opt.zero_grad();
        } catch (const NumericError& e) {
            throw NumericError("train step " + std::to_string(step) + " (" + to_string(task) + "): " + e.what());
        }
        csv += loss_csv_row(row) + "\n";
        result.losses.push_back(row);

        const int done = step + 1;
        if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.train_steps) {
            save_checkpoint(out / step_name("ckpt_", done, ".usdf"), make_checkpoint(cfg, model, done));
        }
        if (log && (done % 50 == 0 || done == cfg.train_steps)) {
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
            const size_t from = result.losses.size() - std::min<size_t>(result.losses.size(), 50);
            *log << "step " << done << "/" << cfg.train_steps << " train_loss(avg50)="
                 << mean_train_loss(result.losses, from, result.losses.size()) << " elapsed=" << secs << "s\n";
        }
    }
    write_text_file(out / "loss.csv", csv);
    save_checkpoint(out / "model.usdf", make_checkpoint(cfg, model, static_cast<uint64_t>(cfg.train_steps)));
    return result;
}

SampleOutput sample_images(const DenoiseFn<float>& model, int image_size, const SampleOptions& opt,
                           const NoiseSchedule& s)
{
    if (opt.n < 1 || opt.chunk < 1) {
        throw ContractError("sample: n and chunk must be positive");
    }
    NoGradGuard no_grad;
    const auto items = make_context_batch<float>(opt.task, opt.n, opt.seed, image_size, Split::eval);
    const Rng base(opt.seed, kSampleStream);

    std::vector<Tensor<float>> images;
    int calls = -1;
    const auto start = std::chrono::steady_clock::now();
    for (int begin = 0, c = 0; begin < opt.n; begin += opt.chunk, ++c) {
        const int end = std::min(opt.n, begin + opt.chunk);
        const auto ctx = slice(items, static_cast<size_t>(begin), static_cast<size_t>(end));
        const int m = end - begin;
        const EpsFn<float> eps_fn = [&](const Tensor<float>& x, int t) {
            const std::vector<int> ts(static_cast<size_t>(m), t);
            return model(x, ts, ctx);
        };
        Rng rng = base.fork(static_cast<uint64_t>(c));
        auto res = sample<float>(eps_fn, opt.plan, {m, 3, image_size, image_size}, s, rng, opt.eta);
        if (calls >= 0 && res.denoiser_calls != calls) {
            throw ContractError("sample: denoiser call count differs between chunks");
        }
        calls = res.denoiser_calls;
        images.push_back(clamp(res.x0, -1.0f, 1.0f));
    }
    SampleOutput out;
    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    out.images = concat_batch<float>(images);
    out.targets = stack_images(items, &ContextSample<float>::target);
    out.denoiser_calls = calls;
    return out;
}

SampleOutput run_sample(const Checkpoint& ckpt, const SampleOptions& opt, const std::filesystem::path& out)
{
    if (opt.task.branch() >= ckpt.config.model.num_tasks) {
        throw ConfigError("task " + to_string(opt.task) + " is unknown to the checkpoint");
    }
    const DenoiserModel<float> model = load_model(ckpt);
    const SampleOutput res = sample_images(as_denoise_fn(model), ckpt.config.model.image_size, opt, ckpt.schedule);
    std::string report = "image,task,plan_strategy,K,denoiser_calls\n";
    const int64_t hw = res.images.numel() / res.images.dim(0);
    const auto& v = res.images.values();
    for (int i = 0; i < opt.n; ++i) {
        const std::string name = step_name("sample_", i, ".ppm");
        const auto first = v.begin() + static_cast<std::ptrdiff_t>(i * hw);
        const int size = ckpt.config.model.image_size;
        write_ppm(out / name, Tensor<float>::from({3, size, size}, std::vector<float>(first, first + hw)));
        report += name + "," + to_string(opt.task) + "," + to_string(opt.plan.strategy) + "," +
                  std::to_string(opt.plan.K()) + "," + std::to_string(res.denoiser_calls) + "\n";
    }
    write_text_file(out / "report.csv", report);
    return res;
}

EvalReport evaluate(const DenoiseFn<float>& model, int image_size, const TaskKind& task, int n, const StepPlan& plan,
                    uint64_t seed, const NoiseSchedule& s, uint64_t feature_seed, int chunk)
{
    if (n < 50) {
        throw ContractError("evaluate: n must be >= 50");
    }
    const SampleOutput res = sample_images(model, image_size, {task, n, plan, seed, chunk, 0.0}, s);
    EvalReport r;
    r.task = task;
    r.n = n;
    r.seed = seed;
    r.plan_strategy = to_string(plan.strategy);
    r.K = plan.K();
    r.denoiser_calls = res.denoiser_calls;
    if (task.direction == Direction::image2map) {
        r.rmse = rmse(res.images, res.targets);
    } else {
        r.fd = frechet_proxy(res.images, res.targets, feature_seed);
    }
    return r;
}

EvalReport run_eval(const Checkpoint& ckpt, const std::string& checkpoint_id, const TaskKind& task, int n,
                    const StepPlan& plan, uint64_t seed, const std::filesystem::path& out)
{
    const DenoiserModel<float> model = load_model(ckpt);
    EvalReport r = evaluate(as_denoise_fn(model), ckpt.config.model.image_size, task, n, plan, seed, ckpt.schedule,
                            ckpt.config.eval_feature_seed, ckpt.config.sample_chunk);
    r.checkpoint = checkpoint_id;
    const auto path = out / "results.csv";
    std::string csv = std::filesystem::exists(path) ? read_text_file(path) : results_csv_header() + "\n";
    csv += results_csv_row(r) + "\n";
    write_text_file(path, csv);
    return r;
}

std::vector<SandboxReport> sandbox_grid(const RunConfig& cfg)
{
    const NoiseSchedule s = cfg.schedule();
    const std::vector<StepStrategy> strategies{StepStrategy::uniform(), StepStrategy::power(0.3),
                                               StepStrategy::power(0.5), StepStrategy::power(0.7),
                                               StepStrategy::alpha_quantile()};
    std::vector<SandboxReport> rows;
    for (const auto& st : strategies) {
        for (int k : {5, 10, 20, 50}) {
            rows.push_back(
                run_sandbox(select_steps(s, k, st), cfg.sandbox_gaussian, s, cfg.sandbox_n, cfg.seed, cfg.sandbox_eta));
        }
    }
    return rows;
}

std::vector<SandboxReport> run_sandbox_cmd(const RunConfig& cfg, const std::filesystem::path& out)
{
    cfg.validate();
    write_resolved_config(cfg, out);
    const auto rows = sandbox_grid(cfg);
    std::string csv = sandbox_csv_header() + "\n";
    for (const auto& r : rows) {
        csv += sandbox_csv_row(r) + "\n";
    }
    write_text_file(out / "sandbox.csv", csv);
    return rows;
}

std::string ablation_csv_header()
{
    return "section,cell,sga,fal,ess,lambda,steps,recon_loss,image2map_rmse,map2image_fd,seed";
}

std::string ablation_csv_row(const AblationRow& r)
{
    const auto b = [](bool v) { return v ? "1" : "0"; };
    return r.section + "," + r.cell + "," + b(r.sga) + "," + b(r.fal) + "," + b(r.ess) + "," + format_double(r.lambda) +
           "," + std::to_string(r.steps) + "," + format_double(r.recon_loss) + "," + format_double(r.image2map_rmse) +
           "," + format_double(r.map2image_fd) + "," + std::to_string(r.seed);
}

RunConfig ablation_cell_config(const RunConfig& base, bool sga, bool fal, bool ess, double lambda)
{
    RunConfig c = base;
    c.model.sga_enabled = sga;
    c.fal.enabled = fal;
    c.fal.lambda = lambda;
    if (base.ablate_steps > 0) {
        c.train_steps = base.ablate_steps;
    }
    c.train_timesteps = ess ? TimestepSampling::plan : TimestepSampling::full;
    return c;
}

StepPlan ablation_inference_plan(const RunConfig& cell, bool ess)
{
    return ess ? cell.plan() : select_steps(cell.schedule(), 100, StepStrategy::uniform());
}

std::vector<AblationRow> run_ablate(const RunConfig& cfg, const std::filesystem::path& out, std::ostream* log)
{
    cfg.validate();
    write_resolved_config(cfg, out);
    const NoiseSchedule s = cfg.schedule();
    const TaskKind i2m{MapKind::edge, Direction::image2map};
    const TaskKind m2i{MapKind::edge, Direction::map2image};

    std::map<std::string, AblationRow> done;  // keyed by resolved training config
    std::vector<AblationRow> rows;
    const auto run_cell = [&](const std::string& section, bool sga, bool fal, bool ess, double lambda) {
        RunConfig cell = ablation_cell_config(cfg, sga, fal, ess, lambda);
        const std::string name = std::string("sga") + (sga ? "1" : "0") + "_fal" + (fal ? "1" : "0") + "_ess" +
                                 (ess ? "1" : "0") + "_lambda" + format_double(lambda);
        cell.out = (out / name).string();
        RunConfig key_cfg = cell;
        key_cfg.out.clear();
        const std::string key = format_kv(key_cfg.to_kv());
        AblationRow row;
        if (const auto it = done.find(key); it != done.end()) {
            row = it->second;
        } else {
            if (log) {
                *log << "ablate: training " << name << "\n";
            }
            const TrainResult tr = run_train(cell, cell.out, log);
            const StepPlan plan = ablation_inference_plan(cell, ess);
            const auto fn = as_denoise_fn(tr.model);
            const int size = cell.model.image_size;
            row.sga = sga;
            row.fal = fal;
            row.ess = ess;
            row.lambda = lambda;
            row.steps = cell.train_steps;
            row.seed = cell.seed;
            row.cell = name;
            if (!tr.losses.empty()) {
                const size_t w = std::min<size_t>(100, tr.losses.size());
                row.recon_loss = mean_train_loss(tr.losses, tr.losses.size() - w, tr.losses.size());
            }
            row.image2map_rmse =
                *evaluate(fn, size, i2m, cfg.ablate_eval_n, plan, cell.seed, s, cell.eval_feature_seed, cell.sample_chunk)
                     .rmse;
            row.map2image_fd =
                *evaluate(fn, size, m2i, cfg.ablate_eval_n, plan, cell.seed, s, cell.eval_feature_seed, cell.sample_chunk)
                     .fd;
            done.emplace(key, row);
        }
        row.section = section;
        rows.push_back(row);
    };

    for (bool sga : {false, true}) {
        for (bool fal : {false, true}) {
            for (bool ess : {false, true}) {
                run_cell("grid", sga, fal, ess, cfg.fal.lambda);
            }
        }
    }
    for (double lambda : cfg.ablate_lambdas) {
        run_cell("lambda", true, true, true, lambda);
    }

    std::string csv = ablation_csv_header() + "\n";
    for (const auto& r : rows) {
        csv += ablation_csv_row(r) + "\n";
    }
    write_text_file(out / "ablate.csv", csv);
    return rows;
}

void run_gen_data(const RunConfig& cfg, const std::filesystem::path& out)
{
    cfg.validate();
    write_resolved_config(cfg, out);
    const int size = std::max(16, cfg.model.image_size);
    std::string manifest = "seed,task,split\n";
    const std::vector<MapKind> kinds{MapKind::edge, MapKind::seg, MapKind::depth, MapKind::canny_like,
                                     MapKind::scribble_like};
    NoGradGuard no_grad;
    for (int i = 0; i < cfg.gen_n; ++i) {
        const uint64_t seed = scene_seed(cfg.seed, i, true, cfg.gen_split);
        const Tensor<float> image = gen_scene<float>(seed, size).image;
        write_ppm(out / (std::to_string(seed) + "_image.ppm"), image);
        manifest += std::to_string(seed) + ",image," + to_string(cfg.gen_split) + "\n";
        for (MapKind k : kinds) {
            write_ppm(out / (std::to_string(seed) + "_" + to_string(k) + ".ppm"), annotate(image, k));
            manifest += std::to_string(seed) + "," + to_string(k) + "," + to_string(cfg.gen_split) + "\n";
        }
    }
    write_text_file(out / "manifest.csv", manifest);
}

} // namespace usdiff
