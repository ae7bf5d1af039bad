// Copyright 2026 The usdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "usdiff/experiments.hpp"

namespace fs = std::filesystem;
using namespace usdiff;

namespace {

struct Common {
    std::string config;
    std::optional<uint64_t> seed;
    std::string out;
    std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c)
{
    cmd->add_option("--config", c.config, "key=value config file");
    cmd->add_option("--seed", c.seed, "global seed");
    cmd->add_option("--out", c.out, "output directory");
    cmd->add_option("--override", c.overrides, "key=value, repeatable")->take_all();
}

KeyValues override_layer(const Common& c)
{
    KeyValues kv;
    for (const auto& o : c.overrides) {
        const auto [k, v] = parse_override(o);
        kv[k] = v;
    }
    if (c.seed) {
        kv["seed"] = std::to_string(*c.seed);
    }
    if (!c.out.empty()) {
        kv["out"] = c.out;
    }
    return kv;
}

RunConfig resolve(const Common& c)
{
    const KeyValues file = c.config.empty() ? KeyValues{} : parse_kv(read_text_file(c.config));
    return resolve_config(file, override_layer(c));
}

// Checkpoint config, then the config file and overrides on top.
RunConfig resolve_on(const RunConfig& base, const Common& c)
{
    KeyValues kv = base.to_kv();
    kv["out"] = "out";
    const KeyValues file = c.config.empty() ? KeyValues{} : parse_kv(read_text_file(c.config));
    for (const KeyValues& layer : {file, override_layer(c)}) {
        for (const auto& [k, v] : layer) {
            if (!kv.contains(k)) {
                throw ConfigError("unknown key: " + k);
            }
            kv[k] = v;
        }
    }
    return RunConfig::from_kv(kv);
}

StepPlan plan_for(const RunConfig& cfg, std::optional<int> k, const std::string& strategy)
{
    const StepStrategy st = strategy.empty() ? cfg.plan_strategy : parse_strategy(strategy);
    return select_steps(cfg.schedule(), k.value_or(cfg.plan_K), st);
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"usdiff: desk-scale in-context diffusion with adapters, feedback losses and step selection"};
    app.require_subcommand(1);

    Common common;
    auto* train = app.add_subcommand("train", "train a model; writes loss.csv and checkpoints");
    add_common(train, common);

    std::string checkpoint, task = "edge/image2map", strategy;
    std::optional<int> n, k;
    auto* sample = app.add_subcommand("sample", "sample images from a checkpoint");
    add_common(sample, common);
    sample->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    sample->add_option("--task", task, "kind/direction");
    sample->add_option("--n", n, "number of images (default 8)");
    sample->add_option("--K", k, "plan size override");
    sample->add_option("--strategy", strategy, "uniform | power(g) | alpha_quantile");

    std::string checkpoint_id;
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint; appends to results.csv");
    add_common(eval, common);
    eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    eval->add_option("--task", task, "kind/direction");
    eval->add_option("--n", n, "number of items (default eval.n)");
    eval->add_option("--K", k, "plan size override");
    eval->add_option("--strategy", strategy, "uniform | power(g) | alpha_quantile");
    eval->add_option("--id", checkpoint_id, "checkpoint id in results.csv (default: file stem)");

    auto* sandbox = app.add_subcommand("sandbox", "Gaussian sandbox strategy grid; writes sandbox.csv");
    add_common(sandbox, common);
    auto* ablate = app.add_subcommand("ablate", "adapter/feedback/step-selection grid and lambda sweep");
    add_common(ablate, common);
    auto* gen = app.add_subcommand("gen-data", "write scenes and annotator maps as PPM plus manifest.csv");
    add_common(gen, common);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (train->parsed()) {
            const RunConfig cfg = resolve(common);
            const auto res = run_train(cfg, cfg.out, &std::cout);
            std::cout << "wrote " << res.losses.size() << " loss rows and " << (fs::path(cfg.out) / "model.usdf").string()
                      << "\n";
        } else if (sample->parsed()) {
            const Checkpoint ckpt = load_checkpoint(checkpoint);
            const RunConfig cfg = resolve_on(ckpt.config, common);
            const SampleOptions opt{parse_task(task), n.value_or(8), plan_for(cfg, k, strategy), cfg.seed,
                                    cfg.sample_chunk, cfg.sample_eta};
            const auto res = run_sample(ckpt, opt, cfg.out);
            std::cout << "images=" << opt.n << " K=" << opt.plan.K() << " denoiser_calls_per_image=" << res.denoiser_calls
                      << " seconds=" << res.seconds << "\n";
        } else if (eval->parsed()) {
            const Checkpoint ckpt = load_checkpoint(checkpoint);
            const RunConfig cfg = resolve_on(ckpt.config, common);
            const std::string id = checkpoint_id.empty() ? fs::path(checkpoint).stem().string() : checkpoint_id;
            const auto r = run_eval(ckpt, id, parse_task(task), n.value_or(cfg.eval_n), plan_for(cfg, k, strategy),
                                    cfg.seed, cfg.out);
            std::cout << results_csv_row(r) << "\n";
        } else if (sandbox->parsed()) {
            const RunConfig cfg = resolve(common);
            for (const auto& r : run_sandbox_cmd(cfg, cfg.out)) {
                std::cout << sandbox_csv_row(r) << "\n";
            }
        } else if (ablate->parsed()) {
            const RunConfig cfg = resolve(common);
            for (const auto& r : run_ablate(cfg, cfg.out, &std::cout)) {
                std::cout << ablation_csv_row(r) << "\n";
            }
        } else if (gen->parsed()) {
            const RunConfig cfg = resolve(common);
            run_gen_data(cfg, cfg.out);
            std::cout << "wrote " << cfg.gen_n << " scenes to " << cfg.out << "\n";
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const ContractError& e) {
        std::cerr << "invalid input: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return 4;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
