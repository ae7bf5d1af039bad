// Copyright 2026 The usdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "test_util.hpp"
#include "usdiff/diffusion.hpp"
#include "usdiff/grad_check.hpp"
#include "usdiff/model.hpp"

using namespace usdiff;
using namespace usdiff::testing;

namespace {

std::vector<ContextSample<double>> batch_for(const TaskKind& task, int n, uint64_t seed, int size)
{
    return make_context_batch<double>(task, n, seed, size);
}

void randomize(DenoiserModel<double>& m, const std::string& prefix, uint64_t seed, double scale = 0.2)
{
    Rng rng(seed);
    for (auto& p : m.parameters()) {
        if (p.name.starts_with(prefix)) {
            for (auto& v : p.tensor.mutable_data()) {
                v = rng.normal() * scale;
            }
        }
    }
}

void shift(DenoiserModel<double>& m, const std::string& prefix, double by)
{
    for (auto& p : m.parameters()) {
        if (p.name.starts_with(prefix)) {
            for (auto& v : p.tensor.mutable_data()) {
                v += by;
            }
        }
    }
}

// Parameter names carry the 1-based task id.
std::string branch_prefix(const char* adapter, int b) { return std::string(adapter) + ".branch" + std::to_string(b) + "."; }

} // namespace

TEST_SUITE("model")
{
    TEST_CASE("time_embed")
    {
        const std::vector<int> zero{0};
        const auto e0 = time_embed<double>(zero, 16);
        for (int i = 0; i < 16; ++i) {
            CHECK(e0.values()[static_cast<size_t>(i)] == (i % 2 == 0 ? 0.0 : 1.0));
        }
        std::vector<int> all;
        for (int t = 1; t <= 1000; ++t) {
            all.push_back(t);
        }
        const auto e = time_embed<double>(all, 16);
        std::set<std::vector<double>> rows;
        for (int t = 0; t < 1000; ++t) {
            const auto first = e.values().begin() + t * 16;
            std::vector<double> row(first, first + 16);
            double sq = 0.0;
            for (double v : row) {
                sq += v * v;
            }
            CHECK(std::sqrt(sq) == doctest::Approx(std::sqrt(8.0)).epsilon(1e-12));
            rows.insert(row);
        }
        CHECK(rows.size() == 1000);
    }

    TEST_CASE("control_input")
    {
        Rng rng(3);
        const auto a = rand_t({2, 4, 2, 2}, rng);
        const auto b = rand_t({2, 4, 2, 2}, rng);
        const auto z = Tensor<double>::zeros({2, 4, 2, 2});
        CHECK(DenoiserModel<double>::control_input(z, b).values() == b.values());
        CHECK(DenoiserModel<double>::control_input(a, b).values() == DenoiserModel<double>::control_input(b, a).values());
        const auto s = DenoiserModel<double>::control_input(a, b);
        for (size_t i = 0; i < s.values().size(); ++i) {
            CHECK(s.values()[i] == a.values()[i] + b.values()[i]);
        }
        CHECK_THROWS_AS(DenoiserModel<double>::control_input(a, Tensor<double>::zeros({2, 4, 2, 1})), ContractError);
    }

    TEST_CASE("sga output shape")
    {
        for (const auto& cfg : {ModelConfig::micro(), ModelConfig::desk()}) {
            const DenoiserModel<double> m(cfg, 1);
            Rng rng(2);
            const int s = cfg.image_size;
            const auto q = m.sga_forward(SgaVariant::query, rand_t({2, 3, s, s}, rng), 1);
            const auto e = m.sga_forward(SgaVariant::example, rand_t({2, 6, s, s}, rng), 6);
            const int r = s >> (cfg.depth - 1);
            CHECK(q.shape() == Shape{2, cfg.channels(0), r, r});
            CHECK(e.shape() == q.shape());
            CHECK(r == cfg.control_resolution());
            CHECK_THROWS_AS(m.sga_forward(SgaVariant::query, rand_t({2, 3, s, s}, rng), 7), ContractError);
            CHECK_THROWS_AS(m.sga_forward(SgaVariant::query, rand_t({2, 3, s, s}, rng), 0), ContractError);
        }
    }

    TEST_CASE("sga indicator routing")
    {
        DenoiserModel<double> m(ModelConfig::micro(), 4);
        Rng rng(5);
        const auto x = rand_t({1, 3, 8, 8}, rng);
        const auto before = m.sga_forward(SgaVariant::query, x, 2).values();
        shift(m, branch_prefix("sga_q", 1), 1.0);
        shift(m, branch_prefix("sga_q", 3), 1.0);
        shift(m, branch_prefix("sga_e", 2), 1.0);
        CHECK(bit_equal(m.sga_forward(SgaVariant::query, x, 2).values(), before));
        shift(m, branch_prefix("sga_q", 2), 1.0);
        CHECK_FALSE(bit_equal(m.sga_forward(SgaVariant::query, x, 2).values(), before));
    }

    TEST_CASE("routing isolation through the full denoiser")
    {
        const auto tasks = training_tasks();
        for (size_t k = 0; k < tasks.size(); ++k) {
            DenoiserModel<double> m(ModelConfig::micro(), 7);
            randomize(m, "control.zero", 8);  // let the hint reach the output
            const auto ctx = batch_for(tasks[k], 2, 3, 8);
            Rng rng(k);
            const auto x = rand_t({2, 3, 8, 8}, rng);
            const std::vector<int> t{17, 600};
            const auto span = std::span<const ContextSample<double>>(ctx);
            const auto base = m.forward(x, t, span).values();
            const int own = tasks[k].branch() + 1;
            for (int j = 1; j <= m.branch_count(); ++j) {
                if (j != own) {
                    shift(m, branch_prefix("sga_e", j), 1.0);
                    shift(m, branch_prefix("sga_q", j), 1.0);
                }
            }
            CAPTURE(to_string(tasks[k]));
            CHECK(bit_equal(m.forward(x, t, span).values(), base));

            m.zero_grad();
            backward(sum(m.forward(x, t, span)));
            for (const auto& p : m.parameters()) {
                const bool branch = p.name.starts_with("sga_e.branch") || p.name.starts_with("sga_q.branch");
                if (branch && !p.name.starts_with(branch_prefix("sga_e", own)) &&
                    !p.name.starts_with(branch_prefix("sga_q", own))) {
                    for (double g : p.tensor.grad()) {
                        REQUIRE(g == 0.0);
                    }
                }
            }
            double shared = 0.0;
            for (const auto& name : {"sga_e.shared", "sga_q.shared"}) {
                for (const auto& p : m.parameters_with_prefix(name)) {
                    for (double g : p.grad()) {
                        shared += std::abs(g);
                    }
                }
            }
            CHECK(shared > 0.0);
        }
    }

    TEST_CASE("zero-initialized control contributes nothing")
    {
        for (const auto& cfg : {ModelConfig::micro(), ModelConfig::desk()}) {
            const DenoiserModel<double> m(cfg, 2);
            const int s = cfg.image_size;
            const TaskKind task{MapKind::seg, Direction::image2map};
            const auto a = batch_for(task, 2, 1, s);
            const auto b = batch_for(task, 2, 99, s);
            Rng rng(1);
            const auto x = rand_t({2, 3, s, s}, rng);
            const std::vector<int> t{5, 900};
            const auto with = m.forward(x, t, std::span<const ContextSample<double>>(a), true);
            const auto without = m.forward(x, t, std::span<const ContextSample<double>>(a), false);
            const auto other = m.forward(x, t, std::span<const ContextSample<double>>(b), true);
            CHECK(with.shape() == x.shape());
            CHECK(bit_equal(with.values(), without.values()));
            CHECK(bit_equal(with.values(), other.values()));
        }
    }

    TEST_CASE("deterministic initialization, clone and cast")
    {
        const DenoiserModel<float> a(ModelConfig::micro(), 11);
        const DenoiserModel<float> b(ModelConfig::micro(), 11);
        const DenoiserModel<float> c(ModelConfig::micro(), 12);
        REQUIRE(a.parameters().size() == b.parameters().size());
        bool any_diff = false;
        for (size_t i = 0; i < a.parameters().size(); ++i) {
            CHECK(bit_equal(a.parameters()[i].tensor.values(), b.parameters()[i].tensor.values()));
            any_diff = any_diff || !bit_equal(a.parameters()[i].tensor.values(), c.parameters()[i].tensor.values());
        }
        CHECK(any_diff);
        const auto d = a.cast<double>();
        const auto e = a.clone();
        for (size_t i = 0; i < a.parameters().size(); ++i) {
            const auto& src = a.parameters()[i].tensor.values();
            const auto& dv = d.parameters()[i].tensor.values();
            for (size_t j = 0; j < src.size(); ++j) {
                REQUIRE(static_cast<double>(src[j]) == dv[j]);
            }
            CHECK(bit_equal(e.parameters()[i].tensor.values(), src));
        }
        CHECK(a.parameter_count() == 65107);
        CHECK(DenoiserModel<float>(ModelConfig::desk(), 0).parameter_count() == 968515);
    }

    TEST_CASE("shared embedder when SGA is disabled")
    {
        ModelConfig cfg = ModelConfig::micro();
        cfg.sga_enabled = false;
        const DenoiserModel<double> m(cfg, 1);
        CHECK(m.branch_count() == 1);
        for (int id = 1; id <= 6; ++id) {
            CHECK(m.branch_for_task(id) == 0);
        }
    }

    TEST_CASE("config text round-trip and validation")
    {
        ModelConfig cfg = ModelConfig::micro();
        cfg.sga_hidden = 5;
        KeyValues kv;
        cfg.write_kv(kv, "model.");
        CHECK(ModelConfig::read_kv(parse_kv(format_kv(kv)), "model.") == cfg);
        cfg.sga_strides = {2, 1, 1};
        CHECK_THROWS(cfg.validate());
    }

    TEST_CASE("training loss gradient matches finite differences")
    {
        DenoiserModel<double> m(ModelConfig::micro(), 3);
        randomize(m, "control.zero", 4, 0.1);
        const auto s = build_schedule();
        const auto plan = select_steps(s, 10, StepStrategy::power(0.5));
        const auto ctx = batch_for({MapKind::depth, Direction::map2image}, 2, 5, 8);
        const auto fn = as_denoise_fn(m);
        auto params = m.parameter_tensors();
        std::vector<std::string> names;
        for (const auto& p : m.parameters()) {
            names.push_back(p.name);
        }
        const auto report = grad_check_params(
            [&] {
                Rng rng(6);
                return training_loss<double>(fn, std::span<const ContextSample<double>>(ctx), s, plan, rng);
            },
            params, names, 1e-5, 3);
        CAPTURE(report.worst_tensor);
        CHECK(report.max_rel_error < 1e-4);
        CHECK(report.coordinates > 3 * 60);
    }
}
