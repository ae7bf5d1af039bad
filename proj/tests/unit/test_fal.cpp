// Copyright 2026 The usdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <vector>

#include "test_util.hpp"
#include "usdiff/fal.hpp"
#include "usdiff/grad_check.hpp"
#include "usdiff/model.hpp"
#include "usdiff/ops.hpp"

using namespace usdiff;
using namespace usdiff::testing;

namespace {

using Items = std::span<const ContextSample<double>>;

// Returns the eps that reproduces each item's target, plus `delta`.
DenoiseFn<double> oracle(const NoiseSchedule& s, double delta = 0.0)
{
    return [&s, delta](const Tensor<double>& x_t, std::span<const int> t, Items ctx) {
        std::vector<Tensor<double>> parts;
        for (size_t i = 0; i < ctx.size(); ++i) {
            const auto& x0 = ctx[i].target;
            Shape one{1};
            one.insert(one.end(), x0.shape().begin(), x0.shape().end());
            const double ab = s.alpha_bar[t[i]];
            const auto xi = slice_batch(x_t, static_cast<int64_t>(i), 1);
            const auto eps = scale(sub(xi, scale(x0.reshape(one), std::sqrt(ab))), 1.0 / std::sqrt(1.0 - ab));
            parts.push_back(affine(eps, 1.0, delta));
        }
        return concat_batch<double>(parts);
    };
}

} // namespace

TEST_SUITE("feedback")
{
    TEST_CASE("oracle denoiser gives zero feedback in both directions")
    {
        const auto s = build_schedule();
        const auto plan = select_steps(s, 10, StepStrategy::power(0.5));
        const FeedbackConfig cfg;
        for (MapKind k : {MapKind::edge, MapKind::seg, MapKind::depth}) {
            const auto i2m = make_context_batch<double>({k, Direction::image2map}, 3, 2, 16);
            const auto m2i = make_context_batch<double>({k, Direction::map2image}, 3, 2, 16);
            Rng a(1), b(1);
            CHECK(feedback_loss_image2map(oracle(s), Items(i2m), s, cfg, plan, a).item() < 1e-20);
            CHECK(feedback_loss_map2image(oracle(s), Items(m2i), s, cfg, plan, b).item() < 1e-18);
        }
    }

    TEST_CASE("zero denoiser on a 2x2 fixture")
    {
        const auto s = build_schedule();
        const auto plan = select_steps(s, 10, StepStrategy::power(0.5));
        const FeedbackConfig cfg;
        ContextSample<double> item;
        item.task = {MapKind::edge, Direction::image2map};
        item.query = Tensor<double>::from({3, 2, 2}, {-0.5, 0.2, 0.9, -0.1, 0.3, 0.3, -0.8, 0.6, 0.0, 0.4, -0.2, 0.7});
        item.target = annotate(item.query, MapKind::edge);
        item.example_src = item.query;
        item.example_tgt = item.target;
        const std::vector<ContextSample<double>> items{item};

        Tensor<double> seen_x;
        int seen_t = 0;
        const DenoiseFn<double> zero = [&](const Tensor<double>& x_t, std::span<const int> t, Items) {
            seen_x = x_t;
            seen_t = t[0];
            return Tensor<double>::zeros(x_t.shape());
        };
        Rng rng(3);
        const double got = feedback_loss_image2map(zero, Items(items), s, cfg, plan, rng).item();

        const double inv = 1.0 / std::sqrt(s.alpha_bar[seen_t]);
        const auto& ann = item.target.values();
        double want = 0.0;
        for (size_t i = 0; i < 12; ++i) {
            const double pred = std::clamp(seen_x.values()[i] * inv, -1.0, 1.0);
            want += (ann[i] - pred) * (ann[i] - pred);
        }
        want /= 12.0;
        CHECK(seen_t >= 1);
        CHECK(seen_t <= cfg.t_prime);
        CHECK(got == doctest::Approx(want).epsilon(1e-12));
    }

    TEST_CASE("perturbed oracle grows with the perturbation")
    {
        const auto s = build_schedule();
        const auto plan = select_steps(s, 10, StepStrategy::power(0.5));
        const FeedbackConfig cfg;
        const auto items = make_context_batch<double>({MapKind::depth, Direction::map2image}, 4, 6, 16);
        double prev = -1.0;
        for (double delta : {0.0, 0.1, 0.2, 0.4}) {
            Rng rng(8);
            const double l = feedback_loss_map2image(oracle(s, delta), Items(items), s, cfg, plan, rng).item();
            CHECK(l >= 0.0);
            CHECK(l > prev);
            prev = l;
        }
    }

    TEST_CASE("path selection is total and strict")
    {
        const auto s = build_schedule();
        const auto plan = select_steps(s, 10, StepStrategy::power(0.5));
        const FeedbackConfig cfg;
        const auto m2i = make_context_batch<double>({MapKind::edge, Direction::map2image}, 2, 1, 16);
        const auto i2m = make_context_batch<double>({MapKind::edge, Direction::image2map}, 2, 1, 16);
        Rng rng(1);
        CHECK_THROWS_AS(feedback_loss_image2map(oracle(s), Items(m2i), s, cfg, plan, rng), ContractError);
        CHECK_THROWS_AS(feedback_loss_map2image(oracle(s), Items(i2m), s, cfg, plan, rng), ContractError);
        std::vector<ContextSample<double>> mixed{m2i[0], i2m[0]};
        CHECK_THROWS_AS(feedback_loss(oracle(s), Items(mixed), s, cfg, plan, rng), ContractError);
        for (const auto& task : training_tasks()) {
            const auto b = make_context_batch<double>(task, 1, 2, 16);
            CHECK_NOTHROW(feedback_loss(oracle(s), Items(b), s, cfg, plan, rng));
        }
    }

    TEST_CASE("feedback t never exceeds t_prime")
    {
        const auto s = build_schedule();
        const auto plan = select_steps(s, 10, StepStrategy::power(0.5));
        FeedbackConfig cfg;
        Rng rng(2);
        int lo = 1000, hi = 0;
        for (int i = 0; i < 10000; ++i) {
            const int t = draw_feedback_t(cfg, plan, rng);
            lo = std::min(lo, t);
            hi = std::max(hi, t);
        }
        CHECK(lo == 1);
        CHECK(hi == cfg.t_prime);
        cfg.t_prime = 400;
        cfg.restrict_to_plan = true;
        for (int i = 0; i < 1000; ++i) {
            const int t = draw_feedback_t(cfg, plan, rng);
            CHECK((t == 316 || t == 447) == (t <= 400));
            CHECK(t <= 400);
        }
        cfg.t_prime = 100;
        CHECK_THROWS_AS(draw_feedback_t(cfg, plan, rng), ContractError);
    }

    TEST_CASE("total_loss weighting")
    {
        FeedbackConfig cfg;
        const auto lt = Tensor<double>::scalar(0.5);
        const auto lf = Tensor<double>::scalar(0.25);
        cfg.lambda = 10.0;
        CHECK(total_loss(lt, lf, cfg).item() == doctest::Approx(3.0).epsilon(1e-15));
        cfg.lambda = 1.0;
        CHECK(total_loss(lt, lf, cfg).item() == doctest::Approx(0.75).epsilon(1e-15));
        cfg.lambda = 0.0;
        CHECK(total_loss(lt, lf, cfg).node() == lt.node());
        cfg.lambda = 1.0;
        cfg.enabled = false;
        CHECK(total_loss(lt, Tensor<double>{}, cfg).node() == lt.node());
    }

    TEST_CASE("stop-gradient annotator cuts the feedback path")
    {
        DenoiserModel<double> m(ModelConfig::micro(), 2);
        const auto s = build_schedule();
        const auto plan = select_steps(s, 10, StepStrategy::power(0.5));
        FeedbackConfig cfg;
        cfg.annotator_grad = false;
        const auto items = make_context_batch<double>({MapKind::seg, Direction::map2image}, 2, 4, 8);
        Rng rng(1);
        const auto l = feedback_loss_map2image<double>(as_denoise_fn(m), Items(items), s, cfg, plan, rng);
        CHECK_FALSE(l.requires_grad());
    }

    TEST_CASE("total loss gradient through the annotator")
    {
        DenoiserModel<double> m(ModelConfig::micro(), 5);
        Rng init(9);
        for (auto& p : m.parameters()) {
            if (p.name.starts_with("control.zero")) {
                for (auto& v : p.tensor.mutable_data()) {
                    v = init.normal() * 0.1;
                }
            }
        }
        const auto s = build_schedule();
        const auto plan = select_steps(s, 10, StepStrategy::power(0.5));
        const FeedbackConfig cfg;
        const auto fn = as_denoise_fn(m);
        auto params = m.parameter_tensors();
        std::vector<std::string> names;
        for (const auto& p : m.parameters()) {
            names.push_back(p.name);
        }
        for (Direction d : {Direction::map2image, Direction::image2map}) {
            const auto items = make_context_batch<double>({MapKind::edge, d}, 2, 3, 8);
            const auto report = grad_check_params(
                [&] {
                    Rng r1(4), r2(5);
                    const auto lt = training_loss<double>(fn, Items(items), s, plan, r1);
                    const auto lf = feedback_loss<double>(fn, Items(items), s, cfg, plan, r2);
                    return total_loss(lt, lf, cfg);
                },
                params, names, 1e-5, 2);
            CAPTURE(report.worst_tensor);
            CHECK(report.max_rel_error < 1e-4);
        }
    }
}
