// Copyright 2026 The usdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "test_util.hpp"
#include "usdiff/diffusion.hpp"
#include "usdiff/ops.hpp"

using namespace usdiff;
using namespace usdiff::testing;

namespace {

// Hand-set schedule for scalar formula checks; index 0 is the clean state.
NoiseSchedule fixture(std::vector<double> alpha_bar, std::vector<double> beta)
{
    NoiseSchedule s;
    s.T = static_cast<int>(alpha_bar.size()) - 1;
    s.beta_start = 1e-4;
    s.beta_end = 0.02;
    s.alpha_bar = alpha_bar;
    s.beta = beta;
    for (double b : beta) {
        s.alpha.push_back(1.0 - b);
    }
    s.beta_tilde = beta;
    return s;
}

Tensor<double> scalar1(double v) { return Tensor<double>::from({1}, {v}); }

// eps that maps x0 to x_t at step t.
Tensor<double> true_eps(const Tensor<double>& x_t, const Tensor<double>& x0, int t, const NoiseSchedule& s)
{
    const double ab = s.alpha_bar[t];
    return scale(sub(x_t, scale(x0, std::sqrt(ab))), 1.0 / std::sqrt(1.0 - ab));
}

} // namespace

TEST_SUITE("schedule")
{
    TEST_CASE("alpha_bar values")
    {
        const auto s = build_schedule(1000, 1e-4, 0.02);
        CHECK(alpha_bar_at(s, 0) == 1.0);
        CHECK(alpha_bar_at(s, 1) == doctest::Approx(0.9999).epsilon(1e-15));
        CHECK(alpha_bar_at(s, 1) == 1.0 - s.beta[1]);
        long double prod = 1.0L;
        for (int i = 1; i <= 1000; ++i) {
            prod *= 1.0L - (1e-4L + (0.02L - 1e-4L) * (i - 1) / 999.0L);
        }
        CHECK(alpha_bar_at(s, 1000) == doctest::Approx(static_cast<double>(prod)).epsilon(1e-10));
        CHECK(alpha_bar_at(s, 1000) == doctest::Approx(4.04e-5).epsilon(0.01));
        CHECK_THROWS_AS(alpha_bar_at(s, 1001), ContractError);
    }

    TEST_CASE("alpha_bar is strictly decreasing and reproducible")
    {
        const auto s = build_schedule(1000, 1e-4, 0.02);
        for (int t = 1; t <= 1000; ++t) {
            CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);
        }
        std::vector<double> again{1.0};
        for (int t = 1; t <= 1000; ++t) {
            again.push_back(again.back() * (1.0 - s.beta[t]));
        }
        CHECK(bit_equal(again, s.alpha_bar));
    }

    TEST_CASE("plan examples")
    {
        const auto s = build_schedule();
        CHECK(select_steps(s, 10, StepStrategy::uniform()).steps ==
              std::vector<int>{100, 200, 300, 400, 500, 600, 700, 800, 900, 1000});
        std::vector<int> expected;
        for (int j = 1; j <= 10; ++j) {
            expected.push_back(static_cast<int>(std::lround(1000.0 * std::pow(j / 10.0, 0.5))));
        }
        CHECK(expected == std::vector<int>{316, 447, 548, 632, 707, 775, 837, 894, 949, 1000});
        CHECK(select_steps(s, 10, StepStrategy::power(0.5)).steps == expected);
        for (const auto& st : {StepStrategy::uniform(), StepStrategy::power(0.3), StepStrategy::alpha_quantile()}) {
            const auto p = select_steps(s, 1000, st);
            for (int t = 1; t <= 1000; ++t) {
                REQUIRE(p.steps[t - 1] == t);
            }
        }
    }

    TEST_CASE("plan invariants")
    {
        const auto s = build_schedule();
        for (const auto& st : {StepStrategy::uniform(), StepStrategy::power(0.3), StepStrategy::power(0.5),
                               StepStrategy::power(0.7), StepStrategy::power(0.9), StepStrategy::alpha_quantile()}) {
            for (int k = 1; k <= 100; ++k) {
                const auto p = select_steps(s, k, st);
                CAPTURE(to_string(st));
                CAPTURE(k);
                REQUIRE(p.K() == k);
                CHECK(p.steps.back() == 1000);
                for (int j = 1; j < k; ++j) {
                    CHECK(p.steps[j] > p.steps[j - 1]);
                }
                if (st.kind == StepStrategyKind::power && st.gamma < 1.0 && k >= 3) {
                    for (int j = 2; j < k; ++j) {
                        CHECK(p.steps[j] - p.steps[j - 1] <= p.steps[j - 1] - p.steps[j - 2]);
                    }
                }
            }
        }
    }

    TEST_CASE("strategy and plan text round-trip")
    {
        for (const auto& st : {StepStrategy::uniform(), StepStrategy::power(0.3), StepStrategy::alpha_quantile()}) {
            CHECK(parse_strategy(to_string(st)) == st);
        }
        const auto s = build_schedule(500, 2e-4, 0.03);
        const auto p = select_steps(s, 12, StepStrategy::power(0.7));
        KeyValues kv;
        write_kv(kv, "schedule.", s);
        write_kv(kv, "plan.", p);
        const auto kv2 = parse_kv(format_kv(kv));
        CHECK(read_plan_kv(kv2, "plan.") == p);
        const auto s2 = read_schedule_kv(kv2, "schedule.");
        CHECK(bit_equal(s2.alpha_bar, s.alpha_bar));
        CHECK_THROWS(parse_strategy("power(x)"));
    }
}

TEST_SUITE("diffusion")
{
    TEST_CASE("forward_sample examples")
    {
        const auto s = fixture({1.0, 0.25}, {0.0, 0.75});
        CHECK(forward_sample(scalar1(1.0), 1, scalar1(0.5), s).item() ==
              doctest::Approx(0.5 + std::sqrt(0.75) * 0.5).epsilon(1e-14));
        CHECK(forward_sample(scalar1(1.0), 1, scalar1(0.5), s).item() == doctest::Approx(0.93301).epsilon(1e-5));
        CHECK(forward_sample(scalar1(0.8), 1, scalar1(0.0), s).item() == doctest::Approx(0.4).epsilon(1e-15));
        const auto full = build_schedule();
        Rng rng(1);
        const auto x0 = rand_t({4, 3}, rng);
        CHECK(forward_sample(x0, 0, rand_t({4, 3}, rng), full).values() == x0.values());
    }

    TEST_CASE("predict_x0 examples and round trip")
    {
        const auto s = fixture({1.0, 0.25}, {0.0, 0.75});
        const double x_t = 0.5 + std::sqrt(0.75) * 0.5;
        CHECK(predict_x0(scalar1(x_t), scalar1(0.5), 1, s).item() == doctest::Approx(1.0).epsilon(1e-14));
        CHECK(predict_x0(scalar1(0.6), scalar1(0.0), 1, s).item() == doctest::Approx(1.2).epsilon(1e-14));

        const auto full = build_schedule();
        Rng rng(3);
        const auto x0 = rand_t({2, 3, 4, 4}, rng);
        const auto eps = rand_t({2, 3, 4, 4}, rng);
        for (int t : select_steps(full, 10, StepStrategy::power(0.5)).steps) {
            const auto back = predict_x0(forward_sample(x0, t, eps, full), eps, t, full);
            for (size_t i = 0; i < back.values().size(); ++i) {
                CHECK(back.values()[i] == doctest::Approx(x0.values()[i]).epsilon(1e-5));
            }
        }
    }

    TEST_CASE("forward marginal statistics")
    {
        const auto s = build_schedule();
        const double x0v = 0.7;
        const int n = 10000;
        for (int t : {100, 316, 632, 894, 1000}) {
            Rng rng(t);
            const auto x0 = Tensor<double>::full({n}, x0v);
            const auto x_t = forward_sample(x0, t, Tensor<double>::randn({n}, rng), s);
            double m = 0.0, q = 0.0;
            for (double v : x_t.values()) {
                m += v;
            }
            m /= n;
            for (double v : x_t.values()) {
                q += (v - m) * (v - m);
            }
            q /= n - 1;
            const double var = 1.0 - s.alpha_bar[t];
            CAPTURE(t);
            CHECK(std::abs(m - std::sqrt(s.alpha_bar[t]) * x0v) < 3.0 * std::sqrt(var / n));
            CHECK(std::abs(q / var - 1.0) < 0.05);
        }
    }

    TEST_CASE("ddim_step examples")
    {
        const auto s = fixture({1.0, 0.25, 0.04}, {0.0, 0.75, 0.84});
        const double x0p = (0.9 - std::sqrt(0.96) * 0.5) / 0.2;
        CHECK(x0p == doctest::Approx(2.0505).epsilon(1e-4));
        const double out = ddim_step(scalar1(0.9), scalar1(0.5), 2, 1, s).item();
        CHECK(out == doctest::Approx(std::sqrt(0.25) * x0p + std::sqrt(0.75) * 0.5).epsilon(1e-14));
        CHECK(out == doctest::Approx(1.4583).epsilon(1e-4));
        CHECK(ddim_step(scalar1(0.9), scalar1(0.5), 2, 0, s).item() ==
              doctest::Approx(predict_x0(scalar1(0.9), scalar1(0.5), 2, s).item()).epsilon(1e-15));
    }

    TEST_CASE("ddim_step inverts exactly and composes")
    {
        const auto s = build_schedule();
        Rng rng(9);
        const auto x0 = rand_t({2, 5}, rng);
        const auto eps = rand_t({2, 5}, rng);
        const auto x_t = forward_sample(x0, 800, eps, s);
        for (int t_to : {0, 1, 300, 799}) {
            const auto got = ddim_step(x_t, eps, 800, t_to, s);
            const auto want = forward_sample(x0, t_to, eps, s);
            for (size_t i = 0; i < got.values().size(); ++i) {
                CHECK(got.values()[i] == doctest::Approx(want.values()[i]).epsilon(1e-10));
            }
        }
        const auto oracle = [&](const Tensor<double>& x, int t) { return true_eps(x, x0, t, s); };
        const auto mid = ddim_step(x_t, oracle(x_t, 800), 800, 450, s);
        const auto two = ddim_step(mid, oracle(mid, 450), 450, 120, s);
        const auto one = ddim_step(x_t, oracle(x_t, 800), 800, 120, s);
        for (size_t i = 0; i < one.values().size(); ++i) {
            CHECK(two.values()[i] == doctest::Approx(one.values()[i]).epsilon(1e-5));
        }
    }

    TEST_CASE("ancestral_step examples")
    {
        const auto s = fixture({1.0, 0.5}, {0.0, 0.01});
        Rng rng(1);
        const double want = (1.0 - 0.01 / std::sqrt(0.5) * 0.2) / std::sqrt(0.99);
        CHECK(want == doctest::Approx(1.00217).epsilon(1e-4));
        CHECK(ancestral_step(scalar1(1.0), scalar1(0.2), 1, s, rng).item() == doctest::Approx(want).epsilon(1e-14));
        CHECK(ancestral_step(scalar1(1.0), scalar1(0.0), 1, s, rng).item() ==
              doctest::Approx(1.0 / std::sqrt(0.99)).epsilon(1e-14));
        Rng a(5), b(6);
        CHECK(ancestral_step(scalar1(1.0), scalar1(0.2), 1, s, a).item() ==
              ancestral_step(scalar1(1.0), scalar1(0.2), 1, s, b).item());
    }

    TEST_CASE("sample calls the denoiser once per plan step")
    {
        const auto s = build_schedule();
        for (int k : {1, 10, 37, 100}) {
            int calls = 0;
            std::vector<int> seen;
            const EpsFn<double> fn = [&](const Tensor<double>& x, int t) {
                ++calls;
                seen.push_back(t);
                return Tensor<double>::zeros(x.shape());
            };
            Rng rng(2);
            const auto plan = select_steps(s, k, StepStrategy::power(0.5));
            const auto r = sample<double>(fn, plan, {3, 2}, s, rng);
            CHECK(calls == k);
            CHECK(r.denoiser_calls == k);
            CHECK(seen.front() == 1000);
            CHECK(seen == std::vector<int>(plan.steps.rbegin(), plan.steps.rend()));
        }
    }

    TEST_CASE("training_loss oracles")
    {
        const auto s = build_schedule();
        const auto plan = select_steps(s, 10, StepStrategy::power(0.5));
        const auto batch = make_context_batch<double>({MapKind::depth, Direction::map2image}, 4, 3, 16);
        const auto items = std::span<const ContextSample<double>>(batch);

        // Exact eps recovered from x_t and the known targets.
        const DenoiseFn<double> oracle = [&](const Tensor<double>& x_t, std::span<const int> t,
                                             std::span<const ContextSample<double>> ctx) {
            std::vector<Tensor<double>> parts;
            for (size_t i = 0; i < ctx.size(); ++i) {
                const auto xi = slice_batch(x_t, static_cast<int64_t>(i), 1).reshape(ctx[i].target.shape());
                parts.push_back(true_eps(xi, ctx[i].target, t[i], s).reshape({1, 3, 16, 16}));
            }
            return concat_batch<double>(parts);
        };
        Rng rng(4);
        CHECK(training_loss(oracle, items, s, plan, rng).item() < 1e-20);

        const DenoiseFn<double> zeros = [](const Tensor<double>& x_t, std::span<const int>,
                                           std::span<const ContextSample<double>>) {
            return Tensor<double>::zeros(x_t.shape());
        };
        const auto big = make_context_batch<double>({MapKind::depth, Direction::map2image}, 6, 3, 16);  // 4608 elements
        Rng rng2(5);
        const double l = training_loss(zeros, std::span<const ContextSample<double>>(big), s, plan, rng2).item();
        CHECK(l == doctest::Approx(1.0).epsilon(0.05));
        CHECK(l >= 0.0);
    }

    TEST_CASE("training_loss timesteps follow the plan")
    {
        const auto s = build_schedule();
        const auto plan = select_steps(s, 10, StepStrategy::power(0.5));
        const auto batch = make_context_batch<double>({MapKind::edge, Direction::image2map}, 8, 1, 16);
        std::vector<int> seen;
        const DenoiseFn<double> spy = [&](const Tensor<double>& x_t, std::span<const int> t,
                                          std::span<const ContextSample<double>>) {
            seen.insert(seen.end(), t.begin(), t.end());
            return Tensor<double>::zeros(x_t.shape());
        };
        Rng rng(1);
        for (int i = 0; i < 20; ++i) {
            training_loss(spy, std::span<const ContextSample<double>>(batch), s, plan, rng);
        }
        for (int t : seen) {
            CHECK(std::find(plan.steps.begin(), plan.steps.end(), t) != plan.steps.end());
        }
        seen.clear();
        for (int i = 0; i < 20; ++i) {
            training_loss(spy, std::span<const ContextSample<double>>(batch), s, plan, rng, {TimestepSampling::full});
        }
        int off_plan = 0;
        for (int t : seen) {
            off_plan += std::find(plan.steps.begin(), plan.steps.end(), t) == plan.steps.end();
        }
        CHECK(off_plan > 0);
    }
}
