// Copyright 2026 The usdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "test_util.hpp"
#include "usdiff/grad_check.hpp"
#include "usdiff/ops.hpp"

using namespace usdiff;
using namespace usdiff::testing;

namespace {

// Direct six-loop convolution.
std::vector<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b, int stride,
                               int pad)
{
    const auto n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const auto co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const auto ho = (h + 2 * pad - kh) / stride + 1, wo = (wd + 2 * pad - kw) / stride + 1;
    std::vector<double> out(static_cast<size_t>(n * co * ho * wo));
    const auto& xv = x.values();
    const auto& wv = w.values();
    for (int64_t a = 0; a < n; ++a) {
        for (int64_t o = 0; o < co; ++o) {
            for (int64_t i = 0; i < ho; ++i) {
                for (int64_t j = 0; j < wo; ++j) {
                    double acc = b.defined() ? b.values()[static_cast<size_t>(o)] : 0.0;
                    for (int64_t c = 0; c < ci; ++c) {
                        for (int64_t u = 0; u < kh; ++u) {
                            for (int64_t v = 0; v < kw; ++v) {
                                const int64_t y = i * stride - pad + u, z = j * stride - pad + v;
                                if (y < 0 || y >= h || z < 0 || z >= wd) {
                                    continue;
                                }
                                acc += xv[static_cast<size_t>(((a * ci + c) * h + y) * wd + z)] *
                                       wv[static_cast<size_t>(((o * ci + c) * kh + u) * kw + v)];
                            }
                        }
                    }
                    out[static_cast<size_t>(((a * co + o) * ho + i) * wo + j)] = acc;
                }
            }
        }
    }
    return out;
}

double max_rel_diff(const std::vector<double>& a, const std::vector<double>& b)
{
    REQUIRE(a.size() == b.size());
    double m = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(a[i] - b[i]) / std::max(1.0, std::abs(b[i])));
    }
    return m;
}

} // namespace

TEST_SUITE("autodiff")
{
    TEST_CASE("conv2d identity kernel and constant bias")
    {
        const auto ones = Tensor<double>::full({1, 1, 3, 3}, 1.0);
        const auto y = conv2d(ones, Tensor<double>::full({1, 1, 1, 1}, 1.0), Tensor<double>::zeros({1}), 1, 0);
        CHECK(y.shape() == Shape{1, 1, 3, 3});
        for (double v : y.values()) {
            CHECK(v == 1.0);
        }

        Rng rng(4);
        const auto x = rand_t({2, 3, 5, 5}, rng);
        const auto z = conv2d(x, Tensor<double>::zeros({4, 3, 3, 3}), Tensor<double>::full({4}, 0.75), 1, 1);
        for (double v : z.values()) {
            CHECK(v == 0.75);
        }
    }

    TEST_CASE("conv2d matches the loop oracle")
    {
        Rng rng(11);
        {
            const auto x = rand_t({1, 2, 4, 4}, rng);
            const auto w = rand_t({3, 2, 3, 3}, rng);
            const auto b = rand_t({3}, rng);
            CHECK(max_rel_diff(conv2d(x, w, b, 1, 1).values(), naive_conv(x, w, b, 1, 1)) < 1e-6);
        }
        for (int c = 0; c < 60; ++c) {
            const int64_t n = rng.uniform_int(1, 3), ci = rng.uniform_int(1, 4), co = rng.uniform_int(1, 5);
            const int k = static_cast<int>(rng.uniform_int(0, 1)) * 2 + 1;
            const int stride = static_cast<int>(rng.uniform_int(1, 2));
            const int pad = static_cast<int>(rng.uniform_int(0, k / 2));
            const int64_t h = rng.uniform_int(k, 9), w = rng.uniform_int(k, 9);
            const auto x = rand_t({n, ci, h, w}, rng);
            const auto wt = rand_t({co, ci, k, k}, rng);
            const auto b = c % 3 == 0 ? Tensor<double>{} : rand_t({co}, rng);
            CAPTURE(c);
            CHECK(max_rel_diff(conv2d(x, wt, b, stride, pad).values(), naive_conv(x, wt, b, stride, pad)) < 1e-6);
        }
    }

    TEST_CASE("elementary results")
    {
        Rng rng(2);
        const auto a = rand_t({3, 4}, rng);
        CHECK(mse(a, a).item() == 0.0);
        CHECK(silu(Tensor<double>::scalar(0.0)).item() == 0.0);
    }

    TEST_CASE("silu is monotone on [-6,6] except below its minimum")
    {
        // The global minimum of x * sigmoid(x) sits near x = -1.2785; on the
        // tested grid the function decreases to it and increases afterwards.
        std::vector<double> v;
        for (int i = 0; i <= 120; ++i) {
            v.push_back(silu(Tensor<double>::scalar(-6.0 + 0.1 * i)).item());
        }
        int turns = 0;
        for (size_t i = 2; i < v.size(); ++i) {
            turns += ((v[i] - v[i - 1]) > 0) != ((v[i - 1] - v[i - 2]) > 0);
        }
        CHECK(turns == 1);
    }

    TEST_CASE("group_norm normalizes each group")
    {
        Rng rng(5);
        const auto x = rand_t({2, 8, 5, 5}, rng, 3.0);
        const auto y = group_norm(x, Tensor<double>::full({8}, 1.0), Tensor<double>::zeros({8}), 4);
        const auto& v = y.values();
        const size_t group = 2 * 25;
        for (size_t g = 0; g < v.size() / group; ++g) {
            double m = 0.0, q = 0.0;
            for (size_t i = 0; i < group; ++i) {
                m += v[g * group + i];
            }
            m /= group;
            for (size_t i = 0; i < group; ++i) {
                q += (v[g * group + i] - m) * (v[g * group + i] - m);
            }
            q /= group;
            CHECK(std::abs(m) < 1e-5);
            CHECK(std::abs(q - 1.0) < 1e-4);
        }
    }

    TEST_CASE("backward basics")
    {
        auto w = Tensor<double>::parameter({1}, {3.0});
        backward(mse(w, Tensor<double>::zeros({1})));
        CHECK(w.grad()[0] == doctest::Approx(6.0).epsilon(1e-15));

        auto unused = Tensor<double>::parameter({2}, {1.0, 2.0});
        auto used = Tensor<double>::parameter({2}, {1.0, 2.0});
        backward(sum(square(used)));
        CHECK(unused.grad() == std::vector<double>{0.0, 0.0});
    }

    TEST_CASE("second backward over a consumed graph is an error")
    {
        auto w = Tensor<double>::parameter({2}, {1.0, 2.0});
        const auto loss = sum(square(w));
        backward(loss);
        CHECK_THROWS_AS(backward(loss), ContractError);
    }

    TEST_CASE("no-grad mode records nothing")
    {
        auto w = Tensor<double>::parameter({2}, {1.0, 2.0});
        NoGradGuard guard;
        const auto y = square(w);
        CHECK_FALSE(y.requires_grad());
    }

    TEST_CASE("non-finite results raise")
    {
        const auto x = Tensor<double>::from({2}, {1e300, 1.0});
        CHECK_THROWS_AS(square(x), NumericError);
    }

    TEST_CASE("grad_check fixtures")
    {
        Rng rng(8);
        const auto p = rand_t({3, 4}, rng);
        CHECK(grad_check([](const Tensor<double>& x) { return sum(x); }, p, 1e-3) < 1e-12);

        const auto w = rand_t({2, 2, 3, 3}, rng);
        const auto target = rand_t({1, 2, 4, 4}, rng);
        const auto x0 = rand_t({1, 2, 4, 4}, rng);
        CHECK(grad_check([&](const Tensor<double>& x) { return mse(conv2d(x, w, Tensor<double>{}, 1, 1), target); }, x0,
                         1e-3) < 1e-4);

        // square with a deliberately wrong derivative (x instead of 2x).
        const auto bad_square = [](const Tensor<double>& x) {
            std::vector<double> v(x.values());
            for (auto& e : v) {
                e *= e;
            }
            return Tensor<double>::make_result(x.shape(), std::move(v), "bad_square", {x}, [x](detail::Node<double>& self) {
                auto& g = x.node()->grad_buffer();
                for (size_t i = 0; i < g.size(); ++i) {
                    g[i] += self.grad[i] * x.values()[i];
                }
            });
        };
        CHECK(grad_check([&](const Tensor<double>& x) { return sum(bad_square(x)); }, p, 1e-3) > 1e-2);
    }

    TEST_CASE("primitive catalog passes finite differences")
    {
        using Fn = std::function<Tensor<double>(const Tensor<double>&, Rng&)>;
        struct Case {
            std::string name;
            Shape shape;
            Fn f;
        };
        const auto fixed = [](Rng& r, const Shape& s) { return rand_t(s, r); };
        const std::vector<Case> cases{
            {"add", {2, 3}, [&](const Tensor<double>& x, Rng& r) { return sum(square(add(x, fixed(r, {2, 3})))); }},
            {"sub", {2, 3}, [&](const Tensor<double>& x, Rng& r) { return sum(square(sub(fixed(r, {2, 3}), x))); }},
            {"mul", {2, 3}, [&](const Tensor<double>& x, Rng& r) { return sum(mul(x, mul(x, fixed(r, {2, 3})))); }},
            {"scale", {5}, [](const Tensor<double>& x, Rng&) { return sum(square(scale(x, -1.7))); }},
            {"affine", {5}, [](const Tensor<double>& x, Rng&) { return sum(square(affine(x, 0.3, 2.0))); }},
            {"silu", {2, 4}, [&](const Tensor<double>& x, Rng& r) { return sum(mul(silu(x), fixed(r, {2, 4}))); }},
            {"sigmoid", {2, 4}, [&](const Tensor<double>& x, Rng& r) { return sum(mul(sigmoid(x), fixed(r, {2, 4}))); }},
            {"tanh", {2, 4}, [&](const Tensor<double>& x, Rng& r) { return sum(mul(tanh(x), fixed(r, {2, 4}))); }},
            {"sqrt_eps", {6}, [](const Tensor<double>& x, Rng&) { return sum(sqrt_eps(square(x), 0.01)); }},
            {"clamp", {6}, [](const Tensor<double>& x, Rng&) { return sum(square(clamp(scale(x, 0.5), -0.3, 0.3))); }},
            {"group_norm", {2, 4, 3, 3},
             [&](const Tensor<double>& x, Rng& r) {
                 return sum(mul(group_norm(x, fixed(r, {4}), fixed(r, {4}), 2), fixed(r, {2, 4, 3, 3})));
             }},
            {"concat_channels", {1, 2, 2, 2},
             [&](const Tensor<double>& x, Rng& r) {
                 const std::vector<Tensor<double>> parts{x, fixed(r, {1, 1, 2, 2}), square(x)};
                 return sum(mul(concat_channels<double>(parts), fixed(r, {1, 5, 2, 2})));
             }},
            {"concat_batch", {1, 2, 2, 2},
             [&](const Tensor<double>& x, Rng& r) {
                 const std::vector<Tensor<double>> parts{square(x), x};
                 return sum(mul(concat_batch<double>(parts), fixed(r, {2, 2, 2, 2})));
             }},
            {"slice_batch", {3, 2, 2},
             [&](const Tensor<double>& x, Rng& r) { return sum(mul(slice_batch(x, 1, 2), fixed(r, {2, 2, 2}))); }},
            {"upsample2x", {1, 2, 3, 3},
             [&](const Tensor<double>& x, Rng& r) { return sum(mul(upsample2x(x), fixed(r, {1, 2, 6, 6}))); }},
            {"avgpool2x", {1, 2, 4, 4},
             [&](const Tensor<double>& x, Rng& r) { return sum(mul(avgpool2x(x), fixed(r, {1, 2, 2, 2}))); }},
            {"pad_replicate", {1, 1, 3, 3},
             [&](const Tensor<double>& x, Rng& r) { return sum(mul(pad_replicate(x, 1), fixed(r, {1, 1, 5, 5}))); }},
            {"linear", {3, 4},
             [&](const Tensor<double>& x, Rng& r) { return sum(square(linear(x, fixed(r, {5, 4}), fixed(r, {5})))); }},
            {"add_channel_bias", {2, 3},
             [&](const Tensor<double>& x, Rng& r) {
                 return sum(square(add_channel_bias(fixed(r, {2, 3, 2, 2}), x)));
             }},
            {"mul_per_sample", {2, 3, 2},
             [](const Tensor<double>& x, Rng&) {
                 const std::vector<double> c{0.5, -2.0};
                 return sum(square(mul_per_sample(x, std::span<const double>(c))));
             }},
            {"embedding", {4, 3},
             [&](const Tensor<double>& x, Rng& r) {
                 const std::vector<int> ids{2, 0, 2};
                 return sum(mul(embedding(x, std::span<const int>(ids)), fixed(r, {3, 3})));
             }},
            {"conv2d input", {1, 2, 5, 5},
             [&](const Tensor<double>& x, Rng& r) {
                 return sum(mul(conv2d(x, fixed(r, {3, 2, 3, 3}), fixed(r, {3}), 2, 1), fixed(r, {1, 3, 3, 3})));
             }},
            {"conv2d weight", {3, 2, 3, 3},
             [&](const Tensor<double>& w, Rng& r) {
                 return sum(mul(conv2d(fixed(r, {2, 2, 4, 4}), w, Tensor<double>{}, 1, 1), fixed(r, {2, 3, 4, 4})));
             }},
            {"conv2d bias", {3},
             [&](const Tensor<double>& b, Rng& r) {
                 return sum(square(conv2d(fixed(r, {1, 2, 3, 3}), fixed(r, {3, 2, 1, 1}), b, 1, 0)));
             }},
            {"mean", {7}, [](const Tensor<double>& x, Rng&) { return mean(square(x)); }},
            {"mse", {2, 3}, [&](const Tensor<double>& x, Rng& r) { return mse(x, fixed(r, {2, 3})); }},
            {"reshape", {2, 3}, [&](const Tensor<double>& x, Rng& r) { return sum(mul(x.reshape({3, 2}), fixed(r, {3, 2}))); }},
        };
        for (const auto& c : cases) {
            for (uint64_t seed = 0; seed < 5; ++seed) {
                Rng point_rng(100 + seed);
                const auto p = rand_t(c.shape, point_rng);
                const double err = grad_check(
                    [&](const Tensor<double>& x) {
                        Rng r(seed);
                        return c.f(x, r);
                    },
                    p, 1e-4);
                CAPTURE(c.name);
                CAPTURE(seed);
                CHECK(err < 1e-4);
            }
        }
    }

    TEST_CASE("determinism")
    {
        const auto run = [] {
            Rng rng(77);
            const auto x = rand_t({2, 3, 6, 6}, rng);
            const auto w = rand_t({4, 3, 3, 3}, rng);
            return group_norm(silu(conv2d(x, w, Tensor<double>{}, 1, 1)), Tensor<double>::full({4}, 1.0),
                              Tensor<double>::zeros({4}), 2)
                .values();
        };
        CHECK(bit_equal(run(), run()));
    }
}
