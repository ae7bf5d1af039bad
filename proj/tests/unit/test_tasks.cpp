// Copyright 2026 The usdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "test_util.hpp"
#include "usdiff/grad_check.hpp"
#include "usdiff/metrics.hpp"
#include "usdiff/ops.hpp"
#include "usdiff/tasks.hpp"

using namespace usdiff;
using namespace usdiff::testing;

TEST_SUITE("tasks")
{
    TEST_CASE("gen_scene is deterministic")
    {
        const auto a = gen_scene<float>(123, 32);
        const auto b = gen_scene<float>(123, 32);
        CHECK(bit_equal(a.image.values(), b.image.values()));
        CHECK(bit_equal(a.edge_map.values(), b.edge_map.values()));
        CHECK(bit_equal(a.seg_map.values(), b.seg_map.values()));
        CHECK(bit_equal(a.depth_map.values(), b.depth_map.values()));
        CHECK_FALSE(bit_equal(a.image.values(), gen_scene<float>(124, 32).image.values()));
    }

    TEST_CASE("empty inventory renders background only")
    {
        SceneSpec spec = random_scene_spec(5, 32);
        spec.shapes.clear();
        const auto sc = render_scene<double>(spec, 32);
        for (double v : sc.edge_map.values()) {
            CHECK(v == -1.0);
        }
        for (double v : sc.seg_map.values()) {
            CHECK(v == -1.0);
        }
    }

    TEST_CASE("seg coverage matches analytic area")
    {
        const int size = 64;
        for (ShapeKind kind : {ShapeKind::circle, ShapeKind::rectangle, ShapeKind::triangle}) {
            SceneShape sh;
            sh.kind = kind;
            sh.color = {0.5, 0.5, 0.5};
            sh.cx = 31.3;
            sh.cy = 30.8;
            sh.size = 14.0;
            sh.aspect = 0.7;
            sh.rotation = 0.4;
            SceneSpec spec;
            spec.shapes.push_back(sh);
            const auto sc = render_scene<double>(spec, size);
            int covered = 0;
            for (int p = 0; p < size * size; ++p) {
                covered += sc.seg_map.values()[static_cast<size_t>(p)] != -1.0;
            }
            double area = 0.0;
            switch (kind) {
            case ShapeKind::circle:
                area = std::numbers::pi * 14.0 * 14.0;
                break;
            case ShapeKind::rectangle:
                area = 4.0 * 14.0 * 14.0 * 0.7;
                break;
            case ShapeKind::triangle:
                area = 3.0 * std::sqrt(3.0) / 4.0 * 14.0 * 14.0;
                break;
            }
            CHECK(sh.area() == doctest::Approx(area).epsilon(1e-12));
            CHECK(std::abs(covered - area) / area < 0.05);
        }
    }

    TEST_CASE("edge annotator on constant and step images")
    {
        const auto flat = Tensor<double>::full({3, 16, 16}, 0.3);
        const auto flat_edges = annotate(flat, MapKind::edge);
        for (double v : flat_edges.values()) {
            CHECK(v == -1.0);
        }
        std::vector<double> step(3 * 16 * 16);
        for (int c = 0; c < 3; ++c) {
            for (int y = 0; y < 16; ++y) {
                for (int x = 0; x < 16; ++x) {
                    step[static_cast<size_t>((c * 16 + y) * 16 + x)] = x < 8 ? -1.0 : 1.0;
                }
            }
        }
        const auto mag = sobel_magnitude(Tensor<double>::from({3, 16, 16}, step));
        // Sobel of a contrast-2 step: |gx| = (1 + 2 + 1) * 2 = 8 at columns 7 and 8.
        const double floor = AnnotatorOptions{}.edge_floor;
        const double peak = std::sqrt(64.0 + floor) - std::sqrt(floor);
        for (int y = 0; y < 16; ++y) {
            for (int x = 0; x < 16; ++x) {
                const double v = mag.values()[static_cast<size_t>(y * 16 + x)];
                if (x == 7 || x == 8) {
                    CHECK(v == doctest::Approx(peak).epsilon(1e-12));
                } else {
                    CHECK(v < peak);
                    CHECK(v == doctest::Approx(0.0).epsilon(1e-12));
                }
            }
        }
    }

    TEST_CASE("seg annotator is idempotent up to band softness")
    {
        const AnnotatorOptions opt;
        const double step = 2.0 / (opt.seg_levels - 1);
        const double softness = 2.0 * step / (1.0 + std::exp(step / 2.0 / opt.seg_temperature));
        const auto once = annotate(gen_scene<double>(9, 32).image, MapKind::seg, opt);
        std::vector<double> levels(once.values());
        for (auto& v : levels) {
            v = -1.0 + step * std::round((v + 1.0) / step);
        }
        const auto posterized = Tensor<double>::from(once.shape(), levels);
        const auto twice = annotate(posterized, MapKind::seg, opt);
        for (size_t i = 0; i < levels.size(); ++i) {
            CHECK(std::abs(twice.values()[i] - levels[i]) <= softness);
        }
    }

    TEST_CASE("annotators are differentiable")
    {
        Rng rng(4);
        const auto x = rand_t({1, 3, 6, 6}, rng, 0.5);
        for (MapKind k : {MapKind::edge, MapKind::seg, MapKind::depth, MapKind::canny_like, MapKind::scribble_like}) {
            const auto m = rand_t({1, 3, 6, 6}, rng, 0.5);
            CAPTURE(to_string(k));
            CHECK(grad_check([&](const Tensor<double>& v) { return mse(annotate(v, k), m); }, x, 1e-5) < 1e-4);
        }
    }

    TEST_CASE("context batch construction")
    {
        const TaskKind i2m{MapKind::edge, Direction::image2map};
        const TaskKind m2i{MapKind::edge, Direction::map2image};
        const auto a = make_context_batch<double>(i2m, 4, 7, 32);
        const auto b = make_context_batch<double>(m2i, 4, 7, 32);
        REQUIRE(a.size() == 4);
        for (size_t i = 0; i < a.size(); ++i) {
            CHECK(a[i].example_seed != a[i].scene_seed);
            CHECK(bit_equal(a[i].target.values(), annotate(a[i].query, MapKind::edge).values()));
            CHECK(bit_equal(a[i].query.values(), b[i].target.values()));
            CHECK(bit_equal(a[i].target.values(), b[i].query.values()));
            CHECK(bit_equal(a[i].example_src.values(), b[i].example_tgt.values()));
            CHECK(bit_equal(a[i].example_tgt.values(), b[i].example_src.values()));
        }
    }

    TEST_CASE("held-out kinds are generated but refused for training")
    {
        const TaskKind canny{MapKind::canny_like, Direction::image2map};
        const TaskKind scribble{MapKind::scribble_like, Direction::map2image};
        CHECK(make_context_batch<float>(canny, 2, 1, 16, Split::eval).size() == 2);
        CHECK_THROWS_AS(make_training_batch<float>(canny, 2, 1, 16), ContractError);
        CHECK_THROWS_AS(make_training_batch<float>(scribble, 2, 1, 16), ContractError);
        for (const auto& t : training_tasks()) {
            CHECK_FALSE(t.held_out());
        }
        CHECK(training_tasks().size() == 6);
    }

    TEST_CASE("image2map targets equal the re-annotated query")
    {
        for (MapKind k : {MapKind::edge, MapKind::seg, MapKind::depth}) {
            const auto batch = make_context_batch<float>({k, Direction::image2map}, 50, 3, 32);
            for (const auto& item : batch) {
                CHECK(rmse(item.target, annotate(item.query, k)) == 0.0);
            }
        }
    }

    TEST_CASE("sub-16 sizes are rendered at 16 and pooled")
    {
        const auto batch = make_context_batch<double>({MapKind::depth, Direction::image2map}, 2, 5, 8);
        CHECK(batch[0].query.shape() == Shape{3, 8, 8});
        CHECK(bit_equal(batch[0].target.values(), annotate(batch[0].query, MapKind::depth).values()));
        CHECK_THROWS_AS(make_context_batch<double>({MapKind::depth, Direction::image2map}, 2, 5, 12), ContractError);
    }
}
