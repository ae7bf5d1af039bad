// Copyright 2026 The usdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "usdiff/tensor.hpp"

namespace usdiff {

enum class MapKind { edge, seg, depth, canny_like, scribble_like };
enum class Direction { map2image, image2map };

std::string to_string(MapKind k);
std::string to_string(Direction d);
MapKind parse_map_kind(const std::string& s);
Direction parse_direction(const std::string& s);

struct TaskKind {
    MapKind kind = MapKind::edge;
    Direction direction = Direction::image2map;

    /// canny_like / scribble_like are generated for generalization tests only.
    bool held_out() const { return kind == MapKind::canny_like || kind == MapKind::scribble_like; }
    /// Adapter branch index in [0, 6): 2 * kind + direction. Held-out kinds
    /// route through the edge branches.
    int branch() const;

    bool operator==(const TaskKind&) const = default;
};

/// "edge/image2map" etc.
std::string to_string(const TaskKind& t);
TaskKind parse_task(const std::string& s);

/// The six training tasks in branch order.
std::vector<TaskKind> training_tasks();

/// One in-context item. Images are [3,H,W] in [-1,1].
template <typename T>
struct ContextSample {
    Tensor<T> example_src;
    Tensor<T> example_tgt;
    Tensor<T> query;
    Tensor<T> target;
    TaskKind task;
    uint64_t example_seed = 0;
    uint64_t scene_seed = 0;  // query/target scene
};

enum class ShapeKind { circle, rectangle, triangle };

struct SceneShape {
    ShapeKind kind = ShapeKind::circle;
    std::array<double, 3> color{};  // RGB in [-1,1]
    double cx = 0, cy = 0;          // center, pixels
    double size = 0;                // radius (circle), half-width (rectangle), circumradius (triangle)
    double aspect = 1.0;            // rectangle half-height = size * aspect
    double rotation = 0.0;          // triangle orientation, radians
    int depth_rank = 0;             // 0 = farthest; unique within a scene

    /// Exact area in pixels^2.
    double area() const;
    bool contains(double x, double y) const;
};

struct SceneSpec {
    std::vector<SceneShape> shapes;
    std::array<double, 3> bg_from{};
    std::array<double, 3> bg_to{};
    double bg_angle = 0.0;
};

template <typename T>
struct Scene {
    SceneSpec spec;
    Tensor<T> image;      // [3,H,W]
    Tensor<T> edge_map;   // analytic boundaries: +1 on boundary pixels, -1 elsewhere
    Tensor<T> seg_map;    // flat palette fill per visible shape
    Tensor<T> depth_map;  // depth-rank shading, nearer is brighter
};

SceneSpec random_scene_spec(uint64_t seed, int size);

template <typename T>
Scene<T> render_scene(const SceneSpec& spec, int size);

template <typename T>
Scene<T> gen_scene(uint64_t seed, int size);

struct AnnotatorOptions {
    double edge_scale = 2.0;      // tanh normalization of the Sobel magnitude
    double edge_floor = 1e-2;     // sqrt(g^2 + floor) keeps the derivative bounded
    int seg_levels = 4;
    double seg_temperature = 0.05;
    double sketch_threshold = 2.0;
    double sketch_temperature = 0.25;
};

/// Differentiable analytic annotator. image: [N,3,H,W] or [3,H,W] in [-1,1];
/// the result has the same shape.
template <typename T>
Tensor<T> annotate(const Tensor<T>& image, MapKind kind, const AnnotatorOptions& opt = {});

/// Luminance Sobel gradient magnitude sqrt(gx^2 + gy^2 + floor) - sqrt(floor), [N,1,H,W].
template <typename T>
Tensor<T> sobel_magnitude(const Tensor<T>& image, const AnnotatorOptions& opt = {});

enum class Split { train, eval };

/// Scene seed of item `index` in a batch; disjoint streams for the two roles and splits.
uint64_t scene_seed(uint64_t batch_seed, int index, bool query_role, Split split);

/// n in-context items for `task`; item i uses scene A for the example pair and
/// scene B for the query/target. Deterministic in (task, n, seed, split).
template <typename T>
std::vector<ContextSample<T>> make_context_batch(const TaskKind& task, int n, uint64_t seed, int size,
                                                 Split split = Split::train, const AnnotatorOptions& opt = {});

/// Same as make_context_batch but refuses held-out kinds.
template <typename T>
std::vector<ContextSample<T>> make_training_batch(const TaskKind& task, int n, uint64_t seed, int size,
                                                  const AnnotatorOptions& opt = {});

/// Stack a field of the batch into [N,3,H,W].
template <typename T>
Tensor<T> stack_images(const std::vector<ContextSample<T>>& batch, Tensor<T> ContextSample<T>::* field);

template <typename T, typename U>
std::vector<ContextSample<T>> cast_batch(const std::vector<ContextSample<U>>& batch)
{
    std::vector<ContextSample<T>> out;
    out.reserve(batch.size());
    for (const auto& s : batch) {
        out.push_back({s.example_src.template cast<T>(), s.example_tgt.template cast<T>(), s.query.template cast<T>(),
                       s.target.template cast<T>(), s.task, s.example_seed, s.scene_seed});
    }
    return out;
}

} // namespace usdiff
