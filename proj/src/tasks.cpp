// Copyright 2026 The usdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "usdiff/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "usdiff/kv.hpp"
#include "usdiff/ops.hpp"
#include "usdiff/rng.hpp"

namespace usdiff {

// ---------------------------------------------------------------------------
// Task naming

std::string to_string(MapKind k)
{
    switch (k) {
    case MapKind::edge:
        return "edge";
    case MapKind::seg:
        return "seg";
    case MapKind::depth:
        return "depth";
    case MapKind::canny_like:
        return "canny_like";
    case MapKind::scribble_like:
        return "scribble_like";
    }
    return "?";
}

std::string to_string(Direction d) { return d == Direction::map2image ? "map2image" : "image2map"; }

MapKind parse_map_kind(const std::string& s)
{
    for (MapKind k : {MapKind::edge, MapKind::seg, MapKind::depth, MapKind::canny_like, MapKind::scribble_like}) {
        if (to_string(k) == s) {
            return k;
        }
    }
    throw ConfigError("unknown map kind '" + s + "'");
}

Direction parse_direction(const std::string& s)
{
    if (s == "map2image") {
        return Direction::map2image;
    }
    if (s == "image2map") {
        return Direction::image2map;
    }
    throw ConfigError("unknown direction '" + s + "'");
}

int TaskKind::branch() const
{
    int k = 0;
    switch (kind) {
    case MapKind::edge:
    case MapKind::canny_like:
    case MapKind::scribble_like:
        k = 0;
        break;
    case MapKind::seg:
        k = 1;
        break;
    case MapKind::depth:
        k = 2;
        break;
    }
    return 2 * k + (direction == Direction::image2map ? 1 : 0);
}

std::string to_string(const TaskKind& t) { return to_string(t.kind) + "/" + to_string(t.direction); }

TaskKind parse_task(const std::string& s)
{
    const auto slash = s.find('/');
    if (slash == std::string::npos) {
        throw ConfigError("task must look like kind/direction, got '" + s + "'");
    }
    return {parse_map_kind(s.substr(0, slash)), parse_direction(s.substr(slash + 1))};
}

std::vector<TaskKind> training_tasks()
{
    std::vector<TaskKind> out;
    for (MapKind k : {MapKind::edge, MapKind::seg, MapKind::depth}) {
        for (Direction d : {Direction::map2image, Direction::image2map}) {
            out.push_back({k, d});
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Scene geometry

namespace {

std::array<std::array<double, 2>, 3> triangle_vertices(const SceneShape& s)
{
    std::array<std::array<double, 2>, 3> v{};
    for (int i = 0; i < 3; ++i) {
        const double a = s.rotation + 2.0 * std::numbers::pi * i / 3.0;
        v[i] = {s.cx + s.size * std::cos(a), s.cy + s.size * std::sin(a)};
    }
    return v;
}

double edge_fn(const std::array<double, 2>& a, const std::array<double, 2>& b, double x, double y)
{
    return (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]);
}

} // namespace

double SceneShape::area() const
{
    switch (kind) {
    case ShapeKind::circle:
        return std::numbers::pi * size * size;
    case ShapeKind::rectangle:
        return 4.0 * size * size * aspect;
    case ShapeKind::triangle:
        return 3.0 * std::sqrt(3.0) / 4.0 * size * size;
    }
    return 0.0;
}

bool SceneShape::contains(double x, double y) const
{
    switch (kind) {
    case ShapeKind::circle:
        return (x - cx) * (x - cx) + (y - cy) * (y - cy) <= size * size;
    case ShapeKind::rectangle:
        return std::abs(x - cx) <= size && std::abs(y - cy) <= size * aspect;
    case ShapeKind::triangle: {
        const auto v = triangle_vertices(*this);
        const double d0 = edge_fn(v[0], v[1], x, y);
        const double d1 = edge_fn(v[1], v[2], x, y);
        const double d2 = edge_fn(v[2], v[0], x, y);
        return (d0 >= 0 && d1 >= 0 && d2 >= 0) || (d0 <= 0 && d1 <= 0 && d2 <= 0);
    }
    }
    return false;
}

SceneSpec random_scene_spec(uint64_t seed, int size)
{
    if (size < 16) {
        throw ContractError("gen_scene: size must be >= 16");
    }
    Rng rng(seed, 0x5CE7E);
    SceneSpec spec;
    auto color = [&] {
        return std::array<double, 3>{rng.uniform() * 1.8 - 0.9, rng.uniform() * 1.8 - 0.9, rng.uniform() * 1.8 - 0.9};
    };
    auto bg = [&] {
        return std::array<double, 3>{rng.uniform() * 1.2 - 0.6, rng.uniform() * 1.2 - 0.6, rng.uniform() * 1.2 - 0.6};
    };
    spec.bg_from = bg();
    spec.bg_to = bg();
    spec.bg_angle = rng.uniform() * 2.0 * std::numbers::pi;

    const int n = static_cast<int>(rng.uniform_int(2, 5));
    std::vector<int> ranks(n);
    for (int i = 0; i < n; ++i) {
        ranks[i] = i;
    }
    for (int i = n - 1; i > 0; --i) {
        std::swap(ranks[i], ranks[rng.uniform_int(0, i)]);
    }
    for (int i = 0; i < n; ++i) {
        SceneShape s;
        s.kind = static_cast<ShapeKind>(rng.uniform_int(0, 2));
        s.color = color();
        s.size = size * (0.15 + 0.1 * rng.uniform());
        s.aspect = 0.6 + 0.8 * rng.uniform();
        s.rotation = rng.uniform() * 2.0 * std::numbers::pi;
        s.depth_rank = ranks[i];
        double hx = s.size, hy = s.size;
        if (s.kind == ShapeKind::rectangle) {
            hy = std::min(s.size * s.aspect, 0.45 * size);
            s.aspect = hy / s.size;
        }
        // One extra pixel of margin keeps anti-aliased borders inside the canvas.
        s.cx = hx + 1.0 + rng.uniform() * (size - 2.0 * hx - 2.0);
        s.cy = hy + 1.0 + rng.uniform() * (size - 2.0 * hy - 2.0);
        spec.shapes.push_back(s);
    }
    return spec;
}

template <typename T>
Scene<T> render_scene(const SceneSpec& spec, int size)
{
    if (size < 1) {
        throw ContractError("render_scene: size must be positive");
    }
    constexpr int kSub = 4;
    static constexpr std::array<std::array<double, 3>, 8> kPalette{{{0.9, -0.8, -0.8},
                                                                    {-0.8, 0.9, -0.8},
                                                                    {-0.8, -0.8, 0.9},
                                                                    {0.9, 0.9, -0.8},
                                                                    {0.9, -0.8, 0.9},
                                                                    {-0.8, 0.9, 0.9},
                                                                    {0.2, 0.2, 0.2},
                                                                    {0.9, 0.9, 0.9}}};
    const int n_shapes = static_cast<int>(spec.shapes.size());
    // Shapes drawn nearest-first so the first hit is the visible one.
    std::vector<int> order(n_shapes);
    for (int i = 0; i < n_shapes; ++i) {
        order[i] = i;
    }
    std::sort(order.begin(), order.end(),
              [&](int a, int b) { return spec.shapes[a].depth_rank > spec.shapes[b].depth_rank; });

    const double ux = std::cos(spec.bg_angle), uy = std::sin(spec.bg_angle);
    const size_t plane = static_cast<size_t>(size) * size;
    std::vector<T> image(3 * plane), edge(3 * plane), seg(3 * plane), depth(3 * plane);
    std::vector<int> counts(n_shapes + 1);
    for (int py = 0; py < size; ++py) {
        for (int px = 0; px < size; ++px) {
            std::array<double, 3> acc{};
            std::fill(counts.begin(), counts.end(), 0);
            for (int sy = 0; sy < kSub; ++sy) {
                for (int sx = 0; sx < kSub; ++sx) {
                    const double x = px + (sx + 0.5) / kSub;
                    const double y = py + (sy + 0.5) / kSub;
                    int hit = -1;
                    for (int idx : order) {
                        if (spec.shapes[idx].contains(x, y)) {
                            hit = idx;
                            break;
                        }
                    }
                    ++counts[hit + 1];
                    if (hit >= 0) {
                        for (int c = 0; c < 3; ++c) {
                            acc[c] += spec.shapes[hit].color[c];
                        }
                    } else {
                        const double u = std::clamp(((x / size - 0.5) * ux + (y / size - 0.5) * uy) + 0.5, 0.0, 1.0);
                        for (int c = 0; c < 3; ++c) {
                            acc[c] += spec.bg_from[c] + (spec.bg_to[c] - spec.bg_from[c]) * u;
                        }
                    }
                }
            }
            const int majority = static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin()) - 1;
            const bool boundary = std::count(counts.begin(), counts.end(), 0) != n_shapes;
            const size_t p = static_cast<size_t>(py) * size + px;
            const double depth_v =
                majority < 0 ? -1.0 : -1.0 + 2.0 * (spec.shapes[majority].depth_rank + 1.0) / n_shapes;
            for (int c = 0; c < 3; ++c) {
                image[c * plane + p] = static_cast<T>(acc[c] / (kSub * kSub));
                edge[c * plane + p] = boundary ? T(1) : T(-1);
                seg[c * plane + p] = majority < 0 ? T(-1) : static_cast<T>(kPalette[majority % kPalette.size()][c]);
                depth[c * plane + p] = static_cast<T>(depth_v);
            }
        }
    }
    const Shape shape{3, size, size};
    return Scene<T>{spec, Tensor<T>::from(shape, std::move(image)), Tensor<T>::from(shape, std::move(edge)),
                    Tensor<T>::from(shape, std::move(seg)), Tensor<T>::from(shape, std::move(depth))};
}

template <typename T>
Scene<T> gen_scene(uint64_t seed, int size)
{
    return render_scene<T>(random_scene_spec(seed, size), size);
}

// ---------------------------------------------------------------------------
// Annotators

namespace {

template <typename T>
Tensor<T> const_weight(Shape shape, std::vector<double> v)
{
    return Tensor<T>::from(std::move(shape), std::vector<T>(v.begin(), v.end()));
}

template <typename T>
Tensor<T> luminance(const Tensor<T>& x)
{
    return conv2d(x, const_weight<T>({1, 3, 1, 1}, {0.299, 0.587, 0.114}), Tensor<T>{}, 1, 0);
}

template <typename T>
Tensor<T> replicate3(const Tensor<T>& x1)
{
    return conv2d(x1, const_weight<T>({3, 1, 1, 1}, {1, 1, 1}), Tensor<T>{}, 1, 0);
}

template <typename T>
Tensor<T> box_blur(const Tensor<T>& x1)
{
    return conv2d(pad_replicate(x1, 1), const_weight<T>({1, 1, 3, 3}, std::vector<double>(9, 1.0 / 9.0)), Tensor<T>{},
                  1, 0);
}

// 2 * sigmoid((m - threshold) / temperature) - 1
template <typename T>
Tensor<T> sketch(const Tensor<T>& m, const AnnotatorOptions& opt)
{
    const T inv = T(1) / static_cast<T>(opt.sketch_temperature);
    return affine(sigmoid(affine(m, inv, -static_cast<T>(opt.sketch_threshold) * inv)), T(2), T(-1));
}

} // namespace

template <typename T>
Tensor<T> sobel_magnitude(const Tensor<T>& image, const AnnotatorOptions& opt)
{
    const Tensor<T> x = image.rank() == 3 ? image.reshape({1, image.dim(0), image.dim(1), image.dim(2)}) : image;
    if (x.rank() != 4 || x.dim(1) != 3) {
        throw ContractError("annotate: expected [N,3,H,W] or [3,H,W], got " + to_string(image.shape()));
    }
    const auto sobel = const_weight<T>({2, 1, 3, 3}, {-1, 0, 1, -2, 0, 2, -1, 0, 1,  // d/dx
                                                      -1, -2, -1, 0, 0, 0, 1, 2, 1}); // d/dy
    const Tensor<T> g = conv2d(pad_replicate(luminance(x), 1), sobel, Tensor<T>{}, 1, 0);
    const Tensor<T> g2 = conv2d(square(g), const_weight<T>({1, 2, 1, 1}, {1, 1}), Tensor<T>{}, 1, 0);
    const T floor = static_cast<T>(opt.edge_floor);
    return affine(sqrt_eps(g2, floor), T(1), -std::sqrt(floor));
}

template <typename T>
Tensor<T> annotate(const Tensor<T>& image, MapKind kind, const AnnotatorOptions& opt)
{
    const bool single = image.rank() == 3;
    const Tensor<T> x = single ? image.reshape({1, image.dim(0), image.dim(1), image.dim(2)}) : image;
    if (x.rank() != 4 || x.dim(1) != 3) {
        throw ContractError("annotate: expected [N,3,H,W] or [3,H,W], got " + to_string(image.shape()));
    }
    Tensor<T> out;
    switch (kind) {
    case MapKind::edge: {
        const Tensor<T> m = sobel_magnitude(x, opt);
        out = replicate3(affine(tanh(scale(m, T(1) / static_cast<T>(opt.edge_scale))), T(2), T(-1)));
        break;
    }
    case MapKind::seg: {
        // Soft posterization: -1 + sum_j step * sigmoid((x - threshold_j) / temperature).
        const int k = opt.seg_levels;
        if (k < 2) {
            throw ContractError("annotate: seg_levels must be >= 2");
        }
        const T step = T(2) / static_cast<T>(k - 1);
        const T inv = T(1) / static_cast<T>(opt.seg_temperature);
        Tensor<T> acc;
        for (int j = 1; j < k; ++j) {
            const T threshold = T(-1) + (static_cast<T>(j) - T(0.5)) * step;
            Tensor<T> band = scale(sigmoid(affine(x, inv, -threshold * inv)), step);
            acc = acc.defined() ? add(acc, band) : band;
        }
        out = affine(acc, T(1), T(-1));
        break;
    }
    case MapKind::depth:
        out = replicate3(box_blur(luminance(x)));
        break;
    case MapKind::canny_like:
        out = replicate3(sketch(sobel_magnitude(x, opt), opt));
        break;
    case MapKind::scribble_like:
        out = replicate3(sketch(box_blur(box_blur(sobel_magnitude(x, opt))), opt));
        break;
    }
    return single ? out.reshape(image.shape()) : out;
}

// ---------------------------------------------------------------------------
// Batches

uint64_t scene_seed(uint64_t batch_seed, int index, bool query_role, Split split)
{
    Rng rng(batch_seed, (static_cast<uint64_t>(split == Split::eval) << 1) | (query_role ? 1u : 0u));
    return rng.fork(static_cast<uint64_t>(index)).next_u64();
}

template <typename T>
std::vector<ContextSample<T>> make_context_batch(const TaskKind& task, int n, uint64_t seed, int size, Split split,
                                                 const AnnotatorOptions& opt)
{
    if (n < 1) {
        throw ContractError("make_context_batch: n must be >= 1");
    }
    // Sizes below the scene minimum are rendered at 16 and box-downsampled.
    int render = size;
    while (render < 16) {
        render *= 2;
    }
    if (size < 1 || (render != size && 16 % size != 0)) {
        throw ContractError("make_context_batch: size must be >= 16 or a divisor of 16");
    }
    const auto image_at = [&](uint64_t s) {
        Tensor<T> img = gen_scene<T>(s, render).image;
        if (render == size) {
            return img;
        }
        NoGradGuard no_grad;
        img = img.reshape({1, 3, render, render});
        for (int r = render; r > size; r /= 2) {
            img = avgpool2x(img);
        }
        return img.reshape({3, size, size}).detach();
    };
    std::vector<ContextSample<T>> batch;
    batch.reserve(n);
    for (int i = 0; i < n; ++i) {
        const uint64_t seed_a = scene_seed(seed, i, false, split);
        uint64_t seed_b = scene_seed(seed, i, true, split);
        if (seed_b == seed_a) {
            seed_b ^= 0x9E3779B97F4A7C15ull;
        }
        const Tensor<T> image_a = image_at(seed_a);
        const Tensor<T> image_b = image_at(seed_b);
        const Tensor<T> map_a = annotate(image_a, task.kind, opt);
        const Tensor<T> map_b = annotate(image_b, task.kind, opt);
        ContextSample<T> item;
        item.task = task;
        item.example_seed = seed_a;
        item.scene_seed = seed_b;
        if (task.direction == Direction::image2map) {
            item.example_src = image_a;
            item.example_tgt = map_a;
            item.query = image_b;
            item.target = map_b;
        } else {
            item.example_src = map_a;
            item.example_tgt = image_a;
            item.query = map_b;
            item.target = image_b;
        }
        batch.push_back(std::move(item));
    }
    return batch;
}

template <typename T>
std::vector<ContextSample<T>> make_training_batch(const TaskKind& task, int n, uint64_t seed, int size,
                                                  const AnnotatorOptions& opt)
{
    if (task.held_out()) {
        throw ContractError("held-out task " + to_string(task) + " cannot appear in a training batch");
    }
    return make_context_batch<T>(task, n, seed, size, Split::train, opt);
}

template <typename T>
Tensor<T> stack_images(const std::vector<ContextSample<T>>& batch, Tensor<T> ContextSample<T>::* field)
{
    if (batch.empty()) {
        throw ContractError("stack_images: empty batch");
    }
    std::vector<Tensor<T>> parts;
    parts.reserve(batch.size());
    for (const auto& item : batch) {
        const Tensor<T>& img = item.*field;
        parts.push_back(img.rank() == 3 ? img.reshape({1, img.dim(0), img.dim(1), img.dim(2)}) : img);
    }
    return concat_batch<T>(parts);
}

#define USDIFF_INSTANTIATE_TASKS(T)                                                                                   \
    template Scene<T> render_scene<T>(const SceneSpec&, int);                                                         \
    template Scene<T> gen_scene<T>(uint64_t, int);                                                                    \
    template Tensor<T> annotate(const Tensor<T>&, MapKind, const AnnotatorOptions&);                                  \
    template Tensor<T> sobel_magnitude(const Tensor<T>&, const AnnotatorOptions&);                                    \
    template std::vector<ContextSample<T>> make_context_batch<T>(const TaskKind&, int, uint64_t, int, Split,          \
                                                                 const AnnotatorOptions&);                            \
    template std::vector<ContextSample<T>> make_training_batch<T>(const TaskKind&, int, uint64_t, int,                \
                                                                  const AnnotatorOptions&);                           \
    template Tensor<T> stack_images(const std::vector<ContextSample<T>>&, Tensor<T> ContextSample<T>::*);

USDIFF_INSTANTIATE_TASKS(float)
USDIFF_INSTANTIATE_TASKS(double)

} // namespace usdiff
