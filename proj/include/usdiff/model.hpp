// Copyright 2026 The usdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "usdiff/kv.hpp"
#include "usdiff/ops.hpp"
#include "usdiff/tasks.hpp"
#include "usdiff/tensor.hpp"

namespace usdiff {

struct ModelConfig {
    int image_size = 32;
    int base_channels = 32;
    int depth = 3;
    std::vector<int> channel_mult{1, 2, 2};
    int num_tasks = 6;
    int time_embed_dim = 64;
    int task_embed_dim = 32;
    /// Stride of each adapter branch convolution; their product must equal 2^(depth-1).
    std::vector<int> sga_strides{2, 2, 1};
    int sga_hidden = 32;
    /// false: one embedder shared by all tasks (ablation).
    bool sga_enabled = true;

    int channels(int level) const { return base_channels * channel_mult.at(level); }
    int control_resolution() const { return image_size >> (depth - 1); }
    void validate() const;

    /// 32x32 RGB, base 32, depth 3.
    static ModelConfig desk();
    /// 8x8, base 8; used for finite-difference checks.
    static ModelConfig micro();

    void write_kv(KeyValues& kv, const std::string& prefix) const;
    static ModelConfig read_kv(const KeyValues& kv, const std::string& prefix);
    bool operator==(const ModelConfig&) const = default;
};

/// Sinusoidal embedding [sin(t f_0), cos(t f_0), sin(t f_1), ...] with
/// frequencies f_i geometrically spaced from 1 down to 1e-4.
template <typename T>
Tensor<T> time_embed(std::span<const int> t, int dim);

template <typename T>
struct Conv {
    Tensor<T> weight;
    Tensor<T> bias;
    int stride = 1;
    int pad = 1;

    Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, stride, pad); }
};

template <typename T>
struct Dense {
    Tensor<T> weight;
    Tensor<T> bias;
};

template <typename T>
struct GroupNorm {
    Tensor<T> gamma;
    Tensor<T> beta;
    int groups = 1;
};

template <typename T>
struct ResBlock {
    GroupNorm<T> norm1, norm2;
    Conv<T> conv1, conv2;
    Dense<T> cond_proj;
    Conv<T> skip;  // undefined weight when channel counts match
};

enum class SgaVariant { example, query };

/// Per-task light branches followed by one shared gather convolution.
template <typename T>
struct SgaAdapter {
    SgaVariant variant = SgaVariant::query;
    int in_channels = 3;
    std::vector<std::vector<Conv<T>>> branches;
    Conv<T> shared;
};

/// Micro U-Net noise predictor with a zero-initialized control branch fed by
/// the summed SGA-E / SGA-Q adapters.
///
/// Parameters are owned by the model; copying is disabled because tensors
/// share storage. Use `clone` or `cast`.
template <typename T>
class DenoiserModel {
public:
    struct Named {
        std::string name;
        Tensor<T> tensor;
    };

    DenoiserModel(const ModelConfig& cfg, uint64_t seed);
    DenoiserModel(DenoiserModel&&) noexcept = default;
    DenoiserModel& operator=(DenoiserModel&&) noexcept = default;
    DenoiserModel(const DenoiserModel&) = delete;
    DenoiserModel& operator=(const DenoiserModel&) = delete;

    /// eps_hat for x_t [N,3,H,W] with one time step and one context item per sample.
    Tensor<T> forward(const Tensor<T>& x_t, std::span<const int> t, std::span<const ContextSample<T>> context,
                      bool inject_control = true) const;

    Tensor<T> operator()(const Tensor<T>& x_t, std::span<const int> t, std::span<const ContextSample<T>> context) const
    {
        return forward(x_t, t, context);
    }

    /// Routes `input` [N,C,H,W] through branch `task_id` (1..num_tasks) then the
    /// shared module. With SGA disabled every id maps to the single branch.
    Tensor<T> sga_forward(SgaVariant variant, const Tensor<T>& input, int task_id) const;

    /// Elementwise sum of the two adapter outputs.
    static Tensor<T> control_input(const Tensor<T>& f_e, const Tensor<T>& f_q);

    const ModelConfig& config() const { return cfg_; }
    std::vector<Named>& parameters() { return params_; }
    const std::vector<Named>& parameters() const { return params_; }
    std::vector<Tensor<T>> parameter_tensors() const;
    int64_t parameter_count() const;
    /// Parameters whose name starts with `prefix`.
    std::vector<Tensor<T>> parameters_with_prefix(const std::string& prefix) const;
    Tensor<T> parameter(const std::string& name) const;

    /// Number of adapter branches (num_tasks, or 1 when SGA is disabled).
    int branch_count() const { return static_cast<int>(sga_e_.branches.size()); }
    /// 0-based branch index used for the 1-based `task_id`.
    int branch_for_task(int task_id) const;

    void zero_grad();

    DenoiserModel clone() const { return cast<T>(); }

    template <typename U>
    DenoiserModel<U> cast() const
    {
        DenoiserModel<U> out(cfg_, 0);
        auto& dst = out.parameters();
        for (size_t i = 0; i < params_.size(); ++i) {
            const auto& src = params_[i].tensor.values();
            auto data = dst[i].tensor.mutable_data();
            std::copy(src.begin(), src.end(), data.begin());
        }
        return out;
    }

private:
    Tensor<T> conditioning(std::span<const int> t, std::span<const ContextSample<T>> context) const;
    Tensor<T> res_block(const ResBlock<T>& b, const Tensor<T>& x, const Tensor<T>& cond) const;
    Tensor<T> hint(std::span<const ContextSample<T>> context) const;

    Conv<T> make_conv(const std::string& name, int c_in, int c_out, int k, int stride, bool zero = false);
    Dense<T> make_dense(const std::string& name, int in, int out);
    GroupNorm<T> make_norm(const std::string& name, int channels);
    ResBlock<T> make_res(const std::string& name, int c_in, int c_out);
    SgaAdapter<T> make_sga(const std::string& name, SgaVariant variant, int in_channels);
    Tensor<T> register_param(const std::string& name, Shape shape, std::vector<T> values);

    ModelConfig cfg_;
    Rng init_rng_;
    std::vector<Named> params_;

    Dense<T> time_fc1_, time_fc2_;
    Tensor<T> task_table_;
    Dense<T> task_proj_;

    Conv<T> in_conv_;
    std::vector<ResBlock<T>> enc_;
    ResBlock<T> mid_;
    std::vector<ResBlock<T>> dec_;
    GroupNorm<T> out_norm_;
    Conv<T> out_conv_;

    Conv<T> ctrl_in_;
    std::vector<ResBlock<T>> ctrl_;
    std::vector<Conv<T>> zero_proj_;

    SgaAdapter<T> sga_e_, sga_q_;
};

/// Adapts a model to the DenoiseFn signature.
template <typename T>
auto as_denoise_fn(const DenoiserModel<T>& m)
{
    return [&m](const Tensor<T>& x, std::span<const int> t, std::span<const ContextSample<T>> ctx) {
        return m.forward(x, t, ctx);
    };
}

extern template class DenoiserModel<float>;
extern template class DenoiserModel<double>;

} // namespace usdiff
