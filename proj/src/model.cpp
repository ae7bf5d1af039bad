// Copyright 2026 The usdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "usdiff/model.hpp"

#include <cmath>
#include <numeric>

namespace usdiff {

void ModelConfig::validate() const
{
    if (image_size < 1 || base_channels < 1 || depth < 1 || num_tasks < 1 || time_embed_dim < 2 ||
        task_embed_dim < 1 || sga_hidden < 1) {
        throw ContractError("model config: all dimensions must be positive");
    }
    if (time_embed_dim % 2 != 0) {
        throw ContractError("model config: time_embed_dim must be even");
    }
    if (static_cast<int>(channel_mult.size()) != depth) {
        throw ContractError("model config: channel_mult needs one entry per level");
    }
    for (int m : channel_mult) {
        if (m < 1) {
            throw ContractError("model config: channel_mult entries must be positive");
        }
    }
    const int factor = 1 << (depth - 1);
    if (image_size % factor != 0) {
        throw ContractError("model config: image_size must be divisible by 2^(depth-1)");
    }
    int stride_product = 1;
    for (int s : sga_strides) {
        if (s != 1 && s != 2) {
            throw ContractError("model config: adapter strides must be 1 or 2");
        }
        stride_product *= s;
    }
    if (sga_strides.empty() || stride_product != factor) {
        throw ContractError("model config: adapter stride product must equal 2^(depth-1)");
    }
}

ModelConfig ModelConfig::desk() { return {}; }

ModelConfig ModelConfig::micro()
{
    ModelConfig c;
    c.image_size = 8;
    c.base_channels = 8;
    c.time_embed_dim = 16;
    c.task_embed_dim = 8;
    c.sga_hidden = 8;
    return c;
}

namespace {

std::string join_ints(const std::vector<int>& v)
{
    std::vector<std::string> items;
    for (int x : v) {
        items.push_back(std::to_string(x));
    }
    return join_list(items);
}

std::vector<int> parse_ints(const std::string& key, const std::string& value)
{
    std::vector<int> out;
    for (const auto& item : split_list(value)) {
        out.push_back(static_cast<int>(parse_int(key, item)));
    }
    return out;
}

const std::string& require(const KeyValues& kv, const std::string& key)
{
    const auto it = kv.find(key);
    if (it == kv.end()) {
        throw ConfigError("missing key: " + key);
    }
    return it->second;
}

} // namespace

void ModelConfig::write_kv(KeyValues& kv, const std::string& prefix) const
{
    kv[prefix + "image_size"] = std::to_string(image_size);
    kv[prefix + "base_channels"] = std::to_string(base_channels);
    kv[prefix + "depth"] = std::to_string(depth);
    kv[prefix + "channel_mult"] = join_ints(channel_mult);
    kv[prefix + "num_tasks"] = std::to_string(num_tasks);
    kv[prefix + "time_embed_dim"] = std::to_string(time_embed_dim);
    kv[prefix + "task_embed_dim"] = std::to_string(task_embed_dim);
    kv[prefix + "sga_strides"] = join_ints(sga_strides);
    kv[prefix + "sga_hidden"] = std::to_string(sga_hidden);
    kv[prefix + "sga_enabled"] = sga_enabled ? "true" : "false";
}

ModelConfig ModelConfig::read_kv(const KeyValues& kv, const std::string& prefix)
{
    auto get_int = [&](const char* name) {
        const std::string key = prefix + name;
        return static_cast<int>(parse_int(key, require(kv, key)));
    };
    ModelConfig c;
    c.image_size = get_int("image_size");
    c.base_channels = get_int("base_channels");
    c.depth = get_int("depth");
    c.channel_mult = parse_ints(prefix + "channel_mult", require(kv, prefix + "channel_mult"));
    c.num_tasks = get_int("num_tasks");
    c.time_embed_dim = get_int("time_embed_dim");
    c.task_embed_dim = get_int("task_embed_dim");
    c.sga_strides = parse_ints(prefix + "sga_strides", require(kv, prefix + "sga_strides"));
    c.sga_hidden = get_int("sga_hidden");
    c.sga_enabled = parse_bool(prefix + "sga_enabled", require(kv, prefix + "sga_enabled"));
    return c;
}

template <typename T>
Tensor<T> time_embed(std::span<const int> t, int dim)
{
    if (dim < 2 || dim % 2 != 0) {
        throw ContractError("time_embed: dim must be even and positive, got " + std::to_string(dim));
    }
    const int half = dim / 2;
    std::vector<T> out(t.size() * static_cast<size_t>(dim));
    for (size_t n = 0; n < t.size(); ++n) {
        for (int i = 0; i < half; ++i) {
            const double f = half == 1 ? 1.0 : std::pow(10.0, -4.0 * i / (half - 1));
            const double arg = static_cast<double>(t[n]) * f;
            out[n * dim + 2 * i] = static_cast<T>(std::sin(arg));
            out[n * dim + 2 * i + 1] = static_cast<T>(std::cos(arg));
        }
    }
    return Tensor<T>::from({static_cast<int64_t>(t.size()), dim}, std::move(out));
}

template <typename T>
Tensor<T> DenoiserModel<T>::register_param(const std::string& name, Shape shape, std::vector<T> values)
{
    for (const auto& p : params_) {
        if (p.name == name) {
            throw ContractError("duplicate parameter name: " + name);
        }
    }
    Tensor<T> t = Tensor<T>::parameter(std::move(shape), std::move(values));
    params_.push_back({name, t});
    return t;
}

template <typename T>
Conv<T> DenoiserModel<T>::make_conv(const std::string& name, int c_in, int c_out, int k, int stride, bool zero)
{
    const int64_t fan_in = static_cast<int64_t>(c_in) * k * k;
    std::vector<T> w(static_cast<size_t>(fan_in * c_out), T(0));
    if (!zero) {
        const double std = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (auto& v : w) {
            v = static_cast<T>(init_rng_.normal() * std);
        }
    }
    Conv<T> c;
    c.weight = register_param(name + ".weight", {c_out, c_in, k, k}, std::move(w));
    c.bias = register_param(name + ".bias", {c_out}, std::vector<T>(c_out, T(0)));
    c.stride = stride;
    c.pad = k / 2;
    return c;
}

template <typename T>
Dense<T> DenoiserModel<T>::make_dense(const std::string& name, int in, int out)
{
    std::vector<T> w(static_cast<size_t>(in) * out);
    const double std = 1.0 / std::sqrt(static_cast<double>(in));
    for (auto& v : w) {
        v = static_cast<T>(init_rng_.normal() * std);
    }
    Dense<T> d;
    d.weight = register_param(name + ".weight", {out, in}, std::move(w));
    d.bias = register_param(name + ".bias", {out}, std::vector<T>(out, T(0)));
    return d;
}

template <typename T>
GroupNorm<T> DenoiserModel<T>::make_norm(const std::string& name, int channels)
{
    GroupNorm<T> g;
    g.gamma = register_param(name + ".gamma", {channels}, std::vector<T>(channels, T(1)));
    g.beta = register_param(name + ".beta", {channels}, std::vector<T>(channels, T(0)));
    g.groups = default_groups(channels);
    return g;
}

template <typename T>
ResBlock<T> DenoiserModel<T>::make_res(const std::string& name, int c_in, int c_out)
{
    ResBlock<T> b;
    b.norm1 = make_norm(name + ".norm1", c_in);
    b.conv1 = make_conv(name + ".conv1", c_in, c_out, 3, 1);
    b.cond_proj = make_dense(name + ".cond", cfg_.time_embed_dim, c_out);
    b.norm2 = make_norm(name + ".norm2", c_out);
    b.conv2 = make_conv(name + ".conv2", c_out, c_out, 3, 1);
    if (c_in != c_out) {
        b.skip = make_conv(name + ".skip", c_in, c_out, 1, 1);
    }
    return b;
}

template <typename T>
SgaAdapter<T> DenoiserModel<T>::make_sga(const std::string& name, SgaVariant variant, int in_channels)
{
    SgaAdapter<T> a;
    a.variant = variant;
    a.in_channels = in_channels;
    const int branches = cfg_.sga_enabled ? cfg_.num_tasks : 1;
    for (int b = 0; b < branches; ++b) {
        std::vector<Conv<T>> convs;
        int c_in = in_channels;
        for (size_t l = 0; l < cfg_.sga_strides.size(); ++l) {
            convs.push_back(make_conv(name + ".branch" + std::to_string(b + 1) + ".conv" + std::to_string(l), c_in,
                                      cfg_.sga_hidden, 3, cfg_.sga_strides[l]));
            c_in = cfg_.sga_hidden;
        }
        a.branches.push_back(std::move(convs));
    }
    a.shared = make_conv(name + ".shared", cfg_.sga_hidden, cfg_.channels(0), 3, 1);
    return a;
}

template <typename T>
DenoiserModel<T>::DenoiserModel(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg), init_rng_(seed, 0x5eed)
{
    cfg_.validate();
    const int D = cfg_.time_embed_dim;
    time_fc1_ = make_dense("time.fc1", D, D);
    time_fc2_ = make_dense("time.fc2", D, D);
    {
        std::vector<T> table(static_cast<size_t>(cfg_.num_tasks) * cfg_.task_embed_dim);
        for (auto& v : table) {
            v = static_cast<T>(init_rng_.normal());
        }
        task_table_ = register_param("task.table", {cfg_.num_tasks, cfg_.task_embed_dim}, std::move(table));
    }
    task_proj_ = make_dense("task.proj", cfg_.task_embed_dim, D);

    in_conv_ = make_conv("unet.in", 3, cfg_.channels(0), 3, 1);
    int c = cfg_.channels(0);
    for (int l = 0; l < cfg_.depth; ++l) {
        enc_.push_back(make_res("unet.enc" + std::to_string(l), c, cfg_.channels(l)));
        c = cfg_.channels(l);
    }
    mid_ = make_res("unet.mid", c, c);
    dec_.resize(cfg_.depth);
    for (int l = cfg_.depth - 1; l >= 0; --l) {
        dec_[l] = make_res("unet.dec" + std::to_string(l), c + cfg_.channels(l), cfg_.channels(l));
        c = cfg_.channels(l);
    }
    out_norm_ = make_norm("unet.out_norm", c);
    out_conv_ = make_conv("unet.out", c, 3, 3, 1);

    ctrl_in_ = make_conv("control.in", 3, cfg_.channels(0), 3, 1);
    c = cfg_.channels(0);
    for (int l = 0; l < cfg_.depth; ++l) {
        ctrl_.push_back(make_res("control.enc" + std::to_string(l), c, cfg_.channels(l)));
        c = cfg_.channels(l);
        zero_proj_.push_back(make_conv("control.zero" + std::to_string(l), c, c, 1, 1, true));
    }

    sga_e_ = make_sga("sga_e", SgaVariant::example, 6);
    sga_q_ = make_sga("sga_q", SgaVariant::query, 3);
}

template <typename T>
int DenoiserModel<T>::branch_for_task(int task_id) const
{
    if (task_id < 1 || task_id > cfg_.num_tasks) {
        throw ContractError("unknown task id " + std::to_string(task_id) + " (expected 1.." +
                            std::to_string(cfg_.num_tasks) + ")");
    }
    return cfg_.sga_enabled ? task_id - 1 : 0;
}

template <typename T>
Tensor<T> DenoiserModel<T>::sga_forward(SgaVariant variant, const Tensor<T>& input, int task_id) const
{
    const SgaAdapter<T>& a = variant == SgaVariant::example ? sga_e_ : sga_q_;
    if (input.rank() != 4 || input.dim(1) != a.in_channels) {
        throw ContractError("sga_forward: expected [N," + std::to_string(a.in_channels) + ",H,W] input, got " +
                            to_string(input.shape()));
    }
    if (input.dim(2) != cfg_.image_size || input.dim(3) != cfg_.image_size) {
        throw ContractError("sga_forward: input resolution does not match image_size");
    }
    const auto& branch = a.branches[branch_for_task(task_id)];
    Tensor<T> h = input;
    for (size_t l = 0; l < branch.size(); ++l) {
        h = silu(branch[l](h));
    }
    return a.shared(h);
}

template <typename T>
Tensor<T> DenoiserModel<T>::control_input(const Tensor<T>& f_e, const Tensor<T>& f_q)
{
    if (!f_e.defined() || !f_q.defined() || f_e.shape() != f_q.shape()) {
        throw ContractError("control_input: adapter outputs must have equal shapes");
    }
    return add(f_e, f_q);
}

template <typename T>
Tensor<T> DenoiserModel<T>::conditioning(std::span<const int> t, std::span<const ContextSample<T>> context) const
{
    std::vector<int> ids;
    for (const auto& c : context) {
        ids.push_back(c.task.branch());
    }
    Tensor<T> temb = time_embed<T>(t, cfg_.time_embed_dim);
    temb = linear(silu(linear(temb, time_fc1_.weight, time_fc1_.bias)), time_fc2_.weight, time_fc2_.bias);
    const Tensor<T> task = linear(embedding(task_table_, std::span<const int>(ids)), task_proj_.weight, task_proj_.bias);
    return silu(add(temb, task));
}

template <typename T>
Tensor<T> DenoiserModel<T>::res_block(const ResBlock<T>& b, const Tensor<T>& x, const Tensor<T>& cond) const
{
    Tensor<T> h = silu(group_norm(x, b.norm1.gamma, b.norm1.beta, b.norm1.groups));
    h = b.conv1(h);
    h = add_channel_bias(h, linear(cond, b.cond_proj.weight, b.cond_proj.bias));
    h = silu(group_norm(h, b.norm2.gamma, b.norm2.beta, b.norm2.groups));
    h = b.conv2(h);
    return add(h, b.skip.weight.defined() ? b.skip(x) : x);
}

template <typename T>
Tensor<T> DenoiserModel<T>::hint(std::span<const ContextSample<T>> context) const
{
    auto adapters = [&](std::span<const ContextSample<T>> items) {
        const std::vector<ContextSample<T>> v(items.begin(), items.end());
        const Tensor<T> pair[2] = {stack_images(v, &ContextSample<T>::example_src),
                                   stack_images(v, &ContextSample<T>::example_tgt)};
        const int task_id = items[0].task.branch() + 1;
        const Tensor<T> f_e = sga_forward(SgaVariant::example, concat_channels<T>(pair), task_id);
        const Tensor<T> f_q = sga_forward(SgaVariant::query, stack_images(v, &ContextSample<T>::query), task_id);
        return control_input(f_e, f_q);
    };
    bool uniform = true;
    for (const auto& c : context) {
        uniform = uniform && c.task.branch() == context[0].task.branch();
    }
    if (uniform) {
        return adapters(context);
    }
    std::vector<Tensor<T>> parts;
    for (size_t i = 0; i < context.size(); ++i) {
        parts.push_back(adapters(context.subspan(i, 1)));
    }
    return concat_batch<T>(parts);
}

template <typename T>
Tensor<T> DenoiserModel<T>::forward(const Tensor<T>& x_t, std::span<const int> t,
                                    std::span<const ContextSample<T>> context, bool inject_control) const
{
    if (x_t.rank() != 4 || x_t.dim(1) != 3 || x_t.dim(2) != cfg_.image_size || x_t.dim(3) != cfg_.image_size) {
        throw ContractError("denoiser: expected x_t [N,3," + std::to_string(cfg_.image_size) + "," +
                            std::to_string(cfg_.image_size) + "], got " + to_string(x_t.shape()));
    }
    const auto n = static_cast<size_t>(x_t.dim(0));
    if (t.size() != n || context.size() != n) {
        throw ContractError("denoiser: need one time step and one context item per sample");
    }
    const Tensor<T> cond = conditioning(t, context);

    std::vector<Tensor<T>> control;
    if (inject_control) {
        Tensor<T> h = hint(context);
        for (int l = 1; l < cfg_.depth; ++l) {
            h = upsample2x(h);
        }
        h = add(ctrl_in_(x_t), h);
        for (int l = 0; l < cfg_.depth; ++l) {
            h = res_block(ctrl_[l], h, cond);
            control.push_back(zero_proj_[l](h));
            if (l + 1 < cfg_.depth) {
                h = avgpool2x(h);
            }
        }
    }

    std::vector<Tensor<T>> skips;
    Tensor<T> h = in_conv_(x_t);
    for (int l = 0; l < cfg_.depth; ++l) {
        h = res_block(enc_[l], h, cond);
        skips.push_back(h);
        if (l + 1 < cfg_.depth) {
            h = avgpool2x(h);
        }
    }
    h = res_block(mid_, h, cond);
    for (int l = cfg_.depth - 1; l >= 0; --l) {
        const Tensor<T> parts[2] = {h, skips[l]};
        h = res_block(dec_[l], concat_channels<T>(parts), cond);
        if (inject_control) {
            h = add(h, control[l]);
        }
        if (l > 0) {
            h = upsample2x(h);
        }
    }
    return out_conv_(silu(group_norm(h, out_norm_.gamma, out_norm_.beta, out_norm_.groups)));
}

template <typename T>
std::vector<Tensor<T>> DenoiserModel<T>::parameter_tensors() const
{
    std::vector<Tensor<T>> out;
    for (const auto& p : params_) {
        out.push_back(p.tensor);
    }
    return out;
}

template <typename T>
int64_t DenoiserModel<T>::parameter_count() const
{
    return std::accumulate(params_.begin(), params_.end(), int64_t{0},
                           [](int64_t acc, const Named& p) { return acc + p.tensor.numel(); });
}

template <typename T>
std::vector<Tensor<T>> DenoiserModel<T>::parameters_with_prefix(const std::string& prefix) const
{
    std::vector<Tensor<T>> out;
    for (const auto& p : params_) {
        if (p.name.starts_with(prefix)) {
            out.push_back(p.tensor);
        }
    }
    return out;
}

template <typename T>
Tensor<T> DenoiserModel<T>::parameter(const std::string& name) const
{
    for (const auto& p : params_) {
        if (p.name == name) {
            return p.tensor;
        }
    }
    throw ContractError("no parameter named " + name);
}

template <typename T>
void DenoiserModel<T>::zero_grad()
{
    for (auto& p : params_) {
        p.tensor.zero_grad();
    }
}

template Tensor<float> time_embed(std::span<const int>, int);
template Tensor<double> time_embed(std::span<const int>, int);
template class DenoiserModel<float>;
template class DenoiserModel<double>;

} // namespace usdiff
