// Copyright 2026 The usdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "usdiff/diffusion.hpp"

#include <cmath>
#include <string>

#include "usdiff/ops.hpp"

namespace usdiff {

namespace {

void check_t(const NoiseSchedule& s, int t, int lo, const char* op)
{
    if (t < lo || t > s.T) {
        throw ContractError(std::string(op) + ": t=" + std::to_string(t) + " outside [" + std::to_string(lo) + ", " +
                            std::to_string(s.T) + "]");
    }
}

template <typename T>
std::vector<int> broadcast_t(const Tensor<T>& x, int t)
{
    return std::vector<int>(static_cast<size_t>(x.rank() >= 1 ? x.dim(0) : 1), t);
}

// a[n] * x + b[n] * y with per-sample constants; unbatched tensors use a single pair.
template <typename T>
Tensor<T> combine(const Tensor<T>& x, std::span<const double> a, const Tensor<T>& y, std::span<const double> b)
{
    if (x.rank() == 0 || static_cast<int64_t>(a.size()) != x.dim(0)) {
        return add(scale(x, static_cast<T>(a[0])), scale(y, static_cast<T>(b[0])));
    }
    std::vector<T> ca(a.begin(), a.end()), cb(b.begin(), b.end());
    return add(mul_per_sample<T>(x, ca), mul_per_sample<T>(y, cb));
}

template <typename T>
bool batched(const Tensor<T>& x, std::span<const int> t)
{
    if (t.size() == 1 && (x.rank() == 0 || x.dim(0) != 1)) {
        return false;
    }
    if (x.rank() == 0 || static_cast<int64_t>(t.size()) != x.dim(0)) {
        throw ContractError("need one time step per sample: got " + std::to_string(t.size()) + " for shape " +
                            to_string(x.shape()));
    }
    return true;
}

} // namespace

template <typename T>
Tensor<T> forward_sample(const Tensor<T>& x0, std::span<const int> t, const Tensor<T>& eps, const NoiseSchedule& s)
{
    if (!x0.defined() || !eps.defined() || x0.shape() != eps.shape()) {
        throw ContractError("forward_sample: eps must have the shape of x0");
    }
    const bool per_sample = batched(x0, t);
    std::vector<double> a, b;
    for (int ti : t) {
        check_t(s, ti, 0, "forward_sample");
        a.push_back(std::sqrt(s.alpha_bar[ti]));
        b.push_back(std::sqrt(1.0 - s.alpha_bar[ti]));
    }
    if (!per_sample) {
        a.resize(1);
        b.resize(1);
    }
    return combine(x0, a, eps, b);
}

template <typename T>
Tensor<T> forward_sample(const Tensor<T>& x0, int t, const Tensor<T>& eps, const NoiseSchedule& s)
{
    const int ts[1] = {t};
    return forward_sample(x0, std::span<const int>(ts), eps, s);
}

template <typename T>
Tensor<T> predict_x0(const Tensor<T>& x_t, const Tensor<T>& eps_hat, std::span<const int> t, const NoiseSchedule& s)
{
    if (!x_t.defined() || !eps_hat.defined() || x_t.shape() != eps_hat.shape()) {
        throw ContractError("predict_x0: eps_hat must have the shape of x_t");
    }
    const bool per_sample = batched(x_t, t);
    std::vector<double> a, b;
    for (int ti : t) {
        check_t(s, ti, 1, "predict_x0");
        const double ab = s.alpha_bar[ti];
        if (!(ab > 0.0)) {
            throw NumericError("predict_x0: alpha_bar is zero");
        }
        a.push_back(1.0 / std::sqrt(ab));
        b.push_back(-std::sqrt(1.0 - ab) / std::sqrt(ab));
    }
    if (!per_sample) {
        a.resize(1);
        b.resize(1);
    }
    return combine(x_t, a, eps_hat, b);
}

template <typename T>
Tensor<T> predict_x0(const Tensor<T>& x_t, const Tensor<T>& eps_hat, int t, const NoiseSchedule& s)
{
    const int ts[1] = {t};
    return predict_x0(x_t, eps_hat, std::span<const int>(ts), s);
}

template <typename T>
Tensor<T> ddim_step(const Tensor<T>& x_t, const Tensor<T>& eps_hat, int t_from, int t_to, const NoiseSchedule& s,
                    double eta, Rng* rng)
{
    check_t(s, t_from, 1, "ddim_step");
    check_t(s, t_to, 0, "ddim_step");
    if (t_to >= t_from) {
        throw ContractError("ddim_step: need t_from > t_to");
    }
    if (!(eta >= 0.0 && eta <= 1.0)) {
        throw ContractError("ddim_step: eta must be in [0, 1]");
    }
    const double ab_from = s.alpha_bar[t_from];
    const double ab_to = s.alpha_bar[t_to];
    if (ab_from >= ab_to) {
        throw ContractError("ddim_step: alpha_bar must increase from t_from to t_to");
    }
    const Tensor<T> x0 = predict_x0(x_t, eps_hat, t_from, s);
    if (t_to == 0) {
        return x0;
    }
    const double sigma = eta * std::sqrt((1.0 - ab_to) / (1.0 - ab_from)) * std::sqrt(1.0 - ab_from / ab_to);
    const double dir = std::sqrt(std::max(0.0, 1.0 - ab_to - sigma * sigma));
    const double a[1] = {std::sqrt(ab_to)};
    const double b[1] = {dir};
    Tensor<T> out = combine<T>(x0, a, eps_hat, b);
    if (sigma > 0.0) {
        if (rng == nullptr) {
            throw ContractError("ddim_step: eta > 0 requires a generator");
        }
        out = add(out, scale(Tensor<T>::randn(x_t.shape(), *rng), static_cast<T>(sigma)));
    }
    return out;
}

template <typename T>
Tensor<T> ancestral_step(const Tensor<T>& x_t, const Tensor<T>& eps_hat, int t, const NoiseSchedule& s, Rng& rng)
{
    check_t(s, t, 1, "ancestral_step");
    if (!x_t.defined() || !eps_hat.defined() || x_t.shape() != eps_hat.shape()) {
        throw ContractError("ancestral_step: eps_hat must have the shape of x_t");
    }
    const double inv_sqrt_alpha = 1.0 / std::sqrt(s.alpha[t]);
    const double a[1] = {inv_sqrt_alpha};
    const double b[1] = {-inv_sqrt_alpha * s.beta[t] / std::sqrt(1.0 - s.alpha_bar[t])};
    Tensor<T> mu = combine<T>(x_t, a, eps_hat, b);
    if (t == 1) {
        return mu;
    }
    return add(mu, scale(Tensor<T>::randn(x_t.shape(), rng), static_cast<T>(std::sqrt(s.beta_tilde[t]))));
}

template <typename T>
SampleResult<T> sample_from(const EpsFn<T>& eps_fn, const StepPlan& plan, Tensor<T> x, const NoiseSchedule& s,
                            Rng& rng, double eta)
{
    if (plan.steps.empty() || plan.T != s.T) {
        throw ContractError("sample: plan does not belong to this schedule");
    }
    SampleResult<T> result;
    for (int j = plan.K() - 1; j >= 0; --j) {
        const int t_from = plan.steps[j];
        const int t_to = j > 0 ? plan.steps[j - 1] : 0;
        const Tensor<T> eps_hat = eps_fn(x, t_from);
        ++result.denoiser_calls;
        if (eps_hat.shape() != x.shape()) {
            throw ContractError("sample: denoiser output shape " + to_string(eps_hat.shape()) + " != state shape " +
                                to_string(x.shape()));
        }
        x = ddim_step(x, eps_hat, t_from, t_to, s, eta, &rng);
    }
    result.x0 = std::move(x);
    return result;
}

template <typename T>
SampleResult<T> sample(const EpsFn<T>& eps_fn, const StepPlan& plan, const Shape& shape, const NoiseSchedule& s,
                       Rng& rng, double eta)
{
    Tensor<T> x = Tensor<T>::randn(shape, rng);
    return sample_from(eps_fn, plan, std::move(x), s, rng, eta);
}

template <typename T>
SampleResult<T> sample_ancestral(const EpsFn<T>& eps_fn, const Shape& shape, const NoiseSchedule& s, Rng& rng)
{
    SampleResult<T> result;
    Tensor<T> x = Tensor<T>::randn(shape, rng);
    for (int t = s.T; t >= 1; --t) {
        const Tensor<T> eps_hat = eps_fn(x, t);
        ++result.denoiser_calls;
        x = ancestral_step(x, eps_hat, t, s, rng);
    }
    result.x0 = std::move(x);
    return result;
}

template <typename T>
Tensor<T> training_loss(const DenoiseFn<T>& model, std::span<const ContextSample<T>> batch, const NoiseSchedule& s,
                        const StepPlan& plan, Rng& rng, const TrainingLossOptions& opt)
{
    if (batch.empty()) {
        throw ContractError("training_loss: empty batch");
    }
    if (plan.steps.empty()) {
        throw ContractError("training_loss: empty plan");
    }
    std::vector<int> t(batch.size());
    std::vector<Tensor<T>> x0_parts, eps_parts;
    for (size_t i = 0; i < batch.size(); ++i) {
        t[i] = opt.timesteps == TimestepSampling::plan ? plan.steps[rng.uniform_int(0, plan.K() - 1)]
                                                       : static_cast<int>(rng.uniform_int(1, s.T));
        const Tensor<T>& x0 = batch[i].target;
        Shape shape{1};
        shape.insert(shape.end(), x0.shape().begin(), x0.shape().end());
        x0_parts.push_back(x0.reshape(shape));
        eps_parts.push_back(Tensor<T>::randn(shape, rng));
    }
    const Tensor<T> x0 = concat_batch<T>(x0_parts);
    const Tensor<T> eps = concat_batch<T>(eps_parts);
    const Tensor<T> x_t = forward_sample(x0, std::span<const int>(t), eps, s);
    const Tensor<T> eps_hat = model(x_t, t, batch);
    if (!eps_hat.defined() || eps_hat.shape() != eps.shape()) {
        throw ContractError("training_loss: model output shape does not match eps");
    }
    return mse(eps, eps_hat);
}

#define USDIFF_INSTANTIATE_DIFFUSION(T)                                                                               \
    template Tensor<T> forward_sample(const Tensor<T>&, int, const Tensor<T>&, const NoiseSchedule&);                 \
    template Tensor<T> forward_sample(const Tensor<T>&, std::span<const int>, const Tensor<T>&, const NoiseSchedule&); \
    template Tensor<T> predict_x0(const Tensor<T>&, const Tensor<T>&, int, const NoiseSchedule&);                     \
    template Tensor<T> predict_x0(const Tensor<T>&, const Tensor<T>&, std::span<const int>, const NoiseSchedule&);    \
    template Tensor<T> ddim_step(const Tensor<T>&, const Tensor<T>&, int, int, const NoiseSchedule&, double, Rng*);   \
    template Tensor<T> ancestral_step(const Tensor<T>&, const Tensor<T>&, int, const NoiseSchedule&, Rng&);           \
    template SampleResult<T> sample(const EpsFn<T>&, const StepPlan&, const Shape&, const NoiseSchedule&, Rng&,       \
                                    double);                                                                          \
    template SampleResult<T> sample_from(const EpsFn<T>&, const StepPlan&, Tensor<T>, const NoiseSchedule&, Rng&,     \
                                         double);                                                                     \
    template SampleResult<T> sample_ancestral(const EpsFn<T>&, const Shape&, const NoiseSchedule&, Rng&);             \
    template Tensor<T> training_loss(const DenoiseFn<T>&, std::span<const ContextSample<T>>, const NoiseSchedule&,    \
                                     const StepPlan&, Rng&, const TrainingLossOptions&);

USDIFF_INSTANTIATE_DIFFUSION(float)
USDIFF_INSTANTIATE_DIFFUSION(double)

} // namespace usdiff
