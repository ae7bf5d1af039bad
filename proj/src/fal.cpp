// Copyright 2026 The usdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "usdiff/fal.hpp"

#include <string>
#include <vector>

#include "usdiff/ops.hpp"

namespace usdiff {

void FeedbackConfig::validate(const NoiseSchedule& s) const
{
    if (!(lambda >= 0.0)) {
        throw ContractError("feedback: lambda must be >= 0");
    }
    if (t_prime < 1 || t_prime > s.T) {
        throw ContractError("feedback: t_prime must be in [1, T]");
    }
    if (batch < 1) {
        throw ContractError("feedback: batch must be >= 1");
    }
}

void FeedbackConfig::write_kv(KeyValues& kv, const std::string& prefix) const
{
    kv[prefix + "lambda"] = format_double(lambda);
    kv[prefix + "t_prime"] = std::to_string(t_prime);
    kv[prefix + "enabled"] = enabled ? "true" : "false";
    kv[prefix + "annotator_grad"] = annotator_grad ? "true" : "false";
    kv[prefix + "restrict_to_plan"] = restrict_to_plan ? "true" : "false";
    kv[prefix + "batch"] = std::to_string(batch);
}

FeedbackConfig FeedbackConfig::read_kv(const KeyValues& kv, const std::string& prefix)
{
    auto get = [&](const char* name) -> const std::string& {
        const auto it = kv.find(prefix + name);
        if (it == kv.end()) {
            throw ConfigError("missing key: " + prefix + name);
        }
        return it->second;
    };
    FeedbackConfig c;
    c.lambda = parse_double(prefix + "lambda", get("lambda"));
    c.t_prime = static_cast<int>(parse_int(prefix + "t_prime", get("t_prime")));
    c.enabled = parse_bool(prefix + "enabled", get("enabled"));
    c.annotator_grad = parse_bool(prefix + "annotator_grad", get("annotator_grad"));
    c.restrict_to_plan = parse_bool(prefix + "restrict_to_plan", get("restrict_to_plan"));
    c.batch = static_cast<int>(parse_int(prefix + "batch", get("batch")));
    return c;
}

int draw_feedback_t(const FeedbackConfig& cfg, const StepPlan& plan, Rng& rng)
{
    if (cfg.t_prime < 1) {
        throw ContractError("feedback: t_prime must be >= 1");
    }
    if (!cfg.restrict_to_plan) {
        return static_cast<int>(rng.uniform_int(1, cfg.t_prime));
    }
    std::vector<int> allowed;
    for (int t : plan.steps) {
        if (t <= cfg.t_prime) {
            allowed.push_back(t);
        }
    }
    if (allowed.empty()) {
        throw ContractError("feedback: no plan step lies in [1, t_prime]");
    }
    return allowed[rng.uniform_int(0, static_cast<int64_t>(allowed.size()) - 1)];
}

namespace {

// Clamped one-step prediction of the target from a fresh (t, eps) draw.
template <typename T>
Tensor<T> direct_prediction(const DenoiseFn<T>& model, std::span<const ContextSample<T>> items,
                            const NoiseSchedule& s, const FeedbackConfig& cfg, const StepPlan& plan, Rng& rng)
{
    std::vector<int> t(items.size());
    std::vector<Tensor<T>> x0_parts, eps_parts;
    for (size_t i = 0; i < items.size(); ++i) {
        t[i] = draw_feedback_t(cfg, plan, rng);
        const Tensor<T>& x0 = items[i].target;
        Shape shape{1};
        shape.insert(shape.end(), x0.shape().begin(), x0.shape().end());
        x0_parts.push_back(x0.reshape(shape));
        eps_parts.push_back(Tensor<T>::randn(shape, rng));
    }
    const Tensor<T> x0 = concat_batch<T>(x0_parts);
    const Tensor<T> x_t = forward_sample(x0, std::span<const int>(t), concat_batch<T>(eps_parts), s);
    const Tensor<T> eps_hat = model(x_t, t, items);
    if (!eps_hat.defined() || eps_hat.shape() != x_t.shape()) {
        throw ContractError("feedback: model output shape does not match x_t");
    }
    return clamp(predict_x0(x_t, eps_hat, std::span<const int>(t), s), T(-1), T(1));
}

template <typename T>
void require_direction(std::span<const ContextSample<T>> items, Direction d, const char* op)
{
    if (items.empty()) {
        throw ContractError(std::string(op) + ": empty batch");
    }
    for (const auto& item : items) {
        if (item.task.direction != d) {
            throw ContractError(std::string(op) + ": item task " + to_string(item.task) + " has the wrong direction");
        }
        if (item.task.kind != items[0].task.kind) {
            throw ContractError(std::string(op) + ": items must share one map kind");
        }
    }
}

template <typename T>
Tensor<T> stack(std::span<const ContextSample<T>> items, Tensor<T> ContextSample<T>::* field)
{
    return stack_images(std::vector<ContextSample<T>>(items.begin(), items.end()), field);
}

} // namespace

template <typename T>
Tensor<T> feedback_loss_image2map(const DenoiseFn<T>& model, std::span<const ContextSample<T>> items,
                                  const NoiseSchedule& s, const FeedbackConfig& cfg, const StepPlan& plan, Rng& rng,
                                  const AnnotatorOptions& opt)
{
    require_direction(items, Direction::image2map, "feedback_loss_image2map");
    const Tensor<T> x0_pred = direct_prediction(model, items, s, cfg, plan, rng);
    Tensor<T> extracted;
    {
        NoGradGuard no_grad;
        extracted = annotate(stack(items, &ContextSample<T>::query), items[0].task.kind, opt);
    }
    return mse(extracted, x0_pred);
}

template <typename T>
Tensor<T> feedback_loss_map2image(const DenoiseFn<T>& model, std::span<const ContextSample<T>> items,
                                  const NoiseSchedule& s, const FeedbackConfig& cfg, const StepPlan& plan, Rng& rng,
                                  const AnnotatorOptions& opt)
{
    require_direction(items, Direction::map2image, "feedback_loss_map2image");
    const Tensor<T> x0_pred = direct_prediction(model, items, s, cfg, plan, rng);
    Tensor<T> extracted;
    if (cfg.annotator_grad) {
        extracted = annotate(x0_pred, items[0].task.kind, opt);
    } else {
        NoGradGuard no_grad;
        extracted = annotate(x0_pred.detach(), items[0].task.kind, opt);
    }
    return mse(stack(items, &ContextSample<T>::query), extracted);
}

template <typename T>
Tensor<T> feedback_loss(const DenoiseFn<T>& model, std::span<const ContextSample<T>> items, const NoiseSchedule& s,
                        const FeedbackConfig& cfg, const StepPlan& plan, Rng& rng, const AnnotatorOptions& opt)
{
    if (items.empty()) {
        throw ContractError("feedback_loss: empty batch");
    }
    if (items[0].task.direction == Direction::image2map) {
        return feedback_loss_image2map(model, items, s, cfg, plan, rng, opt);
    }
    return feedback_loss_map2image(model, items, s, cfg, plan, rng, opt);
}

template <typename T>
Tensor<T> total_loss(const Tensor<T>& l_train, const Tensor<T>& l_feedback, const FeedbackConfig& cfg)
{
    if (!l_train.defined() || l_train.numel() != 1) {
        throw ContractError("total_loss: l_train must be a scalar");
    }
    if (!cfg.active()) {
        return l_train;
    }
    if (!l_feedback.defined() || l_feedback.numel() != 1) {
        throw ContractError("total_loss: l_feedback must be a scalar");
    }
    return add(l_train, scale(l_feedback.reshape(l_train.shape()), static_cast<T>(cfg.lambda)));
}

#define USDIFF_INSTANTIATE_FAL(T)                                                                                     \
    template Tensor<T> feedback_loss_image2map(const DenoiseFn<T>&, std::span<const ContextSample<T>>,               \
                                               const NoiseSchedule&, const FeedbackConfig&, const StepPlan&, Rng&,    \
                                               const AnnotatorOptions&);                                              \
    template Tensor<T> feedback_loss_map2image(const DenoiseFn<T>&, std::span<const ContextSample<T>>,               \
                                               const NoiseSchedule&, const FeedbackConfig&, const StepPlan&, Rng&,    \
                                               const AnnotatorOptions&);                                              \
    template Tensor<T> feedback_loss(const DenoiseFn<T>&, std::span<const ContextSample<T>>, const NoiseSchedule&,   \
                                     const FeedbackConfig&, const StepPlan&, Rng&, const AnnotatorOptions&);          \
    template Tensor<T> total_loss(const Tensor<T>&, const Tensor<T>&, const FeedbackConfig&);

USDIFF_INSTANTIATE_FAL(float)
USDIFF_INSTANTIATE_FAL(double)

} // namespace usdiff
