// Copyright 2026 The usdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "usdiff/optim.hpp"

#include <cmath>

namespace usdiff {

AdamW::AdamW(std::vector<Tensor<float>> params, const AdamWConfig& cfg) : params_(std::move(params)), cfg_(cfg)
{
    if (!(cfg.lr > 0.0) || !(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0) || !(cfg.beta2 >= 0.0 && cfg.beta2 < 1.0) ||
        !(cfg.eps > 0.0) || !(cfg.weight_decay >= 0.0)) {
        throw ContractError("adamw: invalid hyper-parameters");
    }
    for (const auto& p : params_) {
        if (!p.is_leaf() || !p.requires_grad()) {
            throw ContractError("adamw: parameters must be trainable leaves");
        }
        m_.emplace_back(static_cast<size_t>(p.numel()), 0.0);
        v_.emplace_back(static_cast<size_t>(p.numel()), 0.0);
    }
}

double AdamW::step()
{
    std::vector<std::vector<float>> grads;
    grads.reserve(params_.size());
    double sq = 0.0;
    for (const auto& p : params_) {
        grads.push_back(p.grad());
        for (float g : grads.back()) {
            sq += static_cast<double>(g) * g;
        }
    }
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) {
        throw NumericError("adamw: non-finite gradient norm");
    }
    const double clip = cfg_.grad_clip > 0.0 && norm > cfg_.grad_clip ? cfg_.grad_clip / norm : 1.0;

    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
        auto w = params_[i].mutable_data();
        auto& m = m_[i];
        auto& v = v_[i];
        const auto& g = grads[i];
        for (size_t j = 0; j < w.size(); ++j) {
            const double gj = g[j] * clip;
            m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
            v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
            const double update = (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
            const double decayed = static_cast<double>(w[j]) * (1.0 - cfg_.lr * cfg_.weight_decay);
            w[j] = static_cast<float>(decayed - cfg_.lr * update);
        }
    }
    return norm;
}

void AdamW::zero_grad()
{
    for (auto& p : params_) {
        p.zero_grad();
    }
}

} // namespace usdiff
