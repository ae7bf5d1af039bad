// Copyright 2026 The usdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "usdiff/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace usdiff {

namespace {

double rel_error(double analytic, double numeric)
{
    return std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
}

double eval_no_grad(const std::function<Tensor<double>()>& loss)
{
    NoGradGuard guard;
    return loss().item();
}

} // namespace

double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f, const Tensor<double>& point,
                  double eps)
{
    if (!(eps > 0.0)) {
        throw ContractError("grad_check: eps must be positive");
    }
    Tensor<double> x = Tensor<double>::parameter(point.shape(), point.values());
    std::vector<Tensor<double>> params{x};
    const std::vector<std::string> names{"x"};
    return grad_check_params([&] { return f(x); }, params, names, eps).max_rel_error;
}

ParamCheckReport grad_check_params(const std::function<Tensor<double>()>& loss, std::span<Tensor<double>> params,
                                   std::span<const std::string> names, double eps, int64_t max_per_tensor)
{
    if (!(eps > 0.0)) {
        throw ContractError("grad_check: eps must be positive");
    }
    if (eval_no_grad(loss) != eval_no_grad(loss)) {
        throw ContractError("grad_check: function is not deterministic");
    }

    for (auto& p : params) {
        p.zero_grad();
    }
    Tensor<double> value = loss();
    if (value.numel() != 1) {
        throw ContractError("grad_check: function must be scalar-valued");
    }
    backward(value);

    ParamCheckReport report;
    for (size_t k = 0; k < params.size(); ++k) {
        auto& p = params[k];
        const std::vector<double> analytic = p.grad();
        auto data = p.mutable_data();
        const int64_t n = static_cast<int64_t>(data.size());
        const int64_t stride = (max_per_tensor > 0 && n > max_per_tensor) ? (n + max_per_tensor - 1) / max_per_tensor : 1;
        for (int64_t i = 0; i < n; i += stride) {
            const double saved = data[i];
            data[i] = saved + eps;
            const double up = eval_no_grad(loss);
            data[i] = saved - eps;
            const double down = eval_no_grad(loss);
            data[i] = saved;
            const double err = rel_error(analytic[i], (up - down) / (2.0 * eps));
            ++report.coordinates;
            if (err > report.max_rel_error || report.worst_index < 0) {
                report.max_rel_error = std::max(report.max_rel_error, err);
                report.worst_tensor = k < names.size() ? names[k] : std::to_string(k);
                report.worst_index = i;
            }
        }
        p.zero_grad();
    }
    return report;
}

} // namespace usdiff
