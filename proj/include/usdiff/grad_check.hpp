// Copyright 2026 The usdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <span>
#include <string>

#include "usdiff/tensor.hpp"

namespace usdiff {

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|)
/// for a scalar function of one tensor. Throws ContractError when two forward
/// passes at the same point disagree.
double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f, const Tensor<double>& point,
                  double eps);

struct ParamCheckReport {
    double max_rel_error = 0.0;
    std::string worst_tensor;
    int64_t worst_index = -1;
    int64_t coordinates = 0;
};

/// Same metric over the coordinates of a set of leaf tensors that `loss` closes
/// over. `max_per_tensor` > 0 limits each tensor to an evenly strided subset.
ParamCheckReport grad_check_params(const std::function<Tensor<double>()>& loss, std::span<Tensor<double>> params,
                                   std::span<const std::string> names, double eps, int64_t max_per_tensor = 0);

} // namespace usdiff
