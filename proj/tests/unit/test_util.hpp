// Copyright 2026 The usdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cstdint>
#include <vector>

#include "usdiff/rng.hpp"
#include "usdiff/tensor.hpp"

namespace usdiff::testing {

inline std::vector<double> normals(int64_t n, Rng& rng, double scale = 1.0)
{
    std::vector<double> v(static_cast<size_t>(n));
    for (auto& x : v) {
        x = rng.normal() * scale;
    }
    return v;
}

inline Tensor<double> rand_t(const Shape& shape, Rng& rng, double scale = 1.0)
{
    return Tensor<double>::from(shape, normals(numel(shape), rng, scale));
}

inline Tensor<double> rand_param(const Shape& shape, Rng& rng, double scale = 1.0)
{
    return Tensor<double>::parameter(shape, normals(numel(shape), rng, scale));
}

inline bool bit_equal(const std::vector<float>& a, const std::vector<float>& b)
{
    if (a.size() != b.size()) {
        return false;
    }
    for (size_t i = 0; i < a.size(); ++i) {
        if (std::bit_cast<uint32_t>(a[i]) != std::bit_cast<uint32_t>(b[i])) {
            return false;
        }
    }
    return true;
}

inline bool bit_equal(const std::vector<double>& a, const std::vector<double>& b)
{
    if (a.size() != b.size()) {
        return false;
    }
    for (size_t i = 0; i < a.size(); ++i) {
        if (std::bit_cast<uint64_t>(a[i]) != std::bit_cast<uint64_t>(b[i])) {
            return false;
        }
    }
    return true;
}

} // namespace usdiff::testing
