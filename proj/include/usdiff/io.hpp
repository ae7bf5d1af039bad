// Copyright 2026 The usdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "usdiff/config.hpp"
#include "usdiff/model.hpp"

namespace usdiff {

/// Unreadable/unwritable files and malformed binary artifacts.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

/// Binary P6, 8 bits per channel. Values in [-1,1] map to [0,255].
void write_ppm(const std::filesystem::path& path, const Tensor<float>& image);
Tensor<float> read_ppm(const std::filesystem::path& path);

struct NamedTensor {
    std::string name;
    Shape shape;
    std::vector<float> values;

    bool operator==(const NamedTensor&) const = default;
};

/// Little-endian file: "USDF", u32 version, then length-prefixed config,
/// schedule and plan text, u64 step counter and named f32 tensors.
struct Checkpoint {
    static constexpr uint32_t kVersion = 1;

    RunConfig config;
    NoiseSchedule schedule;
    StepPlan plan;
    uint64_t step = 0;
    std::vector<NamedTensor> tensors;
};

Checkpoint make_checkpoint(const RunConfig& config, const DenoiserModel<float>& model, uint64_t step);
/// Rebuilds the model; names and shapes must match the checkpoint exactly.
DenoiserModel<float> load_model(const Checkpoint& ckpt);

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(const std::string& bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

} // namespace usdiff
