// Copyright 2026 The usdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "usdiff/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <sstream>

namespace usdiff {

namespace {

constexpr char kMagic[4] = {'U', 'S', 'D', 'F'};

class Writer {
public:
    void u32(uint32_t v)
    {
        for (int i = 0; i < 4; ++i) {
            out_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
        }
    }
    void u64(uint64_t v)
    {
        for (int i = 0; i < 8; ++i) {
            out_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
        }
    }
    void f32(float v) { u32(std::bit_cast<uint32_t>(v)); }
    void bytes(const std::string& s)
    {
        u64(s.size());
        out_ += s;
    }
    void raw(const char* p, size_t n) { out_.append(p, n); }
    std::string take() { return std::move(out_); }

private:
    std::string out_;
};

class Parser {
public:
    explicit Parser(const std::string& in) : in_(in) {}

    void need(size_t n) const
    {
        if (in_.size() - pos_ < n) {
            throw IoError("checkpoint: truncated file");
        }
    }
    uint32_t u32()
    {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<uint32_t>(static_cast<unsigned char>(in_[pos_++])) << (8 * i);
        }
        return v;
    }
    uint64_t u64()
    {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<uint64_t>(static_cast<unsigned char>(in_[pos_++])) << (8 * i);
        }
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }
    std::string bytes()
    {
        const uint64_t n = u64();
        need(n);
        std::string s = in_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::string raw(size_t n)
    {
        need(n);
        std::string s = in_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == in_.size(); }

private:
    const std::string& in_;
    size_t pos_ = 0;
};

std::string schedule_text(const NoiseSchedule& s)
{
    KeyValues kv;
    write_kv(kv, "", s);
    return format_kv(kv);
}

std::string plan_text(const StepPlan& p)
{
    KeyValues kv;
    write_kv(kv, "", p);
    return format_kv(kv);
}

} // namespace

std::string read_text_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) {
        throw IoError("cannot read " + path.string());
    }
    return ss.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text)
{
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
        if (ec) {
            throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
        }
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    out.close();
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
}

void write_ppm(const std::filesystem::path& path, const Tensor<float>& image)
{
    if (!image.defined() || image.rank() != 3 || image.dim(0) != 3) {
        throw ContractError("write_ppm: expected [3,H,W]");
    }
    const auto h = image.dim(1);
    const auto w = image.dim(2);
    std::string data = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    const auto& v = image.values();
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
            for (int64_t c = 0; c < 3; ++c) {
                const double p = std::clamp(static_cast<double>(v[static_cast<size_t>((c * h + y) * w + x)]), -1.0, 1.0);
                data.push_back(static_cast<char>(static_cast<unsigned char>(std::lround((p + 1.0) * 127.5))));
            }
        }
    }
    write_text_file(path, data);
}

Tensor<float> read_ppm(const std::filesystem::path& path)
{
    const std::string bytes = read_text_file(path);
    std::istringstream in(bytes);
    std::string magic;
    int64_t w = 0, h = 0, maxval = 0;
    in >> magic >> w >> h >> maxval;
    if (!in || magic != "P6" || w < 1 || h < 1 || maxval != 255) {
        throw IoError(path.string() + ": not an 8-bit P6 image");
    }
    const auto offset = static_cast<size_t>(in.tellg()) + 1;
    if (bytes.size() != offset + static_cast<size_t>(3 * w * h)) {
        throw IoError(path.string() + ": pixel data has the wrong size");
    }
    std::vector<float> v(static_cast<size_t>(3 * w * h));
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
            for (int64_t c = 0; c < 3; ++c) {
                const auto b = static_cast<unsigned char>(bytes[offset + static_cast<size_t>((y * w + x) * 3 + c)]);
                v[static_cast<size_t>((c * h + y) * w + x)] = static_cast<float>(b / 127.5 - 1.0);
            }
        }
    }
    return Tensor<float>::from({3, h, w}, std::move(v));
}

Checkpoint make_checkpoint(const RunConfig& config, const DenoiserModel<float>& model, uint64_t step)
{
    if (!(config.model == model.config())) {
        throw ContractError("make_checkpoint: model does not match the run config");
    }
    Checkpoint ckpt{config, config.schedule(), config.plan(), step, {}};
    ckpt.config.out = ".";
    for (const auto& p : model.parameters()) {
        ckpt.tensors.push_back({p.name, p.tensor.shape(), p.tensor.values()});
    }
    return ckpt;
}

DenoiserModel<float> load_model(const Checkpoint& ckpt)
{
    DenoiserModel<float> model(ckpt.config.model, 0);
    auto& params = model.parameters();
    if (params.size() != ckpt.tensors.size()) {
        throw IoError("checkpoint: expected " + std::to_string(params.size()) + " tensors, found " +
                      std::to_string(ckpt.tensors.size()));
    }
    for (size_t i = 0; i < params.size(); ++i) {
        const auto& src = ckpt.tensors[i];
        if (src.name != params[i].name || src.shape != params[i].tensor.shape()) {
            throw IoError("checkpoint: tensor " + src.name + " " + to_string(src.shape) + " does not match " +
                          params[i].name + " " + to_string(params[i].tensor.shape()));
        }
        auto dst = params[i].tensor.mutable_data();
        std::copy(src.values.begin(), src.values.end(), dst.begin());
    }
    return model;
}

std::string serialize_checkpoint(const Checkpoint& ckpt)
{
    Writer w;
    w.raw(kMagic, 4);
    w.u32(Checkpoint::kVersion);
    w.bytes(format_kv(ckpt.config.to_kv()));
    w.bytes(schedule_text(ckpt.schedule));
    w.bytes(plan_text(ckpt.plan));
    w.u64(ckpt.step);
    w.u32(static_cast<uint32_t>(ckpt.tensors.size()));
    for (const auto& t : ckpt.tensors) {
        if (numel(t.shape) != static_cast<int64_t>(t.values.size())) {
            throw ContractError("checkpoint: tensor " + t.name + " has inconsistent shape");
        }
        w.u32(static_cast<uint32_t>(t.name.size()));
        w.raw(t.name.data(), t.name.size());
        w.u32(static_cast<uint32_t>(t.shape.size()));
        for (int64_t d : t.shape) {
            w.u64(static_cast<uint64_t>(d));
        }
        for (float v : t.values) {
            w.f32(v);
        }
    }
    return w.take();
}

Checkpoint parse_checkpoint(const std::string& bytes)
{
    Parser p(bytes);
    if (p.raw(4) != std::string(kMagic, 4)) {
        throw IoError("checkpoint: bad magic");
    }
    const uint32_t version = p.u32();
    if (version != Checkpoint::kVersion) {
        throw IoError("checkpoint: unsupported version " + std::to_string(version) + " (expected " +
                      std::to_string(Checkpoint::kVersion) + ")");
    }
    Checkpoint ckpt;
    try {
        ckpt.config = RunConfig::from_kv(parse_kv(p.bytes()));
        ckpt.schedule = read_schedule_kv(parse_kv(p.bytes()), "");
        ckpt.plan = read_plan_kv(parse_kv(p.bytes()), "");
    } catch (const ConfigError& e) {
        throw IoError(std::string("checkpoint: ") + e.what());
    } catch (const ContractError& e) {
        throw IoError(std::string("checkpoint: ") + e.what());
    }
    ckpt.step = p.u64();
    const uint32_t count = p.u32();
    for (uint32_t i = 0; i < count; ++i) {
        NamedTensor t;
        t.name = p.raw(p.u32());
        const uint32_t rank = p.u32();
        for (uint32_t r = 0; r < rank; ++r) {
            const uint64_t d = p.u64();
            if (d > (uint64_t{1} << 32)) {
                throw IoError("checkpoint: implausible dimension in " + t.name);
            }
            t.shape.push_back(static_cast<int64_t>(d));
        }
        const auto n = static_cast<size_t>(numel(t.shape));
        p.need(4 * n);
        t.values.resize(n);
        for (auto& v : t.values) {
            v = p.f32();
        }
        ckpt.tensors.push_back(std::move(t));
    }
    if (!p.done()) {
        throw IoError("checkpoint: trailing bytes");
    }
    return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt)
{
    write_text_file(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return parse_checkpoint(read_text_file(path)); }

} // namespace usdiff
