// Copyright 2026 The usdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

namespace usdiff {

/// Philox4x32-10 counter-based generator.
///
/// The output stream is a pure function of (seed, stream, counter), so two
/// generators built from the same seed and stream produce identical values on
/// any worker. `fork` derives an independent stream without consuming output.
class Rng {
public:
    explicit Rng(uint64_t seed, uint64_t stream = 0) noexcept
        : seed_(seed), stream_(stream)
    {
        key_ = {static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32)};
        counter_ = {0, 0, static_cast<uint32_t>(stream), static_cast<uint32_t>(stream >> 32)};
    }

    uint64_t seed() const noexcept { return seed_; }
    uint64_t stream() const noexcept { return stream_; }

    /// Independent generator keyed by (seed, mix(stream, id)).
    Rng fork(uint64_t id) const noexcept { return Rng(seed_, splitmix(stream_ ^ splitmix(id + 0x9E3779B97F4A7C15ull))); }

    uint32_t next_u32() noexcept
    {
        if (index_ == 4) {
            refill();
        }
        return buffer_[index_++];
    }

    uint64_t next_u64() noexcept
    {
        const uint64_t hi = next_u32();
        return (hi << 32) | next_u32();
    }

    /// Uniform double in [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [lo, hi] (inclusive).
    int64_t uniform_int(int64_t lo, int64_t hi) noexcept
    {
        const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        // Lemire-style rejection keeps the draw unbiased.
        const uint64_t limit = UINT64_MAX - UINT64_MAX % span;
        uint64_t v = next_u64();
        while (v >= limit) {
            v = next_u64();
        }
        return lo + static_cast<int64_t>(v % span);
    }

    /// Standard normal via Box-Muller; the second variate is cached.
    double normal() noexcept
    {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) {
            u1 = uniform();
        }
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

private:
    static uint64_t splitmix(uint64_t z) noexcept
    {
        z += 0x9E3779B97F4A7C15ull;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    void refill() noexcept
    {
        constexpr uint32_t kMul0 = 0xD2511F53u;
        constexpr uint32_t kMul1 = 0xCD9E8D57u;
        constexpr uint32_t kWeyl0 = 0x9E3779B9u;
        constexpr uint32_t kWeyl1 = 0xBB67AE85u;

        std::array<uint32_t, 4> x = counter_;
        std::array<uint32_t, 2> k = key_;
        for (int round = 0; round < 10; ++round) {
            const uint64_t p0 = static_cast<uint64_t>(kMul0) * x[0];
            const uint64_t p1 = static_cast<uint64_t>(kMul1) * x[2];
            x = {static_cast<uint32_t>(p1 >> 32) ^ x[1] ^ k[0], static_cast<uint32_t>(p1),
                 static_cast<uint32_t>(p0 >> 32) ^ x[3] ^ k[1], static_cast<uint32_t>(p0)};
            k[0] += kWeyl0;
            k[1] += kWeyl1;
        }
        buffer_ = x;
        index_ = 0;
        // 64-bit block counter in the low words; the stream id occupies the high words.
        if (++counter_[0] == 0) {
            ++counter_[1];
        }
    }

    uint64_t seed_;
    uint64_t stream_;
    std::array<uint32_t, 2> key_{};
    std::array<uint32_t, 4> counter_{};
    std::array<uint32_t, 4> buffer_{};
    int index_ = 4;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

} // namespace usdiff
