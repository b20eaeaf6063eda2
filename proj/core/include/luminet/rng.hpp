/* SPDX-FileCopyrightText: 2026 The LumiNet Desk Authors
 * SPDX-License-Identifier: Apache-2.0 */
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "luminet/error.hpp"

namespace luminet {

// Counter-based PRNG (Philox4x32-10). Every random decision in the project
// goes through this generator so runs reproduce bit-for-bit from a seed:
// the raw 32-bit stream is platform independent.
struct Philox4x32 {
    static constexpr uint32_t kMul0 = 0xD2511F53u;
    static constexpr uint32_t kMul1 = 0xCD9E8D57u;
    static constexpr uint32_t kWeyl0 = 0x9E3779B9u;
    static constexpr uint32_t kWeyl1 = 0xBB67AE85u;

    static std::array<uint32_t, 4> block(std::array<uint32_t, 4> ctr,
                                         std::array<uint32_t, 2> key) {
        for (int round = 0; round < 10; ++round) {
            const uint64_t p0 = uint64_t(kMul0) * ctr[0];
            const uint64_t p1 = uint64_t(kMul1) * ctr[2];
            const std::array<uint32_t, 4> next = {
                uint32_t(p1 >> 32) ^ ctr[1] ^ key[0],
                uint32_t(p1),
                uint32_t(p0 >> 32) ^ ctr[3] ^ key[1],
                uint32_t(p0),
            };
            ctr = next;
            key[0] += kWeyl0;
            key[1] += kWeyl1;
        }
        return ctr;
    }
};

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

/// Seedable deterministic RNG. `stream` opens an independent substream of the
/// same seed (scene index, repeat index, ...) without coupling draw counts.
class Rng {
public:
    explicit Rng(uint64_t seed, uint64_t stream = 0) {
        const uint64_t k = splitmix64(splitmix64(seed) ^ splitmix64(stream * 0x9E3779B97F4A7C15ull + 1));
        key_ = {uint32_t(k), uint32_t(k >> 32)};
        counter_ = {0, 0, 0, 0};
        buf_pos_ = 4;
        have_cached_normal_ = false;
    }

    uint32_t next_u32() {
        if (buf_pos_ == 4) {
            buf_ = Philox4x32::block(counter_, key_);
            advance_counter();
            buf_pos_ = 0;
        }
        return buf_[buf_pos_++];
    }

    uint64_t next_u64() {
        const uint64_t lo = next_u32();
        const uint64_t hi = next_u32();
        return (hi << 32) | lo;
    }

    /// Uniform double in [0,1) with 53 random bits.
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform double in [lo,hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller (pairs cached).
    double normal() {
        if (have_cached_normal_) {
            have_cached_normal_ = false;
            return cached_normal_;
        }
        // u1 in (0,1] so log() is finite.
        const double u1 = (double(next_u32()) + 1.0) * 0x1.0p-32;
        const double u2 = double(next_u32()) * 0x1.0p-32;
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        cached_normal_ = r * std::sin(a);
        have_cached_normal_ = true;
        return r * std::cos(a);
    }

    /// Unbiased integer in [0, n).
    uint32_t randint(uint32_t n) {
        if (n == 0) throw UsageError("randint: n must be positive");
        const uint32_t lim = uint32_t(-n) % n; // 2^32 mod n
        uint32_t r = next_u32();
        while (r < lim) r = next_u32();
        return r % n;
    }

    /// k distinct integers from [0, n), order randomized (partial Fisher-Yates).
    std::vector<int> sample_distinct(int n, int k) {
        if (k > n) throw UsageError("sample_distinct: k > n");
        std::vector<int> pool(n);
        for (int i = 0; i < n; ++i) pool[i] = i;
        for (int i = 0; i < k; ++i) {
            const int j = i + int(randint(uint32_t(n - i)));
            std::swap(pool[i], pool[j]);
        }
        pool.resize(k);
        return pool;
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = randint(uint32_t(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    void advance_counter() {
        for (int i = 0; i < 4; ++i) {
            if (++counter_[i] != 0) break;
        }
    }

    std::array<uint32_t, 2> key_;
    std::array<uint32_t, 4> counter_;
    std::array<uint32_t, 4> buf_;
    int buf_pos_;
    double cached_normal_ = 0.0;
    bool have_cached_normal_;
};

} // namespace luminet
