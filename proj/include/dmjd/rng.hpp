#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "dmjd/error.hpp"

namespace dmjd {

// Deterministic 64-bit generator (splitmix64 core). Self-contained so mask
// sequences and parameter draws never depend on the standard library's
// unspecified distribution algorithms: the same seed gives the same stream
// on every platform.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n). Lemire's method, unbiased.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw contract_error("Rng::below: n must be positive");
        unsigned __int128 m = static_cast<unsigned __int128>(next_u64()) * n;
        auto lo = static_cast<std::uint64_t>(m);
        if (lo < n) {
            const std::uint64_t t = (0 - n) % n;
            while (lo < t) {
                m = static_cast<unsigned __int128>(next_u64()) * n;
                lo = static_cast<std::uint64_t>(m);
            }
        }
        return static_cast<std::uint64_t>(m >> 64);
    }

    // Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    // Standard normal via Box-Muller; consumes exactly two draws per call.
    double normal() {
        const double u1 = 1.0 - next_double();  // (0, 1]
        const double u2 = next_double();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    // Normal rejected outside +-2 sigma, then scaled.
    double truncated_normal(double stddev) {
        double z;
        do {
            z = normal();
        } while (std::fabs(z) > 2.0);
        return z * stddev;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[below(i)]);
        }
    }

    // k distinct elements drawn uniformly from pool, partial Fisher-Yates.
    // pool is reordered; the sample occupies pool[0..k).
    template <typename T>
    std::vector<T> sample(std::vector<T>& pool, std::size_t k) {
        if (k > pool.size()) throw contract_error("Rng::sample: k exceeds pool size");
        for (std::size_t i = 0; i < k; ++i) {
            const std::size_t j = i + static_cast<std::size_t>(below(pool.size() - i));
            std::swap(pool[i], pool[j]);
        }
        return std::vector<T>(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
    }

    // Independent child stream; advances this generator by one draw.
    Rng fork(std::uint64_t stream = 0) { return Rng(next_u64() ^ (stream * 0x9e3779b97f4a7c15ull)); }

private:
    std::uint64_t state_;
};

}  // namespace dmjd
