#pragma once

// Keyed, counter-style random streams. Every draw site in the sampler gets
// its own stream identified by (seed, chain, iteration, block), so results
// do not depend on thread scheduling: two runs with the same keys produce
// bit-identical sequences no matter how work is distributed.

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>

namespace stbreg {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(const std::uint64_t* words, int n) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (int i = 0; i < n; ++i) {
        std::uint64_t w = words[i];
        for (int b = 0; b < 8; ++b) {
            h ^= (w >> (8 * b)) & 0xFFULL;
            h *= 0x100000001B3ULL;
        }
    }
    return h;
}

inline std::uint64_t rotl64(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
}

}  // namespace detail

// Identifies one logical draw site within a run.
struct StreamKey {
    std::uint64_t chain = 0;
    std::uint64_t iteration = 0;
    std::uint64_t block = 0;
};

// xoshiro256++ seeded from a hash of (seed, key). Value type: copy freely,
// hand one to each worker.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed, StreamKey key = {}) {
        const std::uint64_t words[4] = {seed, key.chain, key.iteration, key.block};
        std::uint64_t x = detail::fnv1a64(words, 4);
        for (auto& s : state_) s = detail::splitmix64(x);
    }

    RngStream(std::uint64_t seed, std::uint64_t chain, std::uint64_t iteration,
              std::uint64_t block)
        : RngStream(seed, StreamKey{chain, iteration, block}) {}

    std::uint64_t next_u64() {
        const std::uint64_t result = detail::rotl64(state_[0] + state_[3], 23) + state_[0];
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = detail::rotl64(state_[3], 45);
        return result;
    }

    // Uniform on [0,1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform on (0,1]; safe as a log() argument.
    double uniform_pos() {
        return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Integer in [lo, hi] inclusive, by rejection on the top range.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
        std::uint64_t u;
        do {
            u = next_u64();
        } while (u >= limit);
        return lo + static_cast<std::int64_t>(u % span);
    }

    // Standard normal via the polar method; second variate cached.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform() - 1.0;
            v = 2.0 * uniform() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double m = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * m;
        have_spare_ = true;
        return u * m;
    }

    double exponential() { return -std::log(uniform_pos()); }

    // Gamma(shape, 1) by Marsaglia-Tsang, boosted for shape < 1.
    double gamma(double shape) {
        if (!(shape > 0.0)) throw std::invalid_argument("gamma: shape must be > 0");
        if (shape < 1.0) {
            const double u = uniform_pos();
            return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
        }
        const double d = shape - 1.0 / 3.0;
        const double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x, v;
            do {
                x = normal();
                v = 1.0 + c * x;
            } while (v <= 0.0);
            v = v * v * v;
            const double u = uniform_pos();
            const double x2 = x * x;
            if (u < 1.0 - 0.0331 * x2 * x2) return d * v;
            if (std::log(u) < 0.5 * x2 + d * (1.0 - v + std::log(v))) return d * v;
        }
    }

    double beta(double a, double b) {
        const double x = gamma(a);
        const double y = gamma(b);
        return x / (x + y);
    }

private:
    std::array<std::uint64_t, 4> state_{};
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace stbreg
