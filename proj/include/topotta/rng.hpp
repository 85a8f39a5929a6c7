#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>

namespace topotta {

// Deterministic RNG used everywhere randomness is needed. mt19937_64 gives a
// standardized bit stream for a fixed seed; the distribution transforms below
// are hand-rolled (std::uniform_real_distribution etc. are not guaranteed to
// produce identical sequences across standard library implementations).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed), eng_(seed) {}

    std::uint64_t raw() { return eng_(); }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform01() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Uniform integer in [lo, hi], inclusive, unbiased via rejection.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        if (lo > hi) throw std::invalid_argument("Rng::uniform_int: empty range");
        const std::uint64_t range = static_cast<std::uint64_t>(hi - lo) + 1u;
        if (range == 0) return static_cast<std::int64_t>(eng_());  // full 64-bit span
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % range;
        std::uint64_t x;
        do { x = eng_(); } while (x >= limit);
        return lo + static_cast<std::int64_t>(x % range);
    }

    bool bernoulli(double p) { return uniform01() < p; }

    // Marsaglia polar method. Uses only sqrt/log, no sin/cos, and caches the
    // spare deviate so consumption of engine outputs stays reproducible.
    double normal(double mean = 0.0, double stddev = 1.0) {
        if (has_spare_) {
            has_spare_ = false;
            return mean + stddev * spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform01() - 1.0;
            v = 2.0 * uniform01() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double f = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * f;
        has_spare_ = true;
        return mean + stddev * u * f;
    }

    // Derived independent stream. Pure function of (constructor seed, tag):
    // forking twice with the same tag yields the same stream, so callers use
    // distinct tags (sample index, purpose id) for distinct streams.
    Rng fork(std::uint64_t tag) const { return Rng(mix(seed_ ^ 0x9e3779b97f4a7c15ull, tag)); }

    std::uint64_t seed() const { return seed_; }

private:
    // splitmix64 finalizer over the pair, good avalanche for sequential tags.
    static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
        std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1u);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    std::uint64_t seed_;
    std::mt19937_64 eng_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace topotta
