#include "aosense/rng.hpp"

#include <cmath>

namespace aosense {

namespace {

// SplitMix64 finalizer; full-avalanche mix of a 64-bit word.
inline std::uint64_t mix64(std::uint64_t z) noexcept {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace

std::uint64_t fold_stream(std::uint64_t a, std::uint64_t b, std::uint64_t c) noexcept {
    return mix64(mix64(a) ^ (b * 0xd6e8feb86659fd93ULL) ^ (c * 0xa0761d6478bd642fULL));
}

std::uint64_t CounterRng::next_u64() noexcept {
    std::uint64_t z = key_;
    z = mix64(z ^ (stream_ * 0xd6e8feb86659fd93ULL));
    z = mix64(z ^ (counter_ * 0xa0761d6478bd642fULL));
    ++counter_;
    return z;
}

double CounterRng::uniform() noexcept {
    // 53 high bits -> [0, 1)
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double CounterRng::uniform(double lo, double hi) noexcept {
    return lo + (hi - lo) * uniform();
}

std::uint64_t CounterRng::uniform_int(std::uint64_t lo, std::uint64_t hi) noexcept {
    const std::uint64_t span = hi - lo + 1;
    if (span == 0) return next_u64();  // full range
    // Fixed-point multiply; bias is negligible for the spans used here
    // (< 2^32) and the algorithm is platform-independent.
    const std::uint64_t r = next_u64();
    __uint128_t wide = static_cast<__uint128_t>(r) * span;
    return lo + static_cast<std::uint64_t>(wide >> 64);
}

double CounterRng::normal() noexcept {
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
    const double f = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * f;
    have_spare_ = true;
    return u * f;
}

double CounterRng::normal(double mean, double sigma) noexcept {
    return mean + sigma * normal();
}

std::uint64_t CounterRng::poisson(double lambda) noexcept {
    if (!(lambda > 0.0)) return 0;
    if (lambda < 30.0) {
        // Knuth multiplicative
        const double limit = std::exp(-lambda);
        double prod = uniform();
        std::uint64_t k = 0;
        while (prod > limit) {
            prod *= uniform();
            ++k;
        }
        return k;
    }
    // PTRS transformed rejection (Hormann 1993).
    const double b = 0.931 + 2.53 * std::sqrt(lambda);
    const double a = -0.059 + 0.02483 * b;
    const double inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    const double v_r = 0.9277 - 3.6224 / (b - 2.0);
    for (;;) {
        const double u = uniform() - 0.5;
        const double v = uniform();
        const double us = 0.5 - std::fabs(u);
        const double kf = std::floor((2.0 * a / us + b) * u + lambda + 0.43);
        if (us >= 0.07 && v <= v_r) return static_cast<std::uint64_t>(kf);
        if (kf < 0.0 || (us < 0.013 && v > us)) continue;
        const double log_l = std::log(lambda);
        if (std::log(v * inv_alpha / (a / (us * us) + b)) <=
            kf * log_l - lambda - std::lgamma(kf + 1.0)) {
            return static_cast<std::uint64_t>(kf);
        }
    }
}

}  // namespace aosense
