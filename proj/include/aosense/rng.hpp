#pragma once

#include <cstdint>

namespace aosense {

// Counter-based generator: every output is a pure function of
// (key, stream, counter), so independent streams can be drawn in any
// order, from any thread, and still reproduce bit-for-bit.
class CounterRng {
public:
    explicit CounterRng(std::uint64_t key, std::uint64_t stream = 0) noexcept
        : key_(key), stream_(stream) {}

    std::uint64_t next_u64() noexcept;

    // uniform in [0, 1)
    double uniform() noexcept;
    // uniform in [lo, hi)
    double uniform(double lo, double hi) noexcept;
    // uniform integer in [lo, hi] inclusive
    std::uint64_t uniform_int(std::uint64_t lo, std::uint64_t hi) noexcept;

    // standard normal (Marsaglia polar, spare cached)
    double normal() noexcept;
    double normal(double mean, double sigma) noexcept;

    // Poisson with mean lambda >= 0. Knuth below 30, PTRS rejection above.
    std::uint64_t poisson(double lambda) noexcept;

    std::uint64_t key() const noexcept { return key_; }
    std::uint64_t stream() const noexcept { return stream_; }

private:
    std::uint64_t key_;
    std::uint64_t stream_;
    std::uint64_t counter_ = 0;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// Fold several stream identifiers into one, for call sites keyed by
// tuples like (step, sample, site).
std::uint64_t fold_stream(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0) noexcept;

}  // namespace aosense
