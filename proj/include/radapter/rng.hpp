#pragma once

#include <array>
#include <cstdint>
#include <string_view>

namespace radapter {

// Deterministic counter-free PRNG: SplitMix64 expands a 64-bit seed into the
// 256-bit state of xoshiro256++. Identical seeds yield identical streams on
// every platform (integer arithmetic only). Named streams let callers keep
// data sampling, adapter dropping and weight init decorrelated by
// construction rather than by draw-count discipline.
class SeededRng {
public:
    explicit SeededRng(std::uint64_t seed);
    SeededRng(std::uint64_t seed, std::string_view stream_name);

    std::uint64_t next_u64();

    // Uniform in [0, 1), 53-bit resolution.
    double next_double();

    // Standard normal via Box-Muller; the paired draw is cached.
    double next_gaussian();

    bool bernoulli(double p_true);

    // Uniform integer in [0, n); n must be nonzero.
    std::uint64_t next_below(std::uint64_t n);

    // Derive an independent child stream; advances this stream by one draw.
    SeededRng split();

    std::uint64_t seed() const { return seed_; }

    static std::uint64_t mix(std::uint64_t a, std::uint64_t b);

private:
    std::array<std::uint64_t, 4> state_{};
    std::uint64_t seed_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace radapter
