#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace mpsynth {

std::uint64_t splitmix64(std::uint64_t& state);

/// Seed of the named substream `label` under `base`. Distinct labels give
/// statistically independent streams.
std::uint64_t derive_seed(std::uint64_t base, std::string_view label);

/// Platform-stable generator. The distributions are implemented here rather
/// than with <random> adaptors, whose output is implementation-defined.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Uniform integer in [lo, hi] inclusive.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
    /// Standard normal via Box-Muller (no cached second value).
    double normal();

    std::string state() const;
    void set_state(const std::string& text);

private:
    std::mt19937_64 engine_;
};

} // namespace mpsynth
