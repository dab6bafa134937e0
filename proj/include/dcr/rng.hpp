#pragma once

#include <cstdint>

namespace dcr {

/// Counter-based generator. Value n of a stream is a pure function of
/// (seed, stream id, n), so independent streams can be split off for data,
/// initialization and noise without sharing state.
class Rng {
public:
    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

    /// Child stream; does not advance this generator.
    Rng split(std::uint64_t stream) const;

    std::uint64_t next_u64();
    /// Uniform in [0, 1) with 53 random bits.
    double uniform();
    /// Standard normal via Box-Muller (both outputs used in turn).
    double normal();
    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n);

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t counter() const noexcept { return counter_; }

private:
    Rng(std::uint64_t seed, std::uint64_t key, int);

    std::uint64_t seed_;
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace dcr
