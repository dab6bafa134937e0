#include "dcr/rng.hpp"

#include <cmath>
#include <numbers>

namespace dcr {

namespace {

constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;

std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

} // namespace

Rng::Rng(std::uint64_t seed, std::uint64_t stream)
    : seed_(seed), key_(mix64(seed ^ mix64(stream + kGamma))) {}

Rng::Rng(std::uint64_t seed, std::uint64_t key, int) : seed_(seed), key_(key) {}

Rng Rng::split(std::uint64_t stream) const {
    return Rng(seed_, mix64(key_ ^ mix64(stream * kGamma + 0x632BE59BD9B4E019ULL)), 0);
}

std::uint64_t Rng::next_u64() {
    return mix64(key_ + (++counter_) * kGamma);
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    // 1 - uniform() lies in (0, 1], so the log is finite.
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
}

std::uint64_t Rng::below(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
}

} // namespace dcr
