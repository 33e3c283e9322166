#ifndef MOELORA_RNG_HPP
#define MOELORA_RNG_HPP

#include <cmath>
#include <cstdint>

namespace moelora {

namespace detail {

// SplitMix64 output function (Steele, Lea & Flood, "Fast splittable
// pseudorandom number generators").
inline std::uint64_t splitmix64(std::uint64_t x) {
    x ^= x >> 30;
    x *= 0xBF58476D1CE4E5B9ULL;
    x ^= x >> 27;
    x *= 0x94D049BB133111EBULL;
    x ^= x >> 31;
    return x;
}

inline constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

} // namespace detail

/// Counter-based deterministic stream: the value at (seed, counter) is a pure
/// function of both, so identical state reproduces identical draws on any
/// platform with IEEE-754 doubles.
struct RngStream {
    std::uint64_t seed = 0;
    std::uint64_t counter = 0;

    RngStream() = default;
    explicit RngStream(std::uint64_t s) : seed(s) {}

    std::uint64_t next_u64() {
        ++counter;
        return detail::splitmix64(seed + counter * detail::kGolden);
    }

    /// Uniform on [0, 1), 53 random mantissa bits.
    double next_uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    /// Uniform on (0, 1]; safe as a log argument.
    double next_uniform_open() {
        return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
    }

    /// Standard normal via Box-Muller. Consumes exactly two counter steps.
    double next_gaussian() {
        const double u1 = next_uniform_open();
        const double u2 = next_uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    /// Independent stream derived from this seed and a purpose tag.
    RngStream substream(std::uint64_t tag) const {
        return RngStream(detail::splitmix64(seed + (tag + 1) * detail::kGolden));
    }
};

} // namespace moelora

#endif // MOELORA_RNG_HPP
