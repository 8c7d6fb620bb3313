#ifndef VOXSEG_RNG_HPP
#define VOXSEG_RNG_HPP

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace voxseg {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ull;
    }
    return h;
}

/// Derive a sub-seed from a base seed and a purpose label. Every random
/// stream in the project is named this way so runs are reproducible from a
/// single configured seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view label, std::uint64_t index = 0) {
    return splitmix64(base ^ fnv1a64(label) ^ (0x9E3779B97F4A7C15ull * (index + 1)));
}

/// Deterministic random source. Distributions are implemented by hand on top
/// of mt19937_64 so sequences do not depend on the standard library vendor.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    /// Uniform in [0, 1).
    double uniform01() { return double(eng_() >> 11) * 0x1.0p-53; }

    /// Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        return std::uint64_t((static_cast<unsigned __int128>(eng_()) * n) >> 64);
    }

    /// Uniform integer in [lo, hi] inclusive.
    int range(int lo, int hi) { return lo + int(below(std::uint64_t(hi - lo + 1))); }

    /// Standard normal via Box-Muller.
    double normal() {
        double u1 = 1.0 - uniform01(); // (0, 1], keeps the log finite
        double u2 = uniform01();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

private:
    std::mt19937_64 eng_;
};

} // namespace voxseg

#endif // VOXSEG_RNG_HPP
