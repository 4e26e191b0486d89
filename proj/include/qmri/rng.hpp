#ifndef QMRI_RNG_HPP
#define QMRI_RNG_HPP

#include <cmath>
#include <cstdint>

// Counter-based random number generation. Every draw is a pure function of
// (seed, counter), so streams can be indexed from parallel loops and always
// reproduce bit-for-bit regardless of thread count or traversal order.

namespace qmri::rng {

/// SplitMix64 finalizer applied to seed/counter. Full 64-bit avalanche.
inline std::uint64_t mix64(std::uint64_t seed, std::uint64_t counter) {
    std::uint64_t z = seed + (counter + 1) * 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

/// Uniform double in (0, 1]. The +1 keeps log() finite for Box-Muller.
inline double uniform_open(std::uint64_t seed, std::uint64_t counter) {
    return static_cast<double>((mix64(seed, counter) >> 11) + 1) * 0x1.0p-53;
}

/// Standard normal via Box-Muller; draw `index` consumes uniforms 2*index
/// and 2*index+1 of the stream.
inline double normal(std::uint64_t seed, std::uint64_t index) {
    const double u1 = uniform_open(seed, 2 * index);
    const double u2 = uniform_open(seed, 2 * index + 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

/// Derive an independent stream seed (e.g. one per sampling chain).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    return mix64(seed ^ 0xD1B54A32D192ED03ULL, stream);
}

/// Stateful convenience wrapper over the counter stream.
struct NormalStream {
    std::uint64_t seed = 0;
    std::uint64_t next = 0;
    double operator()() { return normal(seed, next++); }
};

struct UniformStream {
    std::uint64_t seed = 0;
    std::uint64_t next = 0;
    double operator()() { return uniform_open(seed, next++); }
};

} // namespace qmri::rng

#endif
