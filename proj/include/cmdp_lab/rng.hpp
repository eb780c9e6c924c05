#pragma once

#include <cstdint>
#include <random>
#include <span>

namespace cmdp {

/// The generator every sampling routine takes explicitly.
using Rng = std::mt19937_64;

/// SplitMix64 finalizer, used to derive independent per-run seeds.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

/// Seed for the `index`-th stream of a master seed. Counter based, so the
/// streams do not depend on the order in which they are requested.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index, std::uint64_t salt = 0) {
    return splitmix64(splitmix64(master ^ (salt * 0xD1B54A32D192ED03ull)) + index);
}

/// Uniform double in [0,1) from the top 53 bits. Unlike the std
/// distributions this is identical across standard libraries.
inline double uniform01(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline bool bernoulli(Rng& rng, double p) { return uniform01(rng) < p; }

inline std::size_t uniform_index(Rng& rng, std::size_t n) {
    return static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n)) % n;
}

/// Draws an index from a probability vector by inverse CDF. Mass lost to
/// rounding falls on the last index with positive probability.
inline std::size_t sample_categorical(std::span<const double> probs, Rng& rng) {
    const double u = uniform01(rng);
    double acc = 0.0;
    std::size_t last = 0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        if (probs[i] <= 0.0) continue;
        acc += probs[i];
        last = i;
        if (u < acc) return i;
    }
    return last;
}

}  // namespace cmdp
