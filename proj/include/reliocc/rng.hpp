// Seed derivation and seeded random streams. Every stochastic component of
// the library draws from an engine derived here, so a (seed, purpose, index)
// triple fully determines the stream regardless of call interleaving.
#pragma once

#include <cstdint>
#include <random>
#include <span>

namespace reliocc {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

// Mixes a base seed with up to two stream tags into an independent seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0) {
    std::uint64_t s = base;
    std::uint64_t h = splitmix64(s);
    s ^= a * 0xD1B54A32D192ED03ull;
    h ^= splitmix64(s);
    s ^= b * 0x8CB92BA72F3D8DD7ull;
    h ^= splitmix64(s);
    return h;
}

inline std::mt19937_64 make_rng(std::uint64_t seed) { return std::mt19937_64(seed); }

inline void fill_gaussian(std::span<double> out, std::mt19937_64& rng,
                          double mean = 0.0, double stddev = 1.0) {
    std::normal_distribution<double> dist(mean, stddev);
    for (double& v : out) v = dist(rng);
}

}  // namespace reliocc
