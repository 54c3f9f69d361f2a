#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace hbert {

// Deterministic random source. std::mt19937_64 has a fully specified output
// sequence, and all distributions here are hand-rolled on top of its raw
// 64-bit output, so results are identical across platforms and standard
// library versions. Never use std::*_distribution in reproducible paths.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53 bits of precision.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    bool bernoulli(double p) { return uniform() < p; }

    // Unbiased integer in [0, n) via rejection sampling.
    std::size_t uniform_index(std::size_t n);

    // Box-Muller; draws two raw values per call, no cached state.
    double normal();

    // Knuth inversion; intended for small means.
    std::uint64_t poisson(double mean);

    // One draw from a categorical distribution given cumulative weights.
    std::size_t categorical(const std::vector<double>& cumulative);

    // Fisher-Yates with uniform_index, back to front.
    template <typename T>
    void shuffle(std::vector<T>& values) {
        for (std::size_t i = values.size(); i > 1; --i) {
            std::size_t j = uniform_index(i);
            std::swap(values[i - 1], values[j]);
        }
    }

private:
    std::mt19937_64 engine_;
};

// Derives the seed of a named sub-stream (data / mask / dropout / init / ...)
// from a master seed, so any stage can be reproduced in isolation.
std::uint64_t derive_seed(std::uint64_t master, std::string_view stream,
                          std::uint64_t a = 0, std::uint64_t b = 0);

// FNV-1a, used for content digests of small text artifacts.
std::uint64_t fnv1a(std::string_view bytes);

}  // namespace hbert
