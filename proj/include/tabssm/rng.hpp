#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace tabssm {

using Rng = std::mt19937_64;

/// Derives an independent stream seed for a named component, so one top-level
/// seed reproduces each sub-computation (split, init, shuffle, ...) on its own.
std::uint64_t substream_seed(std::uint64_t base, std::string_view label);

// Hand-rolled draws: identical output on any platform, unlike std::
// distributions whose algorithms are implementation-defined.
double uniform01(Rng& rng);                         // [0, 1)
double uniform(Rng& rng, double lo, double hi);
double gaussian(Rng& rng, double mean = 0.0, double sd = 1.0);  // Box-Muller, stateless

std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng);  // Fisher-Yates

}  // namespace tabssm
