#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace sgi {

using Rng = std::mt19937_64;

/// FNV-1a, used to derive per-item streams from string ids.
uint64_t fnv1a(std::string_view s);

/// Independent stream for (seed, id); order of generation does not matter.
Rng split_rng(uint64_t seed, std::string_view id);

/// Uniform integer in [lo, hi].
int uniform_int(Rng& rng, int lo, int hi);
double uniform_real(Rng& rng, double lo, double hi);
double normal(Rng& rng, double mean = 0.0, double stddev = 1.0);

std::string rng_state(const Rng& rng);
void set_rng_state(Rng& rng, const std::string& state);

}  // namespace sgi
