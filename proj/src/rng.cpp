#include "sgi/rng.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace sgi {

uint64_t fnv1a(std::string_view s) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

Rng split_rng(uint64_t seed, std::string_view id) {
  const uint64_t h = fnv1a(id);
  std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32), static_cast<uint32_t>(h),
                    static_cast<uint32_t>(h >> 32)};
  return Rng(seq);
}

int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

double uniform_real(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

double normal(Rng& rng, double mean, double stddev) {
  // Box-Muller on two uniforms; std::normal_distribution caches a spare value,
  // which would make the stream state depend on call parity.
  constexpr double kTwoPi = 6.283185307179586476925286766559;
  const double u1 = 1.0 - std::generate_canonical<double, 53>(rng);
  const double u2 = std::generate_canonical<double, 53>(rng);
  return mean + stddev * std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
}

std::string rng_state(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

void set_rng_state(Rng& rng, const std::string& state) {
  std::istringstream is(state);
  is >> rng;
  if (!is) throw std::runtime_error("invalid rng state");
}

}  // namespace sgi
