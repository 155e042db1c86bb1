#include "afan/rng.hpp"

#include <cmath>

#include "afan/error.hpp"

namespace afan {

uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

uint64_t derive_seed(uint64_t master, SeedDomain domain, uint64_t counter) {
  uint64_t s = splitmix64(master ^ (0x9E3779B97F4A7C15ULL * static_cast<uint64_t>(domain)));
  return splitmix64(s + 0xBF58476D1CE4E5B9ULL * counter);
}

int64_t Rng::uniform_int(int64_t n) {
  if (n <= 0) throw DomainError("Rng::uniform_int: n must be positive");
  const uint64_t un = static_cast<uint64_t>(n);
  const uint64_t bound = UINT64_MAX - UINT64_MAX % un;
  uint64_t x = next_u64();
  while (x >= bound) x = next_u64();
  return static_cast<int64_t>(x % un);
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  // u1 in (0,1] so the log is finite
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * 3.14159265358979323846 * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

void Rng::fill_normal(std::vector<double>& out, double stddev) {
  for (double& v : out) v = stddev * normal();
}

}  // namespace afan
