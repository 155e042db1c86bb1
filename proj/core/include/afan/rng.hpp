#pragma once

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

namespace afan {

uint64_t splitmix64(uint64_t x);

// Every source of randomness draws from its own stream derived from one
// master seed, so changing a sweep axis cannot perturb unrelated draws.
enum class SeedDomain : uint64_t {
  kInit = 1,        // parameter initialization
  kDataGen = 2,     // synthetic dataset generation
  kSplit = 3,       // train/val split
  kShuffle = 4,     // per-epoch batch ordering
  kNoise = 5,       // gaussian feature noise
  kEstimator = 6,   // power iteration / Hutchinson probes
  kDirections = 7,  // loss-landscape directions
  kRun = 8,         // per-run master in multi-seed sweeps
};

// derive_seed(m, d, c) = splitmix64(splitmix64(m ^ golden*d) + golden2*c)
uint64_t derive_seed(uint64_t master, SeedDomain domain, uint64_t counter = 0);

// Deterministic RNG. The engine is mt19937_64 (sequence pinned by the
// standard); double/int generation is self-contained because the std
// distributions are implementation-defined.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // [0, 1) with 53 random bits
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n), rejection sampled so the distribution is exact
  int64_t uniform_int(int64_t n);

  double normal();  // N(0,1), Box-Muller with cached spare

  double rademacher() { return (next_u64() & 1u) ? 1.0 : -1.0; }

  void fill_normal(std::vector<double>& out, double stddev);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(static_cast<int64_t>(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace afan
