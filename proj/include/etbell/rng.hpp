#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace etbell {

uint64_t splitmix64(uint64_t x);

// Seed-splitting rule for independent sub-streams: fold each path element
// into the parent seed with one splitmix64 round. Order matters, so
// derive_seed(s, {1, 2}) and derive_seed(s, {2, 1}) are unrelated streams.
uint64_t derive_seed(uint64_t parent, std::initializer_list<uint64_t> path);

// mt19937_64 core with the distribution transforms written out explicitly,
// so a (config, seed) pair reproduces the same stream on every platform
// independent of standard-library implementation choices.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // 53-bit uniform in [0, 1)
  double uniform01();
  double uniform(double lo, double hi);

  // standard normal via Box-Muller; draws two uniforms every other call
  double gauss();

  double exponential(double mean);

  // Knuth's product method, chunked so large means stay in range
  long poisson(double mean);

 private:
  std::mt19937_64 eng_;
  double cached_gauss_ = 0.0;
  bool has_cached_gauss_ = false;
};

}  // namespace etbell
