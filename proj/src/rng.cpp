#include "etbell/rng.hpp"

#include <cmath>

#include "etbell/common.hpp"

namespace etbell {

uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

uint64_t derive_seed(uint64_t parent, std::initializer_list<uint64_t> path) {
  uint64_t s = parent;
  for (uint64_t p : path) {
    s = splitmix64(s ^ (p + 0x9E3779B97F4A7C15ull));
  }
  return s;
}

double Rng::uniform01() {
  return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) {
  return lo + (hi - lo) * uniform01();
}

double Rng::gauss() {
  if (has_cached_gauss_) {
    has_cached_gauss_ = false;
    return cached_gauss_;
  }
  const double u1 = 1.0 - uniform01();  // (0, 1]
  const double u2 = uniform01();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double a = kTau * u2;
  cached_gauss_ = r * std::sin(a);
  has_cached_gauss_ = true;
  return r * std::cos(a);
}

double Rng::exponential(double mean) {
  return -mean * std::log(1.0 - uniform01());
}

long Rng::poisson(double mean) {
  if (!(mean >= 0.0)) throw ValidationError("poisson mean must be >= 0");
  long n = 0;
  // exp(-500) is still comfortably inside double range
  while (mean > 500.0) {
    n += poisson(500.0);
    mean -= 500.0;
  }
  const double limit = std::exp(-mean);
  double p = 1.0;
  long k = 0;
  do {
    ++k;
    p *= uniform01();
  } while (p > limit);
  return n + k - 1;
}

}  // namespace etbell
