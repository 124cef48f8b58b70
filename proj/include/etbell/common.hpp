#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace etbell {

inline constexpr double kTau = 6.283185307179586476925287;

// Thrown for bad user input (config values, preconditions on public
// operations). The CLI maps this to exit code 1; everything else is 2.
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shortest-ish decimal rendering used for all tabular output so that
// re-runs are byte-identical.
std::string fmt_g(double v, int precision = 12);

uint64_t fnv1a64(std::string_view s);

}  // namespace etbell
