#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

// Shared helpers for the test binaries.

namespace testutil {

inline std::mt19937_64 rng(uint64_t seed) { return std::mt19937_64(seed); }

inline double uniform(std::mt19937_64& g, double lo, double hi) {
  const double u = double(g() >> 11) * 0x1.0p-53;
  return lo + (hi - lo) * u;
}

inline std::vector<double> random_vec(std::mt19937_64& g, size_t n,
                                      double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = uniform(g, lo, hi);
  return v;
}

inline double max_abs_diff(const std::vector<double>& a,
                           const std::vector<double>& b) {
  double m = 0.0;
  for (size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double rel_l2_diff(const std::vector<double>& a,
                          const std::vector<double>& b) {
  double num = 0.0, den = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += a[i] * a[i];
  }
  return std::sqrt(num / (den > 0 ? den : 1.0));
}

}  // namespace testutil
