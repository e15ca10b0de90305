// SPDX-License-Identifier: Apache-2.0
#pragma once

// Inner-loop kernels shared by the GMM, pooling, and classifier code.
//
// Every kernel has a scalar reference implementation plus vectorized
// variants (AVX2+FMA on x86-64, NEON on AArch64). The variant is picked once
// at startup from the CPU feature bits and can be overridden with
// SGMM_SIMD=scalar|avx2|neon or set_backend(). The vectorized variants sum in
// a different order from the scalar ones, so results agree to rounding, not
// bit-for-bit; pin the scalar backend when outputs must match across
// machines.

#include <cassert>
#include <cstddef>
#include <span>
#include <string_view>

namespace sgmm::simd {

enum class Backend { kScalar, kAvx2, kNeon };

struct KernelTable {
  double (*dot)(const double* a, const double* b, std::size_t n);
  double (*sq_dist)(const double* a, const double* b, std::size_t n);
  // sum_i (x_i - mu_i)^2 * w_i
  double (*weighted_sq_dist)(const double* x, const double* mu,
                             const double* w, std::size_t n);
  // y += alpha * x
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
};

bool backend_available(Backend b);
const KernelTable& kernels_for(Backend b);  // throws if unavailable
Backend active_backend();
void set_backend(Backend b);  // throws if unavailable
std::string_view backend_name(Backend b);

namespace detail {
const KernelTable& active_table();
}  // namespace detail

inline double dot(std::span<const double> a, std::span<const double> b) {
  assert(a.size() == b.size());
  return detail::active_table().dot(a.data(), b.data(), a.size());
}

inline double sq_dist(std::span<const double> a, std::span<const double> b) {
  assert(a.size() == b.size());
  return detail::active_table().sq_dist(a.data(), b.data(), a.size());
}

inline double weighted_sq_dist(std::span<const double> x,
                               std::span<const double> mu,
                               std::span<const double> w) {
  assert(x.size() == mu.size() && x.size() == w.size());
  return detail::active_table().weighted_sq_dist(x.data(), mu.data(),
                                                 w.data(), x.size());
}

inline void axpy(double alpha, std::span<const double> x,
                 std::span<double> y) {
  assert(x.size() == y.size());
  detail::active_table().axpy(alpha, x.data(), y.data(), x.size());
}

}  // namespace sgmm::simd
