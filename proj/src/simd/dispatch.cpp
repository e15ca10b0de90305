// SPDX-License-Identifier: Apache-2.0
#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

#include "kernels.hpp"

namespace sgmm::simd {
namespace {

Backend detect_best() {
#if defined(__x86_64__) || defined(_M_X64)
  if (backend_available(Backend::kAvx2)) return Backend::kAvx2;
#endif
#if defined(__aarch64__)
  return Backend::kNeon;
#endif
  return Backend::kScalar;
}

Backend initial_backend() {
  if (const char* env = std::getenv("SGMM_SIMD")) {
    const std::string v(env);
    if (v == "scalar") return Backend::kScalar;
    if (v == "avx2" && backend_available(Backend::kAvx2)) return Backend::kAvx2;
    if (v == "neon" && backend_available(Backend::kNeon)) return Backend::kNeon;
  }
  return detect_best();
}

std::atomic<const KernelTable*>& active_slot() {
  static std::atomic<const KernelTable*> slot{&kernels_for(initial_backend())};
  return slot;
}

}  // namespace

bool backend_available(Backend b) {
  switch (b) {
    case Backend::kScalar:
      return true;
    case Backend::kAvx2:
#if defined(__x86_64__) || defined(_M_X64)
      return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
      return false;
#endif
    case Backend::kNeon:
#if defined(__aarch64__)
      return true;
#else
      return false;
#endif
  }
  return false;
}

const KernelTable& kernels_for(Backend b) {
  if (!backend_available(b)) {
    throw std::runtime_error("simd backend not available on this CPU: " +
                             std::string(backend_name(b)));
  }
  switch (b) {
#if defined(__x86_64__) || defined(_M_X64)
    case Backend::kAvx2:
      return detail::kAvx2Kernels;
#endif
#if defined(__aarch64__)
    case Backend::kNeon:
      return detail::kNeonKernels;
#endif
    default:
      return detail::kScalarKernels;
  }
}

Backend active_backend() {
  const KernelTable* t = active_slot().load();
#if defined(__x86_64__) || defined(_M_X64)
  if (t == &detail::kAvx2Kernels) return Backend::kAvx2;
#endif
#if defined(__aarch64__)
  if (t == &detail::kNeonKernels) return Backend::kNeon;
#endif
  return Backend::kScalar;
}

void set_backend(Backend b) { active_slot().store(&kernels_for(b)); }

std::string_view backend_name(Backend b) {
  switch (b) {
    case Backend::kScalar:
      return "scalar";
    case Backend::kAvx2:
      return "avx2";
    case Backend::kNeon:
      return "neon";
  }
  return "unknown";
}

namespace detail {
const KernelTable& active_table() { return *active_slot().load(); }
}  // namespace detail

}  // namespace sgmm::simd
