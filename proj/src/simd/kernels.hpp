// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "sgmm/simd.hpp"

namespace sgmm::simd::detail {

extern const KernelTable kScalarKernels;
#if defined(__x86_64__) || defined(_M_X64)
extern const KernelTable kAvx2Kernels;
#endif
#if defined(__aarch64__)
extern const KernelTable kNeonKernels;
#endif

}  // namespace sgmm::simd::detail
