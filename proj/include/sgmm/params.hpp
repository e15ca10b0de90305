// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "sgmm/matrix.hpp"

namespace sgmm {

// Named view of one trainable tensor; models hand these out in a fixed
// order so optimizers, checkpoints and gradient checks can walk them.
struct ParamRef {
  std::string name;
  Matrix* value;
};

struct ConstParamRef {
  std::string name;
  const Matrix* value;
};

// Zeroed matrices with the same shapes as `params`.
inline std::vector<Matrix> zeros_like(const std::vector<ParamRef>& params) {
  std::vector<Matrix> out;
  out.reserve(params.size());
  for (const auto& p : params) out.emplace_back(p.value->rows(), p.value->cols());
  return out;
}

inline void add_into(std::vector<Matrix>& acc, const std::vector<Matrix>& g, double scale = 1.0) {
  for (std::size_t i = 0; i < acc.size(); ++i) {
    auto a = acc[i].flat();
    auto b = g[i].flat();
    for (std::size_t j = 0; j < a.size(); ++j) a[j] += scale * b[j];
  }
}

}  // namespace sgmm
