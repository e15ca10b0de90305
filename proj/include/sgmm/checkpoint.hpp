// SPDX-License-Identifier: Apache-2.0
#pragma once

// CKPT: one binary file holding a model (or embedding net) plus optimizer
// state, enough to resume training bit-exactly.
//
//   "CKPT" u32 version
//   u32 n_meta, n_meta x (u32 len, key bytes, u32 len, value bytes)
//   u64 seed, u64 step, f64 val_loss, f64 best_val_loss, u64 best_step
//   u64 adam_t
//   u32 n_params, n_params x (u32 len, name, u32 rows, u32 cols, f64 data)
//   u32 n_moments, n_moments x (u32 rows, u32 cols, f64 m, f64 v)
//
// All integers little-endian. Meta entries are written in key order.

#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "sgmm/matrix.hpp"
#include "sgmm/params.hpp"

namespace sgmm {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedMatrix {
  std::string name;
  Matrix value;
  bool operator==(const NamedMatrix&) const = default;
};

struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  double val_loss = std::numeric_limits<double>::infinity();
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::uint64_t best_step = 0;
  std::uint64_t adam_t = 0;
  std::vector<NamedMatrix> params;
  std::vector<Matrix> adam_m;  // aligned with the trainable subset
  std::vector<Matrix> adam_v;

  bool operator==(const Checkpoint&) const = default;
};

std::vector<NamedMatrix> snapshot(const std::vector<ConstParamRef>& params);
// Copies stored tensors into `params` by position, checking names and
// shapes. Throws DataError on mismatch.
void restore(const std::vector<NamedMatrix>& stored, const std::vector<ParamRef>& params);

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
// Throws DataError (bad magic, unsupported version, truncation, trailing bytes).
Checkpoint decode_checkpoint(std::vector<std::uint8_t> bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace sgmm
