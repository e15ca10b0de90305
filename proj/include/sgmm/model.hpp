// SPDX-License-Identifier: Apache-2.0
#pragma once

// Pooling layer + classification head, as one trainable network.

#include <map>
#include <string>
#include <vector>

#include "sgmm/classifier.hpp"
#include "sgmm/deep_pool.hpp"
#include "sgmm/matrix.hpp"

namespace sgmm {

enum class PoolKind { kAvg, kDeep };

struct ModelSpec {
  PoolKind pool = PoolKind::kDeep;
  PoolSpec deep;  // ignored for kAvg
  std::size_t num_classes = 0;
  std::size_t experts = 2;
  bool input_gate = true;
  bool output_gate = true;
  bool freeze_pool = false;  // unsupervised baselines: pooling stays at its init

  std::size_t code_dim() const;
  HeadSpec head() const;
};

using Meta = std::map<std::string, std::string>;
Meta to_meta(const ModelSpec& spec);
// Throws DataError on missing or malformed keys.
ModelSpec model_spec_from_meta(const Meta& meta);

struct Model {
  ModelSpec spec;
  PoolParams pool;
  ClassifierHead head;

  // Every tensor, pooling first. Checkpoints store this list.
  std::vector<ParamRef> params();
  std::vector<ConstParamRef> params() const;
  // The subset the optimizer updates.
  std::vector<ParamRef> trainable();
};

// Random head; pooling randomly initialised (scale 1) unless `pool` given.
Model make_model(const ModelSpec& spec, SplitMix64& rng, const PoolParams* pool = nullptr);

// Flattened video code fed to the head.
std::vector<double> pooled_code(const Model& m, const Matrix& frames);
std::vector<double> predict(const Model& m, const Matrix& frames);

// BCE loss of one video; when `grads` is non-null it receives gradients
// aligned with m.trainable() (overwritten, not accumulated).
double example_loss(const Model& m, const Matrix& frames, std::span<const std::uint32_t> labels,
                    std::vector<Matrix>* grads);

}  // namespace sgmm
