// SPDX-License-Identifier: Apache-2.0
#pragma once

// Context gating + mixture-of-experts multi-label head.
//
//   y   = sigmoid(W_g x + b_g) * x                (input gate, optional)
//   p_c = sum_e softmax_e(G_c y + g_c) * sigmoid(H_ce y + h_ce)
//   out = sigmoid(W_o p + b_o) * p                (output gate, optional)
//
// Expert rows are laid out label-major: row c * E + e.

#include <cstdint>
#include <span>
#include <vector>

#include "sgmm/matrix.hpp"
#include "sgmm/params.hpp"
#include "sgmm/rng.hpp"

namespace sgmm {

struct HeadSpec {
  std::size_t input_dim = 0;
  std::size_t num_classes = 0;
  std::size_t experts = 2;
  bool input_gate = true;
  bool output_gate = true;
};

struct ClassifierHead {
  Matrix gate_w;         // in x in
  Matrix gate_b;         // 1 x in
  Matrix expert_gate_w;  // C*E x in
  Matrix expert_gate_b;  // 1 x C*E
  Matrix expert_w;       // C*E x in
  Matrix expert_b;       // 1 x C*E
  Matrix out_gate_w;     // C x C
  Matrix out_gate_b;     // 1 x C

  std::vector<ParamRef> refs();
  std::vector<ConstParamRef> refs() const;
  bool operator==(const ClassifierHead&) const = default;
};

void validate(const HeadSpec& spec);
ClassifierHead make_head(const HeadSpec& spec);
// Weights ~ N(0, scale / sqrt(fan_in)), biases zero.
ClassifierHead random_head(const HeadSpec& spec, SplitMix64& rng, double scale = 1.0);

struct HeadCache {
  std::vector<double> x;
  std::vector<double> gate;    // sigmoid(W_g x + b_g)
  std::vector<double> y;
  std::vector<double> mix;     // C*E expert-gate softmax
  std::vector<double> expert;  // C*E expert sigmoids
  std::vector<double> moe;     // C
  std::vector<double> out_gate;
};

struct HeadForward {
  std::vector<double> probs;
  HeadCache cache;
};

// Throws std::invalid_argument on a dimension mismatch.
HeadForward forward_head(const HeadSpec& spec, const ClassifierHead& head,
                         std::span<const double> code);

struct HeadGradients {
  ClassifierHead params;
  std::vector<double> input;
};

HeadGradients backward_head(const HeadSpec& spec, const ClassifierHead& head,
                            const HeadCache& cache, std::span<const double> dprobs);

inline constexpr double kProbClamp = 1e-7;

struct BceResult {
  double loss = 0.0;
  std::vector<double> dprobs;
};

// Mean over labels of the binary cross-entropy, probabilities clamped to
// [eps, 1 - eps]. Clamped entries get zero gradient.
BceResult bce_loss(std::span<const double> probs, std::span<const std::uint32_t> labels);

}  // namespace sgmm
