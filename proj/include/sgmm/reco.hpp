// SPDX-License-Identifier: Apache-2.0
#pragma once

// Co-watch embeddings and watch prediction.
//
// f(g(v)) = normalize(W2 relu(W1 g(v) + b1) + b2), with g the pooling layer.
// Trained with the triplet hinge
//   sum_i max(|f(a)-f(p)|^2 - |f(a)-f(n)|^2 + alpha, 0).
// Watch prediction: cosine aggregations over a user's history, or GLMix
//   logit p = beta0 + beta_u0 + f^T beta_u.

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "sgmm/checkpoint.hpp"
#include "sgmm/model.hpp"

namespace sgmm {

struct EmbedSpec {
  std::size_t input_dim = 0;
  std::size_t hidden = 256;
  std::size_t out = 64;
};

struct EmbedNet {
  Matrix w1;  // hidden x in
  Matrix b1;  // 1 x hidden
  Matrix w2;  // out x hidden
  Matrix b2;  // 1 x out

  std::vector<ParamRef> refs();
  std::vector<ConstParamRef> refs() const;
  bool operator==(const EmbedNet&) const = default;
};

EmbedNet make_embed(const EmbedSpec& spec);
EmbedNet random_embed(const EmbedSpec& spec, SplitMix64& rng);

struct EmbedCache {
  std::vector<double> x;
  std::vector<double> pre;     // W1 x + b1
  std::vector<double> hidden;  // relu(pre)
  std::vector<double> z;       // pre-normalization output
  std::vector<double> out;
  double norm = 0.0;
};

// A zero pre-normalization vector maps to e_1 (and passes zero gradient).
EmbedCache embed_forward(const EmbedSpec& spec, const EmbedNet& net, std::span<const double> x);

struct EmbedGradients {
  EmbedNet params;
  std::vector<double> input;
};

EmbedGradients embed_backward(const EmbedSpec& spec, const EmbedNet& net, const EmbedCache& cache,
                              std::span<const double> dout);

struct RecoSpec {
  PoolKind pool = PoolKind::kDeep;
  PoolSpec deep;
  EmbedSpec embed;  // embed.input_dim is derived from the pooling
  bool freeze_pool = false;

  std::size_t code_dim() const;
};

struct RecoModel {
  RecoSpec spec;
  PoolParams pool;
  EmbedNet net;

  std::vector<ParamRef> params();
  std::vector<ConstParamRef> params() const;
  std::vector<ParamRef> trainable();
};

RecoModel make_reco_model(const RecoSpec& spec, SplitMix64& rng, const PoolParams* pool = nullptr);
Meta to_meta(const RecoSpec& spec);
RecoSpec reco_spec_from_meta(const Meta& meta);
Checkpoint make_reco_checkpoint(const RecoModel& m, std::uint64_t seed, std::uint64_t step);
RecoModel reco_model_from_checkpoint(const Checkpoint& ckpt);

std::vector<double> embed_video(const RecoModel& m, const Matrix& frames);

struct Triplet {
  std::size_t anchor, positive, negative;  // indices into the frame list
};

inline constexpr double kDefaultMargin = 0.2;

// Hinge for one triplet of embeddings.
double triplet_term(std::span<const double> a, std::span<const double> p,
                    std::span<const double> n, double alpha);

// Sum of triplet hinges over `triplets`; each distinct video is embedded
// once. When `grads` is non-null it receives gradients aligned with
// m.trainable(), propagated through the net and the pooling layer.
double triplet_loss(const RecoModel& m, const std::vector<Matrix>& frames,
                    std::span<const Triplet> triplets, double alpha,
                    std::vector<Matrix>* grads);

struct SimScores {
  double avg = 0.0;
  double max = 0.0;
};

// Cosine = dot product of unit embeddings. Throws on an empty history.
SimScores sim_scores(std::span<const std::vector<double>> history,
                     std::span<const double> candidate);
SimScores sim_scores(const RecoModel& m, const std::vector<Matrix>& history_frames,
                     const Matrix& candidate_frames);

struct GlmixObs {
  std::uint32_t user = 0;
  std::vector<double> features;  // same length for every observation
  int label = 0;
};

struct GlmixUser {
  double intercept = 0.0;
  std::vector<double> beta;
};

struct GlmixModel {
  double beta0 = 0.0;
  std::map<std::uint32_t, GlmixUser> users;
  double prior = 1.0;
  std::size_t dim = 0;
  std::vector<double> loss_trace;  // penalized loss after each round
  std::size_t rounds = 0;
};

struct GlmixConfig {
  double prior = 1.0;
  std::size_t max_rounds = 50;
  double rel_tol = 1e-6;
};

// Sum of logistic losses plus prior/2 * (beta_u0^2 + |beta_u|^2) per user.
double glmix_penalized_loss(const GlmixModel& m, std::span<const GlmixObs> obs);
GlmixModel glmix_fit(std::span<const GlmixObs> obs, const GlmixConfig& cfg = {});
// Unseen users contribute zero user effects.
double glmix_predict(const GlmixModel& m, std::uint32_t user, std::span<const double> features);

}  // namespace sgmm
