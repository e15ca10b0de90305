// SPDX-License-Identifier: Apache-2.0
#pragma once

// Trainable cluster-and-aggregate pooling layer.
//
// Soft assignment is either decoupled (softmax over u_k.x + b_k) or coupled
// (GMM posterior under one of five covariance families, with weights and
// scales held as unconstrained logits / log-scales). The aggregated code is
// either the VLAD residual S_x(k) - n(k) c_k or the DSGMM smoothed mean
// (S_x(k) + gamma c_k) / (n(k) + gamma), followed by optional intra- and
// final-normalization. backward() returns exact gradients for every
// trainable tensor and for the input frames.

#include <optional>
#include <string_view>
#include <vector>

#include "sgmm/gmm.hpp"
#include "sgmm/matrix.hpp"
#include "sgmm/params.hpp"
#include "sgmm/rng.hpp"

namespace sgmm {

enum class Variant {
  kDecoupled,
  kUniformPriors,
  kSharedSpherical,
  kSpherical,
  kSharedDiagonal,
  kDiagonal,
};

inline constexpr Variant kAllVariants[] = {Variant::kDecoupled,       Variant::kUniformPriors,
                                           Variant::kSharedSpherical, Variant::kSpherical,
                                           Variant::kSharedDiagonal,  Variant::kDiagonal};

std::string_view to_string(Variant v);
std::optional<Variant> parse_variant(std::string_view s);
bool is_coupled(Variant v);

enum class CodeKind { kVlad, kDsgmm };
std::string_view to_string(CodeKind c);

struct PoolSpec {
  CodeKind code = CodeKind::kDsgmm;
  Variant variant = Variant::kDecoupled;
  std::size_t k = 16;
  std::size_t dim = 16;
  double gamma = 0.125;  // DSGMM only; fixed, not trained
  bool intra_norm = true;
  bool final_norm = false;
  // Coupled variants: aggregate around the assignment means instead of a
  // separate anchor copy. Ignored for kDecoupled.
  bool shared_means = true;

  bool uses_anchor() const { return variant == Variant::kDecoupled || !shared_means; }
};

// Raw (unconstrained) trainable tensors. Which ones are populated depends on
// the variant; unused ones stay empty.
struct PoolParams {
  Matrix u;          // K x D        decoupled
  Matrix b;          // 1 x K        decoupled
  Matrix logit_w;    // 1 x K        coupled except UniformPriors
  Matrix mu;         // K x D        coupled
  Matrix log_sigma;  // 1x1 | Kx1 | 1xD | KxD   coupled
  Matrix anchor;     // K x D        when spec.uses_anchor()

  std::vector<ParamRef> refs();
  std::vector<ConstParamRef> refs() const;
  bool operator==(const PoolParams&) const = default;
};

// Shape of log_sigma for a coupled variant.
std::pair<std::size_t, std::size_t> log_sigma_shape(Variant v, std::size_t k, std::size_t d);

// Zero-initialised parameters of the right shapes.
PoolParams make_pool_params(const PoolSpec& spec);
// Random parameters (gradient checks, property tests).
PoolParams random_pool_params(const PoolSpec& spec, SplitMix64& rng, double scale = 1.0);

// Transformed constrained values: softmax weights (uniform for
// UniformPriors) and per-(k, d) variances exp(2 log_sigma).
std::vector<double> mixture_weights(const PoolSpec& spec, const PoolParams& p);
Matrix expanded_variances(const PoolSpec& spec, const PoolParams& p);

// T x K posteriors; every row sums to 1.
Matrix assign(const PoolSpec& spec, const PoolParams& p, const Matrix& frames);

struct PoolCache {
  Matrix frames;
  Matrix post;             // T x K
  std::vector<double> n;   // K
  Matrix sx;               // K x D
  Matrix raw;              // pre-normalization code
  Matrix intra;            // after intra-norm
  std::vector<double> row_norms;
  double total_norm = 0.0;
};

struct PoolForward {
  Matrix code;  // K x D
  PoolCache cache;
};

PoolForward forward(const PoolSpec& spec, const PoolParams& p, const Matrix& frames);

struct PoolGradients {
  PoolParams params;  // same shapes as the parameters
  Matrix frames;      // T x D
};

// Gradients of a scalar loss L given dL/dcode. Throws std::invalid_argument
// when the cache does not belong to this spec/params shape.
PoolGradients backward(const PoolSpec& spec, const PoolParams& p, const PoolCache& cache,
                       const Matrix& upstream);

// Parameters whose assignment reproduces the UBM posteriors. Decoupled
// needs a shared covariance (u_k = Sigma^-1 mu_k,
// b_k = ln w_k - 1/2 mu_k^T Sigma^-1 mu_k); coupled variants need a
// covariance family the variant can represent. Throws std::invalid_argument
// otherwise. Anchors start at the UBM means.
PoolParams init_from_ubm(const GmmModel& ubm, const PoolSpec& spec);

}  // namespace sgmm
