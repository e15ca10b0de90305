// SPDX-License-Identifier: Apache-2.0
#pragma once

// Gaussian mixture model: density/posterior evaluation and EM training of the
// universal background model (UBM).

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sgmm/matrix.hpp"

namespace sgmm {

enum class CovKind : std::uint8_t {
  kSharedFull = 0,       // one D x D matrix
  kSharedSpherical = 1,  // one variance
  kSpherical = 2,        // one variance per component
  kSharedDiagonal = 3,   // one D-vector of variances
  kDiagonal = 4,         // K x D variances
};

std::string_view to_string(CovKind kind);
std::optional<CovKind> parse_cov_kind(std::string_view s);

// Covariance parameters stored as variances, shaped by kind:
// SharedFull D x D, SharedSpherical 1 x 1, Spherical K x 1,
// SharedDiagonal 1 x D, Diagonal K x D.
struct CovarianceSpec {
  CovKind kind = CovKind::kDiagonal;
  Matrix values;

  bool operator==(const CovarianceSpec&) const = default;
};

class GmmModel {
 public:
  GmmModel() = default;
  // Validates weights (positive, sum to 1 within 1e-9), shapes, and positive
  // definiteness; throws std::invalid_argument otherwise.
  GmmModel(std::vector<double> weights, Matrix means, CovarianceSpec cov);

  std::size_t num_components() const { return weights_.size(); }
  std::size_t dim() const { return means_.cols(); }
  const std::vector<double>& weights() const { return weights_; }
  const Matrix& means() const { return means_; }
  const CovarianceSpec& covariance() const { return cov_; }
  CovKind cov_kind() const { return cov_.kind; }

  // Variance of coordinate d in component k (diagonal of Sigma_k).
  double variance(std::size_t k, std::size_t d) const;
  // Full Sigma_k as a D x D matrix.
  Matrix component_covariance(std::size_t k) const;

  // log w_k + log N(x; mu_k, Sigma_k) for every k.
  void log_joint(std::span<const double> x, std::span<double> out) const;
  // log P(k|x); throws std::invalid_argument on non-finite input.
  std::vector<double> log_posterior(std::span<const double> x) const;
  void log_posterior(std::span<const double> x, std::span<double> out) const;
  double log_density(std::span<const double> x) const;

  bool operator==(const GmmModel& o) const {
    return weights_ == o.weights_ && means_ == o.means_ && cov_ == o.cov_;
  }

 private:
  void prepare();

  std::vector<double> weights_;
  Matrix means_;
  CovarianceSpec cov_;

  // cached for density evaluation
  std::vector<double> log_norm_;  // log w_k - D/2 log 2pi - 1/2 log|Sigma_k|
  Matrix inv_var_;                // K x D (diagonal kinds)
  Matrix chol_;                   // lower Cholesky factor (SharedFull)
  Matrix white_means_;            // L^-1 mu_k (SharedFull)
};

enum class EmInit { kKMeans, kRandomResponsibility };

struct EmConfig {
  int max_iters = 100;
  double rel_tol = 1e-6;
  double variance_floor = 1e-6;
  EmInit init = EmInit::kKMeans;
  int kmeans_iters = 10;
  std::uint64_t seed = 1;
};

struct EmTrace {
  std::vector<double> loglik;          // one entry per evaluated model
  std::vector<int> reseed_iterations;  // iterations where a cluster was re-seeded
  bool converged = false;
};

// EM for a K-component GMM. Throws std::invalid_argument when there are
// fewer frames than components. Components left with (numerically) no mass
// after an E-step are re-seeded at the frame with the lowest density.
GmmModel train_ubm(const Matrix& frames, std::size_t k, CovKind kind,
                   const EmConfig& cfg, EmTrace* trace = nullptr);

// Sum over frames of log p(x), summed exactly (order independent).
double loglik(const GmmModel& model, const Matrix& frames);

// GMM1: "GMM1", u32 version=1, u32 K, u32 D, u8 cov kind, u32 cov rows,
// u32 cov cols, then weights, means, covariance values as float64 LE.
std::vector<std::uint8_t> encode_gmm(const GmmModel& model);
GmmModel decode_gmm(std::vector<std::uint8_t> bytes);
void save_gmm(const GmmModel& model, const std::string& path);
GmmModel load_gmm(const std::string& path);
std::string gmm_to_json(const GmmModel& model);

}  // namespace sgmm
