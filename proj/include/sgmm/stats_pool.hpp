// SPDX-License-Identifier: Apache-2.0
#pragma once

// Unsupervised cluster-and-aggregate pooling against a fixed UBM: sufficient
// statistics, ML and smoothed per-video GMM estimates, and the SGMM, VLAD,
// BoW and average-pooling video codes.

#include <cstdint>
#include <string>
#include <vector>

#include "sgmm/data.hpp"
#include "sgmm/gmm.hpp"
#include "sgmm/matrix.hpp"

namespace sgmm {

enum class SecondOrder { kNone, kDiagonal, kFull };

struct SufficientStats {
  std::vector<double> n;         // soft counts, K
  Matrix sx;                     // first moments, K x D
  Matrix sx2_diag;               // sum_t P(k|x) x*x, K x D (kDiagonal, kFull)
  std::vector<Matrix> sx2_full;  // sum_t P(k|x) x x^T, K of D x D (kFull)
  std::size_t frames = 0;
  SecondOrder second_order = SecondOrder::kDiagonal;
};

SufficientStats accumulate(const GmmModel& ubm, const Matrix& frames,
                           SecondOrder second_order = SecondOrder::kDiagonal);
inline SufficientStats accumulate(const GmmModel& ubm, const VideoRecord& video,
                                  SecondOrder second_order = SecondOrder::kDiagonal) {
  return accumulate(ubm, video.frames, second_order);
}

// Per-video GMM parameters. `variances` is always filled (K x D diagonal of
// Sigma^v_k) when second-order stats exist; `covariances` only for kFull.
struct VideoGmm {
  std::vector<double> weights;
  Matrix means;
  Matrix variances;
  std::vector<Matrix> covariances;
};

// lambda = n / (n + gamma), with lambda(0, gamma) = 0 for every gamma.
double relevance(double n, double gamma);

// ML estimates. A component with n(k) = 0 has no ML mean/covariance; it gets
// the UBM parameters instead (the gamma > 0 smoothing limit). Throws
// std::invalid_argument on all-zero statistics.
VideoGmm ml_estimates(const SufficientStats& stats, const GmmModel& ubm);

struct SmoothingConfig {
  double gamma = 0.125;
  bool weights = true;
  bool means = true;
  bool covariances = true;
};

// MAP-smoothed estimates relative to the UBM; weights renormalized to sum 1.
VideoGmm smoothed_estimates(const SufficientStats& stats, const GmmModel& ubm,
                            const SmoothingConfig& cfg);

struct VideoCode {
  Matrix values;
  bool intra_normed = false;
  bool final_normed = false;
};

// Row k is the smoothed mean of component k.
VideoCode sgmm_code(const SufficientStats& stats, const GmmModel& ubm, double gamma);
// Row k is S_x(k) - n(k) mu_k.
VideoCode vlad_code(const SufficientStats& stats, const GmmModel& ubm);
// 1 x K histogram n(k) / T.
VideoCode bow_code(const SufficientStats& stats);
// 1 x D frame mean.
VideoCode avg_pool(const Matrix& frames);

// Intra-norm scales each row to unit L2 (zero rows stay zero); final-norm
// scales the flattened code to unit L2. Intra is applied first.
void normalize(VideoCode& code, bool intra, bool final);

// VCOD: a sequence of blocks "VCOD", u32 rows, u32 cols, rows*cols float32
// LE. The manifest next to it (path + ".manifest") is TSV
// `id<TAB>byte_offset<TAB>labels` with labels comma separated.
struct CodeEntry {
  std::string id;
  std::vector<std::uint32_t> labels;
  Matrix code;

  bool operator==(const CodeEntry&) const = default;
};

void write_vcod(const std::vector<CodeEntry>& entries, const std::string& path);
std::vector<CodeEntry> read_vcod(const std::string& path);

}  // namespace sgmm
