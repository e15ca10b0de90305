// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace sgmm {

struct ScoredPrediction {
  std::string video;
  int label = 0;
  double confidence = 0.0;
};

using GroundTruth = std::map<std::string, std::set<int>>;

// Global average precision over the pooled top-`n_per_video` predictions of
// every video. Ties in confidence are broken by (video, label). The
// denominator is the total number of ground-truth labels in `truth`.
// Throws std::invalid_argument on empty truth or non-finite confidences.
double gap(std::span<const ScoredPrediction> preds, const GroundTruth& truth,
           std::size_t n_per_video = 20);

// Fraction of videos in `truth` whose highest-confidence prediction is a
// true label (videos without predictions count as misses).
double hit_at_1(std::span<const ScoredPrediction> preds, const GroundTruth& truth);

// Dense per-video probability rows -> scored predictions (one per label).
std::vector<ScoredPrediction> to_predictions(std::span<const std::string> ids,
                                             std::span<const std::vector<double>> probs);

// Rank-based ROC AUC; ties get their average rank. Throws when either class
// is absent.
double auc(std::span<const double> scores, std::span<const int> labels);

struct McNemarResult {
  double chi2 = 0.0;
  double p_value = 1.0;
  std::size_t b = 0;  // A right, B wrong
  std::size_t c = 0;  // A wrong, B right
};

McNemarResult mcnemar(const std::vector<bool>& correct_a, const std::vector<bool>& correct_b);
McNemarResult mcnemar_from_counts(std::size_t b, std::size_t c);

}  // namespace sgmm
