// SPDX-License-Identifier: Apache-2.0
#include "sgmm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace sgmm {
namespace {

void check_finite(std::span<const ScoredPrediction> preds) {
  for (const auto& p : preds) {
    if (!std::isfinite(p.confidence)) {
      throw std::invalid_argument("non-finite confidence for video " + p.video);
    }
  }
}

// Descending confidence, then (video, label) ascending.
bool ranks_before(const ScoredPrediction& a, const ScoredPrediction& b) {
  if (a.confidence != b.confidence) return a.confidence > b.confidence;
  if (a.video != b.video) return a.video < b.video;
  return a.label < b.label;
}

bool is_hit(const ScoredPrediction& p, const GroundTruth& truth) {
  auto it = truth.find(p.video);
  return it != truth.end() && it->second.count(p.label) > 0;
}

}  // namespace

double gap(std::span<const ScoredPrediction> preds, const GroundTruth& truth,
           std::size_t n_per_video) {
  if (truth.empty()) throw std::invalid_argument("gap: empty ground truth");
  check_finite(preds);
  std::size_t positives = 0;
  for (const auto& [id, labels] : truth) positives += labels.size();
  if (positives == 0) throw std::invalid_argument("gap: ground truth has no labels");

  std::vector<ScoredPrediction> sorted(preds.begin(), preds.end());
  std::sort(sorted.begin(), sorted.end(), ranks_before);
  std::map<std::string, std::size_t> taken;
  std::size_t rank = 0;
  std::size_t hits = 0;
  double total = 0.0;
  for (const auto& p : sorted) {
    if (taken[p.video]++ >= n_per_video) continue;
    ++rank;
    if (is_hit(p, truth)) {
      ++hits;
      total += static_cast<double>(hits) / static_cast<double>(rank);
    }
  }
  return total / static_cast<double>(positives);
}

double hit_at_1(std::span<const ScoredPrediction> preds, const GroundTruth& truth) {
  if (truth.empty()) throw std::invalid_argument("hit_at_1: empty ground truth");
  check_finite(preds);
  std::map<std::string, const ScoredPrediction*> top;
  for (const auto& p : preds) {
    auto& slot = top[p.video];
    if (!slot || ranks_before(p, *slot)) slot = &p;
  }
  std::size_t hits = 0;
  for (const auto& [id, labels] : truth) {
    auto it = top.find(id);
    if (it != top.end() && labels.count(it->second->label)) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

std::vector<ScoredPrediction> to_predictions(std::span<const std::string> ids,
                                             std::span<const std::vector<double>> probs) {
  if (ids.size() != probs.size()) throw std::invalid_argument("to_predictions: size mismatch");
  std::vector<ScoredPrediction> out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    for (std::size_t c = 0; c < probs[i].size(); ++c) {
      out.push_back({ids[i], static_cast<int>(c), probs[i][c]});
    }
  }
  return out;
}

double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("auc: size mismatch");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // ranks are 1-based
    for (std::size_t t = i; t < j; ++t) {
      if (labels[order[t]]) {
        pos_rank_sum += avg_rank;
        ++n_pos;
      }
    }
    i = j;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw std::invalid_argument("auc: need both classes");
  const double np = static_cast<double>(n_pos);
  return (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * static_cast<double>(n_neg));
}

McNemarResult mcnemar_from_counts(std::size_t b, std::size_t c) {
  McNemarResult r;
  r.b = b;
  r.c = c;
  if (b + c == 0) return r;
  const double diff = std::abs(static_cast<double>(b) - static_cast<double>(c)) - 1.0;
  r.chi2 = diff * diff / static_cast<double>(b + c);
  r.p_value = std::erfc(std::sqrt(r.chi2 / 2.0));
  return r;
}

McNemarResult mcnemar(const std::vector<bool>& correct_a, const std::vector<bool>& correct_b) {
  if (correct_a.size() != correct_b.size()) throw std::invalid_argument("mcnemar: size mismatch");
  std::size_t b = 0;
  std::size_t c = 0;
  for (std::size_t i = 0; i < correct_a.size(); ++i) {
    if (correct_a[i] && !correct_b[i]) ++b;
    if (!correct_a[i] && correct_b[i]) ++c;
  }
  return mcnemar_from_counts(b, c);
}

}  // namespace sgmm
