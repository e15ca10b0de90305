#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "sgmm/metrics.hpp"
#include "sgmm/rng.hpp"

using namespace sgmm;

namespace {

bool before(const ScoredPrediction& a, const ScoredPrediction& b) {
  if (a.confidence != b.confidence) return a.confidence > b.confidence;
  if (a.video != b.video) return a.video < b.video;
  return a.label < b.label;
}

// Average precision by definition: per-video top-n, pooled ranking by
// repeated minimum extraction, precision recounted from scratch at each rank.
double brute_ap(std::vector<ScoredPrediction> preds, const GroundTruth& truth, std::size_t n) {
  std::vector<ScoredPrediction> kept;
  std::map<std::string, std::vector<ScoredPrediction>> per_video;
  for (const auto& p : preds) per_video[p.video].push_back(p);
  for (auto& [id, v] : per_video) {
    for (std::size_t i = 0; i < v.size() && i < n; ++i) {
      std::size_t best = i;
      for (std::size_t j = i + 1; j < v.size(); ++j)
        if (before(v[j], v[best])) best = j;
      std::swap(v[i], v[best]);
      kept.push_back(v[i]);
    }
  }
  std::vector<ScoredPrediction> ranked;
  while (!kept.empty()) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < kept.size(); ++j)
      if (before(kept[j], kept[best])) best = j;
    ranked.push_back(kept[best]);
    kept.erase(kept.begin() + static_cast<long>(best));
  }
  auto correct = [&](const ScoredPrediction& p) {
    auto it = truth.find(p.video);
    return it != truth.end() && it->second.count(p.label) > 0;
  };
  std::size_t g = 0;
  for (const auto& [id, l] : truth) g += l.size();
  double sum = 0.0;
  for (std::size_t k = 0; k < ranked.size(); ++k) {
    if (!correct(ranked[k])) continue;
    std::size_t hits = 0;
    for (std::size_t i = 0; i <= k; ++i) hits += correct(ranked[i]);
    sum += static_cast<double>(hits) / static_cast<double>(k + 1);
  }
  return sum / static_cast<double>(g);
}

struct Instance {
  std::vector<ScoredPrediction> preds;
  GroundTruth truth;
};

Instance random_instance(SplitMix64& rng) {
  Instance in;
  const std::size_t videos = 1 + rng.below(8), labels = 1 + rng.below(12);
  for (std::size_t v = 0; v < videos; ++v) {
    const std::string id = "v" + std::to_string(v);
    auto& t = in.truth[id];
    for (std::size_t l = 0; l < labels; ++l) {
      if (rng.uniform() < 0.3) t.insert(static_cast<int>(l));
      // Coarse confidences force ties.
      if (in.preds.size() < 100 && rng.uniform() < 0.8)
        in.preds.push_back({id, static_cast<int>(l), std::floor(rng.uniform() * 6.0) / 6.0});
    }
    if (t.empty()) t.insert(static_cast<int>(rng.below(labels)));
  }
  return in;
}

}  // namespace

TEST(Gap, AllCorrectIsOne) {
  GroundTruth t{{"a", {1, 2}}, {"b", {0}}};
  std::vector<ScoredPrediction> p{{"a", 1, 0.1}, {"b", 0, 0.9}, {"a", 2, 0.5}};
  EXPECT_EQ(gap(p, t), 1.0);
}

TEST(Gap, HandRankedCase) {
  GroundTruth t{{"a", {1, 3}}};
  std::vector<ScoredPrediction> p{{"a", 1, 0.9}, {"a", 2, 0.8}, {"a", 3, 0.7}};
  EXPECT_NEAR(gap(p, t), 0.5 + (2.0 / 3.0) * 0.5, 1e-15);
  EXPECT_NEAR(gap(p, t), 0.8333, 1e-4);
}

TEST(Gap, NoneCorrectIsZero) {
  GroundTruth t{{"a", {1}}};
  std::vector<ScoredPrediction> p{{"a", 0, 0.9}, {"a", 2, 0.3}};
  EXPECT_EQ(gap(p, t), 0.0);
}

TEST(Gap, TopNPerVideo) {
  GroundTruth t{{"a", {5}}};
  std::vector<ScoredPrediction> p{{"a", 0, 0.9}, {"a", 1, 0.8}, {"a", 5, 0.7}};
  EXPECT_EQ(gap(p, t, 2), 0.0);
  EXPECT_NEAR(gap(p, t, 3), 1.0 / 3.0, 1e-15);
}

TEST(Gap, Errors) {
  std::vector<ScoredPrediction> p{{"a", 0, std::nan("")}};
  EXPECT_THROW(gap(p, GroundTruth{}), std::invalid_argument);
  EXPECT_THROW(gap(p, GroundTruth{{"a", {0}}}), std::invalid_argument);
}

TEST(Gap, MatchesBruteForceExactly) {
  SplitMix64 rng(1);
  for (int i = 0; i < 200; ++i) {
    const Instance in = random_instance(rng);
    const std::size_t n = 1 + rng.below(6);
    EXPECT_EQ(gap(in.preds, in.truth, n), brute_ap(in.preds, in.truth, n)) << "instance " << i;
  }
}

TEST(Gap, MonotoneTransformInvariant) {
  SplitMix64 rng(2);
  for (int i = 0; i < 100; ++i) {
    Instance in = random_instance(rng);
    const double g = gap(in.preds, in.truth, 4);
    for (auto& p : in.preds) p.confidence = std::exp(3.0 * p.confidence) - 7.0;
    EXPECT_EQ(gap(in.preds, in.truth, 4), g);
  }
}

TEST(Hit1, Cases) {
  GroundTruth t{{"a", {0}}, {"b", {1}}, {"c", {2}}};
  std::vector<ScoredPrediction> all{{"a", 0, 0.9}, {"b", 1, 0.9}, {"c", 2, 0.9}, {"c", 0, 0.1}};
  EXPECT_EQ(hit_at_1(all, t), 1.0);
  std::vector<ScoredPrediction> none{{"a", 1, 0.9}, {"b", 0, 0.9}, {"c", 0, 0.9}};
  EXPECT_EQ(hit_at_1(none, t), 0.0);
  std::vector<ScoredPrediction> mixed{{"a", 0, 0.9}, {"a", 1, 0.2}, {"b", 0, 0.6}, {"b", 1, 0.4},
                                      {"c", 1, 0.5}};
  EXPECT_NEAR(hit_at_1(mixed, t), 1.0 / 3.0, 1e-15);
}

TEST(ToPredictions, OnePerLabel) {
  const std::vector<std::string> ids{"x", "y"};
  const std::vector<std::vector<double>> probs{{0.1, 0.9}, {0.4, 0.2}};
  const auto p = to_predictions(ids, probs);
  ASSERT_EQ(p.size(), 4u);
  EXPECT_EQ(p[1].video, "x");
  EXPECT_EQ(p[1].label, 1);
  EXPECT_EQ(p[1].confidence, 0.9);
}

TEST(Auc, HandCases) {
  const std::vector<double> s{0.1, 0.4, 0.35, 0.8};
  EXPECT_EQ(auc(s, std::vector<int>{0, 0, 0, 1}), 1.0);
  EXPECT_EQ(auc(std::vector<double>{0.9, 0.1}, std::vector<int>{1, 0}), 1.0);
  EXPECT_EQ(auc(s, std::vector<int>{0, 1, 0, 1}), 1.0);
  EXPECT_EQ(auc(s, std::vector<int>{1, 0, 0, 1}), 0.5);
  // Ties between classes count half.
  EXPECT_EQ(auc(std::vector<double>{0.5, 0.5}, std::vector<int>{0, 1}), 0.5);
  EXPECT_THROW(auc(s, std::vector<int>{1, 1, 1, 1}), std::invalid_argument);
}

TEST(Auc, ComplementAndPairCountOracle) {
  SplitMix64 rng(3);
  for (int i = 0; i < 50; ++i) {
    const std::size_t n = 2 + rng.below(60);
    std::vector<double> s(n), neg(n);
    std::vector<int> y(n);
    for (std::size_t j = 0; j < n; ++j) {
      s[j] = rng.normal();
      neg[j] = -s[j];
      y[j] = j < 2 ? static_cast<int>(j) : static_cast<int>(rng.below(2));
    }
    double pairs = 0.0, wins = 0.0;
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t b = 0; b < n; ++b)
        if (y[a] == 1 && y[b] == 0) {
          pairs += 1;
          wins += s[a] > s[b] ? 1.0 : (s[a] == s[b] ? 0.5 : 0.0);
        }
    const double a = auc(s, y);
    EXPECT_NEAR(a, wins / pairs, 1e-12);
    EXPECT_NEAR(a + auc(neg, y), 1.0, 1e-12);
  }
}

TEST(Auc, IndependentLabelsNearHalf) {
  SplitMix64 rng(4);
  std::vector<double> s(20000);
  std::vector<int> y(20000);
  for (std::size_t i = 0; i < s.size(); ++i) {
    s[i] = rng.uniform();
    y[i] = static_cast<int>(rng.below(2));
  }
  EXPECT_NEAR(auc(s, y), 0.5, 0.02);
}

TEST(McNemar, TenTwo) {
  const auto r = mcnemar_from_counts(10, 2);
  EXPECT_NEAR(r.chi2, 49.0 / 12.0, 1e-15);
  EXPECT_NEAR(r.p_value, 0.0433, 5e-4);
}

TEST(McNemar, EqualAndEmptyDiscordance) {
  EXPECT_NEAR(mcnemar_from_counts(5, 5).chi2, 0.1, 1e-15);
  const std::vector<bool> a{true, false, true, true};
  const auto r = mcnemar(a, a);
  EXPECT_EQ(r.chi2, 0.0);
  EXPECT_EQ(r.p_value, 1.0);
}

TEST(McNemar, CountsFromVectors) {
  const std::vector<bool> a{true, true, false, true, false, true};
  const std::vector<bool> b{false, true, true, false, false, false};
  const auto r = mcnemar(a, b);
  EXPECT_EQ(r.b, 3u);
  EXPECT_EQ(r.c, 1u);
  EXPECT_NEAR(r.chi2, 1.0 / 4.0, 1e-15);
  EXPECT_THROW(mcnemar(a, std::vector<bool>{true}), std::invalid_argument);
}
