#include <gtest/gtest.h>

#include <cmath>

#include "sgmm/classifier.hpp"
#include "sgmm/model.hpp"
#include "sgmm/rng.hpp"
#include "sgmm/trainer.hpp"

using namespace sgmm;

namespace {

double sig(double z) { return 1.0 / (1.0 + std::exp(-z)); }

std::vector<double> random_vec(SplitMix64& rng, std::size_t n) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

// Straight nested-loop evaluation of the head.
std::vector<double> oracle_forward(const HeadSpec& s, const ClassifierHead& h, const std::vector<double>& x) {
  const std::size_t in = s.input_dim, c_n = s.num_classes, e_n = s.experts;
  std::vector<double> y = x;
  if (s.input_gate) {
    for (std::size_t i = 0; i < in; ++i) {
      double z = h.gate_b(0, i);
      for (std::size_t j = 0; j < in; ++j) z += h.gate_w(i, j) * x[j];
      y[i] = sig(z) * x[i];
    }
  }
  std::vector<double> p(c_n, 0.0);
  for (std::size_t c = 0; c < c_n; ++c) {
    std::vector<double> g(e_n), ex(e_n);
    double gmax = -1e300;
    for (std::size_t e = 0; e < e_n; ++e) {
      const std::size_t r = c * e_n + e;
      double zg = h.expert_gate_b(0, r), ze = h.expert_b(0, r);
      for (std::size_t j = 0; j < in; ++j) {
        zg += h.expert_gate_w(r, j) * y[j];
        ze += h.expert_w(r, j) * y[j];
      }
      g[e] = zg;
      ex[e] = sig(ze);
      gmax = std::max(gmax, zg);
    }
    double z = 0.0;
    for (double& v : g) z += (v = std::exp(v - gmax));
    for (std::size_t e = 0; e < e_n; ++e) p[c] += g[e] / z * ex[e];
  }
  if (!s.output_gate) return p;
  std::vector<double> out(c_n);
  for (std::size_t c = 0; c < c_n; ++c) {
    double z = h.out_gate_b(0, c);
    for (std::size_t j = 0; j < c_n; ++j) z += h.out_gate_w(c, j) * p[j];
    out[c] = sig(z) * p[c];
  }
  return out;
}

}  // namespace

TEST(Head, SaturatedGateIsIdentity) {
  HeadSpec s{.input_dim = 4, .num_classes = 3, .experts = 2, .input_gate = true, .output_gate = false};
  SplitMix64 rng(1);
  ClassifierHead h = random_head(s, rng);
  h.gate_w.fill(0.0);
  h.gate_b.fill(40.0);
  const auto x = random_vec(rng, 4);
  const auto f = forward_head(s, h, x);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(f.cache.y[i], x[i], 1e-15);
  HeadSpec off = s;
  off.input_gate = false;
  const auto g = forward_head(off, h, x);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(f.probs[c], g.probs[c], 1e-15);
}

TEST(Head, SingleExpertIsLogistic) {
  HeadSpec s{.input_dim = 3, .num_classes = 2, .experts = 1, .input_gate = false, .output_gate = false};
  SplitMix64 rng(2);
  const ClassifierHead h = random_head(s, rng);
  const auto x = random_vec(rng, 3);
  const auto f = forward_head(s, h, x);
  for (std::size_t c = 0; c < 2; ++c) {
    double z = h.expert_b(0, c);
    for (std::size_t j = 0; j < 3; ++j) z += h.expert_w(c, j) * x[j];
    EXPECT_NEAR(f.probs[c], sig(z), 1e-15);
    EXPECT_EQ(f.cache.mix[c], 1.0);
  }
}

TEST(Head, MatchesOracleLoop) {
  SplitMix64 rng(3);
  for (int trial = 0; trial < 40; ++trial) {
    HeadSpec s{.input_dim = 1 + rng.below(9), .num_classes = 1 + rng.below(6),
               .experts = 1 + rng.below(4), .input_gate = rng.below(2) == 1,
               .output_gate = rng.below(2) == 1};
    const ClassifierHead h = random_head(s, rng, 2.0);
    const auto x = random_vec(rng, s.input_dim);
    const auto got = forward_head(s, h, x).probs;
    const auto want = oracle_forward(s, h, x);
    for (std::size_t c = 0; c < s.num_classes; ++c) {
      EXPECT_NEAR(got[c], want[c], 1e-13);
      EXPECT_GE(got[c], 0.0);
      EXPECT_LE(got[c], 1.0);
    }
  }
}

TEST(Head, DimensionMismatchThrows) {
  HeadSpec s{.input_dim = 3, .num_classes = 2};
  SplitMix64 rng(4);
  const ClassifierHead h = random_head(s, rng);
  EXPECT_THROW(forward_head(s, h, std::vector<double>(4, 0.0)), std::invalid_argument);
  EXPECT_THROW(validate(HeadSpec{.input_dim = 3, .num_classes = 2, .experts = 0}), std::invalid_argument);
}

TEST(Bce, HalfEverywhereIsLn2) {
  const std::vector<double> p(5, 0.5);
  const std::vector<std::uint32_t> labels{1, 3};
  EXPECT_NEAR(bce_loss(p, labels).loss, std::log(2.0), 1e-15);
}

TEST(Bce, PerfectPredictionIsTiny) {
  std::vector<double> p(4, kProbClamp);
  p[2] = 1.0 - kProbClamp;
  const std::vector<std::uint32_t> labels{2};
  const auto r = bce_loss(p, labels);
  EXPECT_GT(r.loss, 0.0);
  EXPECT_LT(r.loss, 2e-7);
  // Exact 0/1 probabilities sit in the clamp and get no gradient.
  std::vector<double> hard(4, 0.0);
  hard[2] = 1.0;
  const auto rh = bce_loss(hard, labels);
  EXPECT_TRUE(std::isfinite(rh.loss));
  for (double d : rh.dprobs) EXPECT_EQ(d, 0.0);
}

TEST(Bce, GradientMatchesDifferences) {
  SplitMix64 rng(5);
  std::vector<double> p(6);
  for (double& v : p) v = rng.uniform(0.05, 0.95);
  const std::vector<std::uint32_t> labels{0, 4};
  const auto r = bce_loss(p, labels);
  for (std::size_t i = 0; i < 6; ++i) {
    auto up = p, dn = p;
    up[i] += 1e-6;
    dn[i] -= 1e-6;
    const double num = (bce_loss(up, labels).loss - bce_loss(dn, labels).loss) / 2e-6;
    EXPECT_LT(relative_error(r.dprobs[i], num), 1e-6);
  }
}

TEST(Head, FiniteDifferenceAllConfigs) {
  SplitMix64 rng(6);
  for (int mask = 0; mask < 4; ++mask) {
    HeadSpec s{.input_dim = 5, .num_classes = 4, .experts = 3, .input_gate = (mask & 1) != 0,
               .output_gate = (mask & 2) != 0};
    ClassifierHead h = random_head(s, rng, 1.5);
    std::vector<double> x = random_vec(rng, 5);
    const std::vector<std::uint32_t> labels{1, 2};
    auto params = h.refs();
    Matrix xin(1, 5);
    for (std::size_t i = 0; i < 5; ++i) xin(0, i) = x[i];
    params.push_back({"input", &xin});
    auto loss = [&](std::vector<Matrix>* grads) {
      const auto f = forward_head(s, h, xin.flat());
      const auto b = bce_loss(f.probs, labels);
      if (grads) {
        auto g = backward_head(s, h, f.cache, b.dprobs);
        grads->clear();
        for (const auto& r : g.params.refs()) grads->push_back(*r.value);
        Matrix gi(1, 5);
        for (std::size_t i = 0; i < 5; ++i) gi(0, i) = g.input[i];
        grads->push_back(gi);
      }
      return b.loss;
    };
    const auto rep = gradcheck_fn(params, loss, 100 + mask);
    for (const auto& blk : rep.blocks) EXPECT_LT(blk.max_rel_err, 1e-4) << blk.name << " mask " << mask;
  }
}

TEST(Model, JointDifferencesThroughPoolAndHead) {
  // 2 frames, D = 4, K = 3, every variant and both code kinds.
  for (Variant v : kAllVariants) {
    for (CodeKind code : {CodeKind::kVlad, CodeKind::kDsgmm}) {
      ModelSpec spec;
      spec.deep = PoolSpec{.code = code, .variant = v, .k = 3, .dim = 4, .gamma = 0.5};
      spec.num_classes = 3;
      const auto rep = gradcheck(spec, 11, 20, 1e-5, 2, 2);
      EXPECT_TRUE(rep.passed()) << to_string(v) << " " << to_string(code) << " " << rep.max_rel_err;
      EXPECT_GT(rep.blocks.size(), 4u);
    }
  }
}

TEST(Model, FrameOrderInvariant) {
  ModelSpec spec;
  spec.deep = PoolSpec{.k = 3, .dim = 4};
  spec.num_classes = 3;
  SplitMix64 rng(12);
  const Model m = make_model(spec, rng);
  Matrix x(6, 4), rev(6, 4);
  for (double& v : x.flat()) v = rng.normal();
  for (std::size_t t = 0; t < 6; ++t)
    for (std::size_t d = 0; d < 4; ++d) rev(5 - t, d) = x(t, d);
  const auto a = predict(m, x), b = predict(m, rev);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(a[c], b[c], 1e-13);
}
