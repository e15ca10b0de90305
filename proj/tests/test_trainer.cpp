#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "sgmm/binary_io.hpp"
#include "sgmm/rng.hpp"
#include "sgmm/trainer.hpp"

using namespace sgmm;

namespace {

// Two classes separated along the first coordinate.
Dataset separable(std::uint64_t seed, std::size_t per_class) {
  SplitMix64 rng(seed);
  Dataset ds;
  ds.num_classes = 2;
  ds.dim = 3;
  for (std::size_t i = 0; i < 2 * per_class; ++i) {
    const std::uint32_t c = i % 2;
    VideoRecord r{"v" + std::to_string(i), {c}, Matrix(4 + rng.below(5), 3)};
    for (std::size_t t = 0; t < r.frames.rows(); ++t) {
      for (std::size_t d = 0; d < 3; ++d) r.frames(t, d) = rng.normal(0.0, 0.5);
      r.frames(t, 0) += c ? -2.0 : 2.0;
    }
    ds.records.push_back(std::move(r));
  }
  return ds;
}

ModelSpec avg_spec() {
  ModelSpec s;
  s.pool = PoolKind::kAvg;
  s.deep.dim = 3;
  s.num_classes = 2;
  return s;
}

ModelSpec deep_spec() {
  ModelSpec s;
  s.deep = PoolSpec{.k = 3, .dim = 3};
  s.num_classes = 2;
  return s;
}

TrainConfig small_cfg() {
  TrainConfig c;
  c.lr = 1e-2;
  c.batch_size = 8;
  c.frames_per_video = 5;
  c.max_steps = 60;
  c.eval_every = 20;
  c.seed = 9;
  return c;
}

Matrix scalar(double v) { return Matrix(1, 1, v); }

}  // namespace

TEST(SampleFrames, SingleFrameRepeats) {
  Matrix one(1, 2);
  one(0, 0) = 1.5;
  one(0, 1) = -2.0;
  const Matrix s = sample_frames(one, 30, 3);
  ASSERT_EQ(s.rows(), 30u);
  for (std::size_t t = 0; t < 30; ++t) EXPECT_EQ(s(t, 0), 1.5);
  EXPECT_EQ(sample_frames(one, 30, 3), s);
}

TEST(SampleFrames, DeterministicAndUniform) {
  Matrix x(5, 1);
  for (std::size_t t = 0; t < 5; ++t) x(t, 0) = static_cast<double>(t);
  EXPECT_EQ(sample_frames(x, 100, 7), sample_frames(x, 100, 7));
  EXPECT_NE(sample_frames(x, 100, 7), sample_frames(x, 100, 8));
  const std::size_t draws = 100000;
  const Matrix s = sample_frames(x, draws, 11);
  std::vector<double> counts(5, 0.0);
  for (std::size_t t = 0; t < draws; ++t) counts[static_cast<std::size_t>(s(t, 0))] += 1.0;
  const double sd = std::sqrt(draws * 0.2 * 0.8);
  for (double c : counts) EXPECT_NEAR(c, draws * 0.2, 5.0 * sd);
}

TEST(Adam, FirstStepIsMinusLr) {
  Matrix p = scalar(0.0);
  std::vector<ParamRef> params{{"p", &p}};
  auto st = make_adam(params);
  std::vector<Matrix> g{scalar(1.0)};
  adam_step(params, g, st, 0.1, -1.0, 1.0);
  // m_hat = 1, v_hat = 1, step = lr / (1 + eps).
  EXPECT_NEAR(p(0, 0), -0.1 / (1.0 + kAdamEps), 1e-16);
  EXPECT_EQ(st.t, 1u);
}

TEST(Adam, ClipsBeforeMoments) {
  Matrix a = scalar(0.0), b = scalar(0.0);
  std::vector<ParamRef> pa{{"p", &a}}, pb{{"p", &b}};
  auto sa = make_adam(pa), sb = make_adam(pb);
  std::vector<Matrix> ga{scalar(5.0)}, gb{scalar(1.0)};
  adam_step(pa, ga, sa, 0.1, -1.0, 1.0);
  adam_step(pb, gb, sb, 0.1, -1.0, 1.0);
  EXPECT_EQ(ga[0](0, 0), 1.0);
  EXPECT_EQ(a, b);
  EXPECT_EQ(sa.v[0], sb.v[0]);
  std::vector<Matrix> neg{scalar(-7.0)};
  adam_step(pa, neg, sa, 0.1, -1.0, 1.0);
  EXPECT_EQ(neg[0](0, 0), -1.0);
}

TEST(Adam, ZeroGradient) {
  Matrix p = scalar(2.0);
  std::vector<ParamRef> params{{"p", &p}};
  auto st = make_adam(params);
  std::vector<Matrix> zero{scalar(0.0)};
  adam_step(params, zero, st, 0.1, -1.0, 1.0);
  EXPECT_EQ(p(0, 0), 2.0);
  std::vector<Matrix> one{scalar(1.0)};
  adam_step(params, one, st, 0.1, -1.0, 1.0);
  const double m = st.m[0](0, 0), v = st.v[0](0, 0);
  zero[0] = scalar(0.0);
  adam_step(params, zero, st, 0.1, -1.0, 1.0);
  EXPECT_EQ(st.m[0](0, 0), kAdamBeta1 * m);
  EXPECT_EQ(st.v[0](0, 0), kAdamBeta2 * v);
}

TEST(Schedule, ExactStaircase) {
  TrainConfig c;
  c.lr = 3e-3;
  c.decay_factor = 0.8;
  c.decay_every = 7;
  for (std::uint64_t s = 0; s < 60; ++s)
    EXPECT_EQ(learning_rate(c, s), c.lr * std::pow(0.8, static_cast<double>(s / 7))) << s;
  EXPECT_EQ(learning_rate(c, 6), c.lr);
  EXPECT_EQ(learning_rate(c, 7), c.lr * 0.8);
}

TEST(Config, Validation) {
  TrainConfig c;
  c.lr = -1.0;
  EXPECT_THROW(validate(c), std::invalid_argument);
  c = TrainConfig{};
  c.decay_factor = 1.5;
  EXPECT_THROW(validate(c), std::invalid_argument);
  c = TrainConfig{};
  c.frames_per_video = 0;
  EXPECT_THROW(validate(c), std::invalid_argument);
}

TEST(Train, EmptyDatasetThrows) {
  SplitMix64 rng(1);
  const Dataset ds = separable(1, 4);
  Dataset empty;
  empty.num_classes = 2;
  empty.dim = 3;
  EXPECT_THROW(train(empty, ds, make_model(avg_spec(), rng), small_cfg()), std::invalid_argument);
  EXPECT_THROW(train(ds, empty, make_model(avg_spec(), rng), small_cfg()), std::invalid_argument);
}

TEST(Train, ConvergesOnSeparableData) {
  const Dataset tr = separable(2, 40), va = separable(3, 10);
  SplitMix64 rng(4);
  const Model init = make_model(avg_spec(), rng);
  TrainConfig c = small_cfg();
  c.max_steps = 500;
  c.eval_every = 100;
  const double before = evaluate(init, tr, 0, 1).loss;
  const auto res = train(tr, va, init, c);
  const double after = evaluate(model_from_checkpoint(res.last), tr, 0, 1).loss;
  EXPECT_LT(after, 0.1 * before) << before << " -> " << after;
  EXPECT_EQ(res.log.size(), 5u);
  EXPECT_EQ(res.log.back().step, 500u);
}

TEST(Train, ZeroLearningRateKeepsParameters) {
  const Dataset tr = separable(5, 10), va = separable(6, 4);
  SplitMix64 rng(7);
  const Model init = make_model(deep_spec(), rng);
  TrainConfig c = small_cfg();
  c.lr = 0.0;
  const auto res = train(tr, va, init, c);
  EXPECT_EQ(snapshot(init.params()), res.last.params);
}

TEST(Train, ResumeMatchesUninterrupted) {
  const Dataset tr = separable(8, 12), va = separable(9, 4);
  SplitMix64 rng(10);
  const Model init = make_model(deep_spec(), rng);
  const TrainConfig full = small_cfg();
  const auto straight = train(tr, va, init, full);

  TrainConfig half = full;
  half.max_steps = 40;
  const auto first = train(tr, va, init, half);
  const auto resumed = train(tr, va, model_from_checkpoint(first.last), full, &first.last, &first.best);
  EXPECT_EQ(encode_checkpoint(resumed.last), encode_checkpoint(straight.last));
  EXPECT_EQ(encode_checkpoint(resumed.best), encode_checkpoint(straight.best));
  ASSERT_EQ(resumed.log.size(), 1u);
  EXPECT_EQ(resumed.log[0], straight.log.back());
}

TEST(Train, DeterministicAcrossRunsAndThreads) {
  const Dataset tr = separable(11, 12), va = separable(12, 4);
  SplitMix64 rng(13);
  const Model init = make_model(deep_spec(), rng);
  TrainConfig c = small_cfg();
  const auto a = train(tr, va, init, c);
  const auto b = train(tr, va, init, c);
  c.threads = 3;
  const auto t3 = train(tr, va, init, c);
  EXPECT_EQ(encode_checkpoint(a.best), encode_checkpoint(b.best));
  EXPECT_EQ(format_log(a.log), format_log(b.log));
  EXPECT_EQ(encode_checkpoint(a.last), encode_checkpoint(t3.last));
  EXPECT_EQ(format_log(a.log), format_log(t3.log));
}

TEST(Train, BestIsLowestValidationLoss) {
  const Dataset tr = separable(14, 12), va = separable(15, 4);
  SplitMix64 rng(16);
  const auto res = train(tr, va, make_model(deep_spec(), rng), small_cfg());
  double lo = res.log[0].val_loss;
  for (const auto& r : res.log) lo = std::min(lo, r.val_loss);
  EXPECT_EQ(res.best.val_loss, lo);
}

TEST(Log, CsvHeader) {
  const std::string s = format_log({LogRow{10, 0.5, 0.25, 0.75, 1.0}});
  EXPECT_EQ(s.substr(0, s.find('\n')), "step,train_loss,val_loss,gap,hit1");
  EXPECT_NE(s.find("10,0.5,0.25,0.75,1"), std::string::npos);
}

TEST(Checkpoint, RoundTripForwardBitExact) {
  SplitMix64 rng(17);
  Model m = make_model(deep_spec(), rng);
  AdamState st = make_adam(m.trainable());
  const Checkpoint ck = make_checkpoint(m, &st, 5, 12, 0.3);
  const auto path = (std::filesystem::temp_directory_path() / "sgmm_test_ckpt.bin").string();
  save_checkpoint(ck, path);
  const Checkpoint back = load_checkpoint(path);
  std::filesystem::remove(path);
  EXPECT_EQ(back, ck);
  const Model m2 = model_from_checkpoint(back);
  Matrix x(7, 3);
  for (double& v : x.flat()) v = rng.normal();
  EXPECT_EQ(predict(m, x), predict(m2, x));
}

TEST(Checkpoint, CorruptRejected) {
  SplitMix64 rng(18);
  auto bytes = encode_checkpoint(make_checkpoint(make_model(avg_spec(), rng), nullptr, 1, 0, 1.0));
  auto extra = bytes;
  extra.push_back(0);
  EXPECT_THROW(decode_checkpoint(extra), DataError);
  bytes.resize(bytes.size() / 2);
  EXPECT_THROW(decode_checkpoint(bytes), DataError);
}

TEST(Gradcheck, AvgAndDeepPass) {
  EXPECT_TRUE(gradcheck(avg_spec(), 3).passed());
  EXPECT_TRUE(gradcheck(deep_spec(), 3).passed());
  EXPECT_EQ(relative_error(0.0, 0.0), 0.0);
  EXPECT_NEAR(relative_error(1e-9, 0.0), 1e-3, 1e-18);
  EXPECT_NEAR(relative_error(2.0, 1.0), 0.5, 1e-15);
}

TEST(Gradcheck, DetectsWrongGradient) {
  Matrix p = scalar(1.5);
  std::vector<ParamRef> params{{"p", &p}};
  auto bad = [&](std::vector<Matrix>* g) {
    if (g) *g = {scalar(3.0 * p(0, 0))};  // true derivative of p^2 is 2p
    return p(0, 0) * p(0, 0);
  };
  EXPECT_FALSE(gradcheck_fn(params, bad, 1).passed());
}
