// SPDX-License-Identifier: Apache-2.0
#include "sgmm/reco_run.hpp"

#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <stdexcept>

#include "sgmm/metrics.hpp"
#include "sgmm/rng.hpp"
#include "sgmm/trainer.hpp"

namespace sgmm {

namespace {

constexpr std::uint64_t kStreamBatch = 11;
constexpr std::uint64_t kStreamFrames = 12;
constexpr std::uint64_t kStreamEmbed = 13;

std::map<std::uint32_t, std::uint32_t> last_sessions(const CowatchData& cw) {
  std::map<std::uint32_t, std::uint32_t> last;
  for (const auto& e : cw.events) {
    auto [it, fresh] = last.emplace(e.user, e.session);
    if (!fresh) it->second = std::max(it->second, e.session);
  }
  return last;
}

double auc_or_nan(const std::vector<double>& s, const std::vector<int>& y) {
  bool pos = false, neg = false;
  for (int v : y) (v ? pos : neg) = true;
  if (!pos || !neg) return std::numeric_limits<double>::quiet_NaN();
  return auc(s, y);
}

}  // namespace

SessionSplit split_last_session(const CowatchData& cw) {
  const auto last = last_sessions(cw);
  SessionSplit out;
  for (const auto& e : cw.events) (e.session == last.at(e.user) ? out.test : out.train).push_back(e);
  return out;
}

RecoTrainResult train_reco(const Dataset& videos, const CowatchData& cw, RecoModel init,
                           const RecoTrainConfig& cfg) {
  if (!(cfg.lr >= 0.0) || cfg.batch_size == 0 || cfg.frames_per_video == 0) {
    throw std::invalid_argument("train_reco: bad config");
  }
  const auto last = last_sessions(cw);
  std::vector<TripletIds> pool;
  for (const auto& t : cw.triplets) {
    auto it = last.find(t.user);
    if (it != last.end() && t.session == it->second) continue;
    for (std::uint32_t v : {t.anchor, t.positive, t.negative}) {
      if (v >= videos.records.size()) throw std::invalid_argument("train_reco: video index out of range");
    }
    pool.push_back(t);
  }
  if (pool.empty()) throw std::invalid_argument("train_reco: no training triplets");

  RecoTrainResult res{std::move(init), {}};
  RecoModel& m = res.model;
  AdamState adam = make_adam(m.trainable());
  for (std::uint64_t step = 0; step < cfg.steps; ++step) {
    SplitMix64 pick(SplitMix64::derive(cfg.seed, kStreamBatch, step));
    const std::uint64_t frame_seed = SplitMix64::derive(cfg.seed, kStreamFrames, step);
    std::vector<Matrix> frames;
    std::vector<Triplet> batch;
    for (std::size_t i = 0; i < cfg.batch_size; ++i) {
      const TripletIds& t = pool[pick.below(pool.size())];
      const std::uint32_t ids[3] = {t.anchor, t.positive, t.negative};
      for (std::size_t j = 0; j < 3; ++j) {
        frames.push_back(sample_frames(videos.records[ids[j]].frames, cfg.frames_per_video,
                                       SplitMix64::derive(frame_seed, 3 * i + j, 0)));
      }
      batch.push_back({3 * i, 3 * i + 1, 3 * i + 2});
    }
    std::vector<Matrix> grads;
    const double loss = triplet_loss(m, frames, batch, cfg.margin, &grads);
    const double scale = 1.0 / static_cast<double>(cfg.batch_size);
    for (auto& g : grads) {
      for (double& v : g.flat()) v *= scale;
    }
    adam_step(m.trainable(), grads, adam, cfg.lr, cfg.clip_lo, cfg.clip_hi);
    res.batch_loss.push_back(loss * scale);
  }
  return res;
}

std::vector<std::vector<double>> embed_all(const RecoModel& m, const Dataset& videos,
                                           std::size_t frames_per_video, std::uint64_t seed) {
  std::vector<std::vector<double>> out;
  out.reserve(videos.records.size());
  for (std::size_t i = 0; i < videos.records.size(); ++i) {
    const Matrix& f = videos.records[i].frames;
    out.push_back(embed_video(
        m, frames_per_video == 0
               ? f
               : sample_frames(f, frames_per_video, SplitMix64::derive(seed, kStreamEmbed, i))));
  }
  return out;
}

RecoEvalResult evaluate_reco(const RecoModel& m, const Dataset& videos, const CowatchData& cw,
                             const RecoEvalConfig& cfg) {
  for (const auto& e : cw.events) {
    if (e.video >= videos.records.size()) throw std::invalid_argument("evaluate_reco: video index out of range");
  }
  const auto emb = embed_all(m, videos, cfg.frames_per_video, cfg.seed);
  const SessionSplit split = split_last_session(cw);
  if (split.train.empty() || split.test.empty()) throw std::invalid_argument("evaluate_reco: need train and test sessions");

  std::map<std::uint32_t, std::vector<std::vector<double>>> history;
  std::set<std::uint32_t> seen;
  for (const auto& e : split.train) {
    if (!e.label) continue;
    history[e.user].push_back(emb[e.video]);
    seen.insert(e.video);
  }

  RecoEvalResult r;
  r.n_test = split.test.size();
  r.max_avg_minus_max = -std::numeric_limits<double>::infinity();
  std::vector<double> avg_s, max_s;
  std::vector<int> sim_y;
  for (const auto& e : split.test) {
    auto it = history.find(e.user);
    if (it == history.end()) continue;
    const SimScores s = sim_scores(it->second, emb[e.video]);
    avg_s.push_back(s.avg);
    max_s.push_back(s.max);
    sim_y.push_back(e.label);
    r.max_avg_minus_max = std::max(r.max_avg_minus_max, s.avg - s.max);
  }
  r.n_sim_scored = sim_y.size();
  r.auc_avg_sim = auc_or_nan(avg_s, sim_y);
  r.auc_max_sim = auc_or_nan(max_s, sim_y);

  auto fit_and_score = [&](bool features, double* all, double* cold) {
    std::vector<GlmixObs> obs;
    for (const auto& e : split.train) {
      obs.push_back({e.user, features ? emb[e.video] : std::vector<double>{}, e.label});
    }
    const GlmixModel g = glmix_fit(obs, {.prior = cfg.glmix_prior});
    std::vector<double> s, cs;
    std::vector<int> y, cy;
    for (const auto& e : split.test) {
      const std::vector<double> f = features ? emb[e.video] : std::vector<double>{};
      const double p = glmix_predict(g, e.user, f);
      s.push_back(p);
      y.push_back(e.label);
      if (!seen.count(e.video)) {
        cs.push_back(p);
        cy.push_back(e.label);
      }
    }
    *all = auc_or_nan(s, y);
    if (cold) {
      *cold = auc_or_nan(cs, cy);
      r.n_coldstart = cs.size();
    }
  };
  fit_and_score(true, &r.auc_glmix, &r.auc_glmix_coldstart);
  fit_and_score(false, &r.auc_glmix_nofeature, nullptr);
  return r;
}

}  // namespace sgmm
