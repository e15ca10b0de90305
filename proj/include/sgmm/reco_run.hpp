// SPDX-License-Identifier: Apache-2.0
#pragma once

// Co-watch experiment driver: triplet training of the embedding stack and
// the held-out watch-prediction evaluation (similarity scores and GLMix).

#include <cstdint>
#include <vector>

#include "sgmm/data.hpp"
#include "sgmm/reco.hpp"

namespace sgmm {

// The last session of every user is held out for evaluation.
struct SessionSplit {
  std::vector<WatchEvent> train;
  std::vector<WatchEvent> test;
};
SessionSplit split_last_session(const CowatchData& cw);

struct RecoTrainConfig {
  double lr = 1e-3;
  double clip_lo = -1.0;
  double clip_hi = 1.0;
  double margin = kDefaultMargin;
  std::size_t batch_size = 16;
  std::size_t frames_per_video = 30;
  std::uint64_t steps = 500;
  std::uint64_t seed = 1;
};

struct RecoTrainResult {
  RecoModel model;
  std::vector<double> batch_loss;  // mean hinge per step
};

// Triplets from held-out sessions are never used.
RecoTrainResult train_reco(const Dataset& videos, const CowatchData& cw, RecoModel init,
                           const RecoTrainConfig& cfg);

struct RecoEvalConfig {
  std::size_t frames_per_video = 30;  // 0 = all frames
  double glmix_prior = 1.0;
  std::uint64_t seed = 1;
};

// AUCs are NaN when the scored set lacks a class.
struct RecoEvalResult {
  double auc_avg_sim = 0.0;
  double auc_max_sim = 0.0;
  double auc_glmix = 0.0;
  double auc_glmix_coldstart = 0.0;
  double auc_glmix_nofeature = 0.0;  // intercepts only
  std::size_t n_test = 0;
  std::size_t n_sim_scored = 0;  // test events whose user has a training history
  std::size_t n_coldstart = 0;
  // Largest avg - max over every scored pair; <= 0 by construction.
  double max_avg_minus_max = 0.0;
};

std::vector<std::vector<double>> embed_all(const RecoModel& m, const Dataset& videos,
                                           std::size_t frames_per_video, std::uint64_t seed);

RecoEvalResult evaluate_reco(const RecoModel& m, const Dataset& videos, const CowatchData& cw,
                             const RecoEvalConfig& cfg);

}  // namespace sgmm
