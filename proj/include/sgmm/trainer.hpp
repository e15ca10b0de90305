// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "sgmm/checkpoint.hpp"
#include "sgmm/data.hpp"
#include "sgmm/model.hpp"

namespace sgmm {

struct TrainConfig {
  double lr = 2e-4;
  double clip_lo = -1.0;
  double clip_hi = 1.0;
  double decay_factor = 0.8;
  std::uint64_t decay_every = 2000;
  std::size_t frames_per_video = 30;
  std::size_t batch_size = 64;
  std::uint64_t max_steps = 1000;
  std::uint64_t eval_every = 100;
  std::uint64_t seed = 1;
  std::size_t threads = 1;
};

void validate(const TrainConfig& cfg);

// `count` rows drawn uniformly with replacement.
Matrix sample_frames(const Matrix& frames, std::size_t count, std::uint64_t seed);

// lr0 * decay^floor(step / decay_every)
double learning_rate(const TrainConfig& cfg, std::uint64_t step);

struct AdamState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  std::uint64_t t = 0;
};

AdamState make_adam(const std::vector<ParamRef>& params);

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

// Clips `grads` elementwise into [clip_lo, clip_hi] (in place), then applies
// one bias-corrected Adam update.
void adam_step(const std::vector<ParamRef>& params, std::vector<Matrix>& grads, AdamState& state,
               double lr, double clip_lo, double clip_hi);

struct LogRow {
  std::uint64_t step = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double gap = 0.0;
  double hit1 = 0.0;
  bool operator==(const LogRow&) const = default;
};

std::string format_log(const std::vector<LogRow>& rows, bool header = true);

struct EvalResult {
  double loss = 0.0;
  double gap = 0.0;
  double hit1 = 0.0;
  std::vector<std::vector<double>> probs;  // per record
};

// Frames per video are sampled with a stream that depends only on (seed,
// record index), so repeated evaluations see identical inputs. With
// frames_per_video == 0 every frame is used.
EvalResult evaluate(const Model& model, const Dataset& data, std::size_t frames_per_video,
                    std::uint64_t seed, std::size_t threads = 1);

struct TrainResult {
  Checkpoint best;  // lowest validation loss seen
  Checkpoint last;  // state at the final step, for resuming
  std::vector<LogRow> log;
};

// Evaluates on `val` every eval_every steps and at max_steps. Resuming from
// `last` reproduces an uninterrupted run exactly when last.step is a
// multiple of eval_every; pass the matching best checkpoint so the best
// snapshot survives the restart. Throws std::invalid_argument when `train`
// or `val` is empty.
TrainResult train(const Dataset& train, const Dataset& val, Model init, const TrainConfig& cfg,
                  const Checkpoint* resume_last = nullptr,
                  const Checkpoint* resume_best = nullptr,
                  const std::function<void(const LogRow&)>& on_eval = {});

Checkpoint make_checkpoint(const Model& model, const AdamState* adam, std::uint64_t seed,
                           std::uint64_t step, double val_loss);
Model model_from_checkpoint(const Checkpoint& ckpt);

struct GradcheckBlock {
  std::string name;
  std::size_t coords = 0;
  double max_rel_err = 0.0;
};

struct GradcheckReport {
  std::vector<GradcheckBlock> blocks;
  double max_rel_err = 0.0;
  bool passed(double threshold = 1e-4) const { return max_rel_err < threshold; }
};

// |a - n| / max(|a|, |n|, floor)
double relative_error(double analytic, double numeric, double floor = 1e-6);

// Central differences (step h) on up to `coords` random coordinates of each
// trainable block of a randomly initialised model, on a small random
// multi-label instance of `videos` videos with `frames` frames each.
GradcheckReport gradcheck(const ModelSpec& spec, std::uint64_t seed, std::size_t coords = 20,
                          double h = 1e-5, std::size_t videos = 2, std::size_t frames = 5);

// Same, for any scalar function of a parameter list with an analytic
// gradient (aligned with `params`).
GradcheckReport gradcheck_fn(const std::vector<ParamRef>& params,
                             const std::function<double(std::vector<Matrix>*)>& loss,
                             std::uint64_t seed, std::size_t coords = 20, double h = 1e-5);

}  // namespace sgmm
