// SPDX-License-Identifier: Apache-2.0
#include "sgmm/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>
#include <thread>

#include "sgmm/binary_io.hpp"
#include "sgmm/metrics.hpp"
#include "sgmm/rng.hpp"

namespace sgmm {
namespace {

// Stream ids for SplitMix64::derive. Every random draw in training is a pure
// function of (seed, stream, index), so a run can resume from (seed, step).
constexpr std::uint64_t kStreamEpoch = 1;
constexpr std::uint64_t kStreamFrames = 2;
constexpr std::uint64_t kStreamEval = 3;

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += threads) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::vector<std::size_t> epoch_order(std::uint64_t seed, std::uint64_t epoch, std::size_t n) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  SplitMix64 rng(SplitMix64::derive(seed, kStreamEpoch, epoch));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

Matrix frames_for(const VideoRecord& r, std::size_t count, std::uint64_t seed) {
  return count == 0 ? r.frames : sample_frames(r.frames, count, seed);
}

}  // namespace

void validate(const TrainConfig& c) {
  if (!(c.lr >= 0.0) || !std::isfinite(c.lr)) throw std::invalid_argument("lr must be >= 0");
  if (!(c.decay_factor > 0.0 && c.decay_factor <= 1.0)) {
    throw std::invalid_argument("decay_factor must be in (0, 1]");
  }
  if (c.decay_every == 0) throw std::invalid_argument("decay_every must be positive");
  if (c.frames_per_video == 0) throw std::invalid_argument("frames_per_video must be >= 1");
  if (c.batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
  if (c.eval_every == 0) throw std::invalid_argument("eval_every must be positive");
  if (!(c.clip_lo <= c.clip_hi)) throw std::invalid_argument("clip range is empty");
}

Matrix sample_frames(const Matrix& frames, std::size_t count, std::uint64_t seed) {
  if (frames.rows() == 0) throw std::invalid_argument("sample_frames: video has no frames");
  SplitMix64 rng(seed);
  Matrix out(count, frames.cols());
  for (std::size_t i = 0; i < count; ++i) {
    const auto src = frames.row(rng.below(frames.rows()));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

double learning_rate(const TrainConfig& cfg, std::uint64_t step) {
  return cfg.lr * std::pow(cfg.decay_factor, static_cast<double>(step / cfg.decay_every));
}

AdamState make_adam(const std::vector<ParamRef>& params) {
  AdamState s;
  s.m = zeros_like(params);
  s.v = zeros_like(params);
  return s;
}

void adam_step(const std::vector<ParamRef>& params, std::vector<Matrix>& grads, AdamState& s,
               double lr, double clip_lo, double clip_hi) {
  if (grads.size() != params.size() || s.m.size() != params.size()) {
    throw std::invalid_argument("adam_step: parameter/gradient/state count mismatch");
  }
  ++s.t;
  const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(s.t));
  const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(s.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].value->flat();
    auto g = grads[i].flat();
    auto m = s.m[i].flat();
    auto v = s.v[i].flat();
    if (g.size() != p.size()) throw std::invalid_argument("adam_step: shape mismatch");
    for (std::size_t j = 0; j < p.size(); ++j) {
      g[j] = std::clamp(g[j], clip_lo, clip_hi);
      m[j] = kAdamBeta1 * m[j] + (1.0 - kAdamBeta1) * g[j];
      v[j] = kAdamBeta2 * v[j] + (1.0 - kAdamBeta2) * g[j] * g[j];
      const double mh = m[j] / bc1;
      const double vh = v[j] / bc2;
      p[j] -= lr * mh / (std::sqrt(vh) + kAdamEps);
    }
  }
}

std::string format_log(const std::vector<LogRow>& rows, bool header) {
  std::string out = header ? "step,train_loss,val_loss,gap,hit1\n" : "";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%llu,%.10g,%.10g,%.10g,%.10g\n",
                  static_cast<unsigned long long>(r.step), r.train_loss, r.val_loss, r.gap,
                  r.hit1);
    out += buf;
  }
  return out;
}

EvalResult evaluate(const Model& model, const Dataset& data, std::size_t frames_per_video,
                    std::uint64_t seed, std::size_t threads) {
  if (data.records.empty()) throw std::invalid_argument("evaluate: empty dataset");
  const std::size_t n = data.records.size();
  EvalResult res;
  res.probs.resize(n);
  std::vector<double> losses(n);
  parallel_for(n, threads, [&](std::size_t i) {
    const auto& r = data.records[i];
    const Matrix f = frames_for(r, frames_per_video, SplitMix64::derive(seed, kStreamEval, i));
    res.probs[i] = predict(model, f);
    losses[i] = bce_loss(res.probs[i], r.labels).loss;
  });
  for (double l : losses) res.loss += l;
  res.loss /= static_cast<double>(n);

  std::vector<std::string> ids;
  GroundTruth truth;
  for (const auto& r : data.records) {
    ids.push_back(r.id);
    truth[r.id] = std::set<int>(r.labels.begin(), r.labels.end());
  }
  const auto preds = to_predictions(ids, res.probs);
  res.gap = gap(preds, truth);
  res.hit1 = hit_at_1(preds, truth);
  return res;
}

Checkpoint make_checkpoint(const Model& model, const AdamState* adam, std::uint64_t seed,
                           std::uint64_t step, double val_loss) {
  Checkpoint c;
  c.meta = to_meta(model.spec);
  c.seed = seed;
  c.step = step;
  c.val_loss = val_loss;
  c.params = snapshot(model.params());
  if (adam) {
    c.adam_m = adam->m;
    c.adam_v = adam->v;
    c.adam_t = adam->t;
  }
  return c;
}

Model model_from_checkpoint(const Checkpoint& ckpt) {
  Model m;
  m.spec = model_spec_from_meta(ckpt.meta);
  if (m.spec.pool == PoolKind::kDeep) m.pool = make_pool_params(m.spec.deep);
  m.head = make_head(m.spec.head());
  restore(ckpt.params, m.params());
  return m;
}

TrainResult train(const Dataset& train_set, const Dataset& val, Model model,
                  const TrainConfig& cfg, const Checkpoint* resume_last,
                  const Checkpoint* resume_best,
                  const std::function<void(const LogRow&)>& on_eval) {
  validate(cfg);
  if (train_set.records.empty()) throw std::invalid_argument("train: empty training set");
  if (val.records.empty()) throw std::invalid_argument("train: empty validation set");

  TrainResult result;
  std::uint64_t step = 0;
  AdamState adam;
  if (resume_last) {
    model = model_from_checkpoint(*resume_last);
    step = resume_last->step;
    adam.m = resume_last->adam_m;
    adam.v = resume_last->adam_v;
    adam.t = resume_last->adam_t;
    if (adam.m.size() != model.trainable().size()) {
      throw DataError("checkpoint: optimizer state does not match the model");
    }
    result.best = resume_best ? *resume_best : *resume_last;
    result.best.best_val_loss = resume_last->best_val_loss;
    result.best.best_step = resume_last->best_step;
  } else {
    adam = make_adam(model.trainable());
    result.best = make_checkpoint(model, &adam, cfg.seed, 0,
                                  std::numeric_limits<double>::infinity());
  }
  double best_loss = result.best.best_val_loss;
  std::uint64_t best_step = result.best.best_step;

  const std::size_t n = train_set.records.size();
  const std::size_t batch = cfg.batch_size;
  std::uint64_t cached_epoch = ~0ULL;
  std::vector<std::size_t> order;

  double loss_sum = 0.0;
  std::size_t loss_count = 0;
  std::vector<std::vector<Matrix>> example_grads(cfg.threads > 1 ? batch : 1);
  std::vector<double> example_losses(batch);

  while (step < cfg.max_steps) {
    std::vector<ParamRef> params = model.trainable();
    std::vector<std::size_t> idx(batch);
    for (std::size_t i = 0; i < batch; ++i) {
      const std::uint64_t g = step * batch + i;
      const std::uint64_t epoch = g / n;
      if (epoch != cached_epoch) {
        order = epoch_order(cfg.seed, epoch, n);
        cached_epoch = epoch;
      }
      idx[i] = order[g % n];
    }
    const std::uint64_t frame_seed = SplitMix64::derive(cfg.seed, kStreamFrames, step);
    auto run_example = [&](std::size_t i, std::vector<Matrix>& g) {
      const auto& r = train_set.records[idx[i]];
      const Matrix f = sample_frames(r.frames, cfg.frames_per_video,
                                     SplitMix64::derive(frame_seed, i, 0));
      example_losses[i] = example_loss(model, f, r.labels, &g);
    };

    std::vector<Matrix> grads = zeros_like(params);
    if (cfg.threads > 1) {
      parallel_for(batch, cfg.threads, [&](std::size_t i) { run_example(i, example_grads[i]); });
      for (std::size_t i = 0; i < batch; ++i) add_into(grads, example_grads[i]);
    } else {
      for (std::size_t i = 0; i < batch; ++i) {
        run_example(i, example_grads[0]);
        add_into(grads, example_grads[0]);
      }
    }
    double batch_loss = 0.0;
    for (double l : example_losses) batch_loss += l;
    const double inv_b = 1.0 / static_cast<double>(batch);
    for (auto& g : grads) {
      for (double& v : g.flat()) v *= inv_b;
    }
    adam_step(params, grads, adam, learning_rate(cfg, step), cfg.clip_lo, cfg.clip_hi);
    ++step;
    loss_sum += batch_loss * inv_b;
    ++loss_count;

    if (step % cfg.eval_every == 0 || step == cfg.max_steps) {
      const EvalResult ev = evaluate(model, val, cfg.frames_per_video, cfg.seed, cfg.threads);
      LogRow row{step, loss_sum / static_cast<double>(loss_count), ev.loss, ev.gap, ev.hit1};
      loss_sum = 0.0;
      loss_count = 0;
      result.log.push_back(row);
      if (on_eval) on_eval(row);
      if (ev.loss < best_loss) {
        best_loss = ev.loss;
        best_step = step;
        result.best = make_checkpoint(model, &adam, cfg.seed, step, ev.loss);
      }
      result.best.best_val_loss = best_loss;
      result.best.best_step = best_step;
      result.last = make_checkpoint(model, &adam, cfg.seed, step, ev.loss);
      result.last.best_val_loss = best_loss;
      result.last.best_step = best_step;
    }
  }
  if (result.log.empty()) {
    // Nothing left to do (resumed at or past max_steps).
    result.last = resume_last ? *resume_last : make_checkpoint(model, &adam, cfg.seed, step,
                                                               best_loss);
  }
  return result;
}

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

GradcheckReport gradcheck_fn(const std::vector<ParamRef>& params,
                             const std::function<double(std::vector<Matrix>*)>& loss,
                             std::uint64_t seed, std::size_t coords, double h) {
  std::vector<Matrix> analytic;
  loss(&analytic);
  if (analytic.size() != params.size()) {
    throw std::invalid_argument("gradcheck: gradient list does not match parameters");
  }
  SplitMix64 rng(seed);
  GradcheckReport rep;
  for (std::size_t b = 0; b < params.size(); ++b) {
    auto p = params[b].value->flat();
    const auto a = analytic[b].flat();
    std::vector<std::size_t> pick(p.size());
    std::iota(pick.begin(), pick.end(), 0);
    if (p.size() > coords) {
      for (std::size_t i = 0; i < coords; ++i) std::swap(pick[i], pick[i + rng.below(p.size() - i)]);
      pick.resize(coords);
    }
    GradcheckBlock blk{params[b].name, pick.size(), 0.0};
    for (std::size_t j : pick) {
      const double saved = p[j];
      p[j] = saved + h;
      const double up = loss(nullptr);
      p[j] = saved - h;
      const double down = loss(nullptr);
      p[j] = saved;
      const double numeric = (up - down) / (2.0 * h);
      blk.max_rel_err = std::max(blk.max_rel_err, relative_error(a[j], numeric));
    }
    rep.max_rel_err = std::max(rep.max_rel_err, blk.max_rel_err);
    rep.blocks.push_back(std::move(blk));
  }
  return rep;
}

GradcheckReport gradcheck(const ModelSpec& spec, std::uint64_t seed, std::size_t coords, double h,
                          std::size_t videos, std::size_t frames) {
  SplitMix64 rng(seed);
  Model model = make_model(spec, rng);
  std::vector<Matrix> inputs;
  std::vector<std::vector<std::uint32_t>> labels;
  for (std::size_t v = 0; v < videos; ++v) {
    Matrix f(frames, spec.deep.dim);
    for (double& x : f.flat()) x = rng.normal();
    inputs.push_back(std::move(f));
    std::vector<std::uint32_t> l;
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
      if (rng.bernoulli(0.4)) l.push_back(static_cast<std::uint32_t>(c));
    }
    labels.push_back(std::move(l));
  }
  auto loss = [&](std::vector<Matrix>* grads) {
    double total = 0.0;
    if (grads) grads->clear();
    std::vector<Matrix> g;
    for (std::size_t v = 0; v < videos; ++v) {
      total += example_loss(model, inputs[v], labels[v], grads ? &g : nullptr);
      if (!grads) continue;
      if (grads->empty()) {
        *grads = std::move(g);
      } else {
        add_into(*grads, g);
      }
    }
    return total;
  };
  return gradcheck_fn(model.trainable(), loss, SplitMix64::derive(seed, 7, 0), coords, h);
}

}  // namespace sgmm
