// SPDX-License-Identifier: Apache-2.0
#include "sgmm/reco.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>
#include <string>

#include "sgmm/binary_io.hpp"
#include "sgmm/numeric.hpp"
#include "sgmm/simd.hpp"
#include "sgmm/stats_pool.hpp"

namespace sgmm {
namespace {

// log(1 + e^z), overflow-safe
double softplus(double z) { return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

double logloss(double z, int y) { return softplus(z) - (y ? z : 0.0); }

}  // namespace

std::vector<ParamRef> EmbedNet::refs() {
  return {{"embed.w1", &w1}, {"embed.b1", &b1}, {"embed.w2", &w2}, {"embed.b2", &b2}};
}

std::vector<ConstParamRef> EmbedNet::refs() const {
  return {{"embed.w1", &w1}, {"embed.b1", &b1}, {"embed.w2", &w2}, {"embed.b2", &b2}};
}

EmbedNet make_embed(const EmbedSpec& s) {
  if (s.input_dim == 0 || s.hidden == 0 || s.out == 0) {
    throw std::invalid_argument("embed: dimensions must be positive");
  }
  EmbedNet n;
  n.w1.resize(s.hidden, s.input_dim);
  n.b1.resize(1, s.hidden);
  n.w2.resize(s.out, s.hidden);
  n.b2.resize(1, s.out);
  return n;
}

EmbedNet random_embed(const EmbedSpec& s, SplitMix64& rng) {
  EmbedNet n = make_embed(s);
  const double sd1 = std::sqrt(2.0 / static_cast<double>(s.input_dim));
  const double sd2 = std::sqrt(1.0 / static_cast<double>(s.hidden));
  for (double& v : n.w1.flat()) v = rng.normal(0.0, sd1);
  for (double& v : n.w2.flat()) v = rng.normal(0.0, sd2);
  return n;
}

EmbedCache embed_forward(const EmbedSpec& s, const EmbedNet& net, std::span<const double> x) {
  if (x.size() != s.input_dim) {
    throw std::invalid_argument("embed: input length " + std::to_string(x.size()) +
                                " != " + std::to_string(s.input_dim));
  }
  EmbedCache c;
  c.x.assign(x.begin(), x.end());
  c.pre.resize(s.hidden);
  c.hidden.resize(s.hidden);
  for (std::size_t j = 0; j < s.hidden; ++j) {
    c.pre[j] = simd::dot(net.w1.row(j), c.x) + net.b1(0, j);
    c.hidden[j] = std::max(c.pre[j], 0.0);
  }
  c.z.resize(s.out);
  for (std::size_t e = 0; e < s.out; ++e) c.z[e] = simd::dot(net.w2.row(e), c.hidden) + net.b2(0, e);
  c.norm = std::sqrt(simd::dot(c.z, c.z));
  c.out.assign(s.out, 0.0);
  if (c.norm > 0.0) {
    for (std::size_t e = 0; e < s.out; ++e) c.out[e] = c.z[e] / c.norm;
  } else {
    c.out[0] = 1.0;
  }
  return c;
}

EmbedGradients embed_backward(const EmbedSpec& s, const EmbedNet& net, const EmbedCache& c,
                              std::span<const double> dout) {
  if (dout.size() != s.out || c.z.size() != s.out) {
    throw std::invalid_argument("embed backward: shape mismatch");
  }
  EmbedGradients g;
  g.params = make_embed(s);
  g.input.assign(s.input_dim, 0.0);
  if (!(c.norm > 0.0)) return g;
  const double od = simd::dot(c.out, dout);
  std::vector<double> dz(s.out);
  for (std::size_t e = 0; e < s.out; ++e) dz[e] = (dout[e] - c.out[e] * od) / c.norm;
  std::vector<double> dh(s.hidden, 0.0);
  for (std::size_t e = 0; e < s.out; ++e) {
    simd::axpy(dz[e], c.hidden, g.params.w2.row(e));
    g.params.b2(0, e) = dz[e];
    simd::axpy(dz[e], net.w2.row(e), dh);
  }
  for (std::size_t j = 0; j < s.hidden; ++j) {
    if (!(c.pre[j] > 0.0)) continue;
    simd::axpy(dh[j], c.x, g.params.w1.row(j));
    g.params.b1(0, j) = dh[j];
    simd::axpy(dh[j], net.w1.row(j), g.input);
  }
  return g;
}

std::size_t RecoSpec::code_dim() const {
  return pool == PoolKind::kAvg ? deep.dim : deep.k * deep.dim;
}

std::vector<ParamRef> RecoModel::params() {
  std::vector<ParamRef> out;
  if (spec.pool == PoolKind::kDeep) out = pool.refs();
  for (auto& r : net.refs()) out.push_back(r);
  return out;
}

std::vector<ConstParamRef> RecoModel::params() const {
  std::vector<ConstParamRef> out;
  for (auto& r : const_cast<RecoModel*>(this)->params()) out.push_back({r.name, r.value});
  return out;
}

std::vector<ParamRef> RecoModel::trainable() {
  std::vector<ParamRef> out;
  if (spec.pool == PoolKind::kDeep && !spec.freeze_pool) out = pool.refs();
  for (auto& r : net.refs()) out.push_back(r);
  return out;
}

RecoModel make_reco_model(const RecoSpec& spec, SplitMix64& rng, const PoolParams* pool) {
  RecoModel m;
  m.spec = spec;
  m.spec.embed.input_dim = spec.code_dim();
  if (spec.pool == PoolKind::kDeep) m.pool = pool ? *pool : random_pool_params(spec.deep, rng);
  m.net = random_embed(m.spec.embed, rng);
  return m;
}

Meta to_meta(const RecoSpec& s) {
  ModelSpec ms;
  ms.pool = s.pool;
  ms.deep = s.deep;
  ms.freeze_pool = s.freeze_pool;
  ms.num_classes = 1;
  Meta m = to_meta(ms);
  m["model.kind"] = "reco";
  m["embed.hidden"] = std::to_string(s.embed.hidden);
  m["embed.out"] = std::to_string(s.embed.out);
  return m;
}

RecoSpec reco_spec_from_meta(const Meta& meta) {
  auto kind = meta.find("model.kind");
  if (kind == meta.end() || kind->second != "reco") {
    throw DataError("checkpoint does not hold a recommendation model");
  }
  const ModelSpec ms = model_spec_from_meta(meta);
  RecoSpec s;
  s.pool = ms.pool;
  s.deep = ms.deep;
  s.freeze_pool = ms.freeze_pool;
  try {
    s.embed.hidden = std::stoul(meta.at("embed.hidden"));
    s.embed.out = std::stoul(meta.at("embed.out"));
  } catch (const std::exception&) {
    throw DataError("checkpoint meta: bad embedding dimensions");
  }
  s.embed.input_dim = s.code_dim();
  return s;
}

Checkpoint make_reco_checkpoint(const RecoModel& m, std::uint64_t seed, std::uint64_t step) {
  Checkpoint c;
  c.meta = to_meta(m.spec);
  c.seed = seed;
  c.step = step;
  c.params = snapshot(m.params());
  return c;
}

RecoModel reco_model_from_checkpoint(const Checkpoint& ckpt) {
  RecoModel m;
  m.spec = reco_spec_from_meta(ckpt.meta);
  if (m.spec.pool == PoolKind::kDeep) m.pool = make_pool_params(m.spec.deep);
  m.net = make_embed(m.spec.embed);
  restore(ckpt.params, m.params());
  return m;
}

namespace {

std::vector<double> code_of(const RecoModel& m, const Matrix& frames, PoolForward* pf) {
  if (m.spec.pool == PoolKind::kAvg) {
    const VideoCode c = avg_pool(frames);
    return {c.values.flat().begin(), c.values.flat().end()};
  }
  *pf = forward(m.spec.deep, m.pool, frames);
  return {pf->code.flat().begin(), pf->code.flat().end()};
}

}  // namespace

std::vector<double> embed_video(const RecoModel& m, const Matrix& frames) {
  PoolForward pf;
  return embed_forward(m.spec.embed, m.net, code_of(m, frames, &pf)).out;
}

double triplet_term(std::span<const double> a, std::span<const double> p,
                    std::span<const double> n, double alpha) {
  return std::max(simd::sq_dist(a, p) - simd::sq_dist(a, n) + alpha, 0.0);
}

double triplet_loss(const RecoModel& m, const std::vector<Matrix>& frames,
                    std::span<const Triplet> triplets, double alpha,
                    std::vector<Matrix>* grads) {
  if (!(alpha >= 0.0)) throw std::invalid_argument("triplet_loss: alpha must be >= 0");
  std::set<std::size_t> used;
  for (const auto& t : triplets) {
    for (std::size_t v : {t.anchor, t.positive, t.negative}) {
      if (v >= frames.size()) throw std::invalid_argument("triplet_loss: video index out of range");
      used.insert(v);
    }
  }
  struct Slot {
    PoolForward pool;
    EmbedCache embed;
    std::vector<double> dout;
  };
  std::map<std::size_t, Slot> slots;
  for (std::size_t v : used) {
    Slot s;
    s.embed = embed_forward(m.spec.embed, m.net, code_of(m, frames[v], &s.pool));
    s.dout.assign(m.spec.embed.out, 0.0);
    slots.emplace(v, std::move(s));
  }

  double loss = 0.0;
  for (const auto& t : triplets) {
    Slot& a = slots.at(t.anchor);
    Slot& p = slots.at(t.positive);
    Slot& n = slots.at(t.negative);
    const double term = simd::sq_dist(a.embed.out, p.embed.out) -
                        simd::sq_dist(a.embed.out, n.embed.out) + alpha;
    if (!(term > 0.0)) continue;
    loss += term;
    if (!grads) continue;
    for (std::size_t e = 0; e < a.dout.size(); ++e) {
      const double ae = a.embed.out[e], pe = p.embed.out[e], ne = n.embed.out[e];
      a.dout[e] += 2.0 * (ne - pe);
      p.dout[e] -= 2.0 * (ae - pe);
      n.dout[e] += 2.0 * (ae - ne);
    }
  }
  if (!grads) return loss;

  RecoModel& mm = const_cast<RecoModel&>(m);
  *grads = zeros_like(mm.trainable());
  const bool train_pool = m.spec.pool == PoolKind::kDeep && !m.spec.freeze_pool;
  for (auto& [v, s] : slots) {
    EmbedGradients eg = embed_backward(m.spec.embed, m.net, s.embed, s.dout);
    std::vector<Matrix> g;
    if (train_pool) {
      Matrix up(m.spec.deep.k, m.spec.deep.dim);
      std::copy(eg.input.begin(), eg.input.end(), up.flat().begin());
      PoolGradients pg = backward(m.spec.deep, m.pool, s.pool.cache, up);
      for (auto& r : pg.params.refs()) g.push_back(std::move(*r.value));
    }
    for (auto& r : eg.params.refs()) g.push_back(std::move(*r.value));
    add_into(*grads, g);
  }
  return loss;
}

SimScores sim_scores(std::span<const std::vector<double>> history,
                     std::span<const double> candidate) {
  if (history.empty()) throw std::invalid_argument("sim_scores: empty history");
  SimScores s;
  s.max = -std::numeric_limits<double>::infinity();
  for (const auto& h : history) {
    if (h.size() != candidate.size()) throw std::invalid_argument("sim_scores: dimension mismatch");
    const double c = simd::dot(h, candidate);
    s.avg += c;
    s.max = std::max(s.max, c);
  }
  s.avg /= static_cast<double>(history.size());
  // The mean of values can round a hair above their maximum.
  s.avg = std::min(s.avg, s.max);
  return s;
}

SimScores sim_scores(const RecoModel& m, const std::vector<Matrix>& history_frames,
                     const Matrix& candidate_frames) {
  std::vector<std::vector<double>> hist;
  for (const auto& f : history_frames) hist.push_back(embed_video(m, f));
  return sim_scores(hist, embed_video(m, candidate_frames));
}

// ---------------------------------------------------------------- GLMix

namespace {

struct UserBlock {
  std::uint32_t user;
  std::vector<std::size_t> rows;
};

double user_offset(const GlmixUser& u, std::span<const double> f) {
  return u.intercept + (f.empty() ? 0.0 : simd::dot(u.beta, f));
}

}  // namespace

double glmix_penalized_loss(const GlmixModel& m, std::span<const GlmixObs> obs) {
  double loss = 0.0;
  for (const auto& o : obs) {
    auto it = m.users.find(o.user);
    const double off = it == m.users.end() ? 0.0 : user_offset(it->second, o.features);
    loss += logloss(m.beta0 + off, o.label);
  }
  for (const auto& [id, u] : m.users) {
    double sq = u.intercept * u.intercept;
    for (double b : u.beta) sq += b * b;
    loss += 0.5 * m.prior * sq;
  }
  return loss;
}

double glmix_predict(const GlmixModel& m, std::uint32_t user, std::span<const double> features) {
  if (features.size() != m.dim) throw std::invalid_argument("glmix_predict: feature dimension mismatch");
  auto it = m.users.find(user);
  const double off = it == m.users.end() ? 0.0 : user_offset(it->second, features);
  return sigmoid(m.beta0 + off);
}

GlmixModel glmix_fit(std::span<const GlmixObs> obs, const GlmixConfig& cfg) {
  if (obs.empty()) throw std::invalid_argument("glmix_fit: no observations");
  if (!(cfg.prior > 0.0)) throw std::invalid_argument("glmix_fit: prior must be positive");
  GlmixModel m;
  m.prior = cfg.prior;
  m.dim = obs[0].features.size();
  std::map<std::uint32_t, UserBlock> blocks;
  for (std::size_t i = 0; i < obs.size(); ++i) {
    if (obs[i].features.size() != m.dim) {
      throw std::invalid_argument("glmix_fit: observations have different feature lengths");
    }
    auto& b = blocks[obs[i].user];
    b.user = obs[i].user;
    b.rows.push_back(i);
  }
  for (const auto& [id, b] : blocks) m.users[id] = GlmixUser{0.0, std::vector<double>(m.dim, 0.0)};

  const std::size_t p = m.dim + 1;
  std::vector<double> offset(obs.size(), 0.0);  // user part of each logit
  double prev = glmix_penalized_loss(m, obs);

  for (std::size_t round = 0; round < cfg.max_rounds; ++round) {
    // (a) global intercept. The per-user intercepts are collinear with
    // beta0 up to the prior, so the step profiles them out: beta0 moves by
    // the Newton step of the profiled objective and every user block moves
    // along its implied response -H_uu^-1 h_u0.
    {
      double g0 = 0.0, h00 = 0.0;
      std::map<std::uint32_t, Eigen::VectorXd> shift;
      for (auto& [id, b] : blocks) {
        Eigen::MatrixXd huu = cfg.prior * Eigen::MatrixXd::Identity(p, p);
        Eigen::VectorXd hu0 = Eigen::VectorXd::Zero(p);
        Eigen::VectorXd xi(p);
        for (std::size_t i : b.rows) {
          xi[0] = 1.0;
          for (std::size_t d = 0; d < m.dim; ++d) xi[d + 1] = obs[i].features[d];
          const double pr = sigmoid(m.beta0 + offset[i]);
          const double w = pr * (1.0 - pr);
          g0 += pr - obs[i].label;
          h00 += w;
          hu0 += w * xi;
          huu.selfadjointView<Eigen::Lower>().rankUpdate(xi, w);
        }
        huu = huu.selfadjointView<Eigen::Lower>();
        Eigen::VectorXd resp = -Eigen::LLT<Eigen::MatrixXd>(huu).solve(hu0);
        h00 += hu0.dot(resp);
        shift.emplace(id, std::move(resp));
      }
      if (h00 > 0.0 && g0 != 0.0) {
        auto moved = [&](double step) {
          GlmixModel t = m;
          t.beta0 += step;
          for (auto& [id, r] : shift) {
            GlmixUser& u = t.users[id];
            u.intercept += step * r[0];
            for (std::size_t d = 0; d < m.dim; ++d) u.beta[d] += step * r[d + 1];
          }
          return t;
        };
        const double base = glmix_penalized_loss(m, obs);
        double step = -g0 / h00;
        for (int tries = 0; tries < 60; ++tries, step *= 0.5) {
          GlmixModel t = moved(step);
          if (glmix_penalized_loss(t, obs) <= base) {
            m.beta0 = t.beta0;
            m.users = std::move(t.users);
            for (const auto& [id, b] : blocks) {
              for (std::size_t i : b.rows) offset[i] = user_offset(m.users[id], obs[i].features);
            }
            break;
          }
        }
      }
    }
    // (b) per-user blocks
    for (auto& [id, b] : blocks) {
      GlmixUser& u = m.users[id];
      auto block_loss = [&](const Eigen::VectorXd& theta) {
        double l = 0.5 * cfg.prior * theta.squaredNorm();
        for (std::size_t i : b.rows) {
          double z = m.beta0 + theta[0];
          for (std::size_t d = 0; d < m.dim; ++d) z += theta[d + 1] * obs[i].features[d];
          l += logloss(z, obs[i].label);
        }
        return l;
      };
      Eigen::VectorXd theta(p);
      theta[0] = u.intercept;
      for (std::size_t d = 0; d < m.dim; ++d) theta[d + 1] = u.beta[d];
      Eigen::VectorXd grad = cfg.prior * theta;
      Eigen::MatrixXd hess = cfg.prior * Eigen::MatrixXd::Identity(p, p);
      Eigen::VectorXd xi(p);
      for (std::size_t i : b.rows) {
        xi[0] = 1.0;
        for (std::size_t d = 0; d < m.dim; ++d) xi[d + 1] = obs[i].features[d];
        const double pr = sigmoid(m.beta0 + offset[i]);
        grad += (pr - obs[i].label) * xi;
        hess.selfadjointView<Eigen::Lower>().rankUpdate(xi, pr * (1.0 - pr));
      }
      hess = hess.selfadjointView<Eigen::Lower>();
      Eigen::VectorXd step = -Eigen::LLT<Eigen::MatrixXd>(hess).solve(grad);
      const double base = block_loss(theta);
      for (int tries = 0; tries < 60; ++tries, step *= 0.5) {
        const Eigen::VectorXd cand = theta + step;
        if (block_loss(cand) <= base) {
          theta = cand;
          break;
        }
      }
      u.intercept = theta[0];
      for (std::size_t d = 0; d < m.dim; ++d) u.beta[d] = theta[d + 1];
      for (std::size_t i : b.rows) offset[i] = user_offset(u, obs[i].features);
    }
    const double cur = glmix_penalized_loss(m, obs);
    m.loss_trace.push_back(cur);
    m.rounds = round + 1;
    const double rel = std::abs(prev - cur) / std::max(std::abs(prev), 1e-300);
    prev = cur;
    if (rel < cfg.rel_tol) break;
  }
  return m;
}

}  // namespace sgmm
