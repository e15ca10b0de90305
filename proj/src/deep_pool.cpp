// SPDX-License-Identifier: Apache-2.0
#include "sgmm/deep_pool.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <string>

#include "sgmm/numeric.hpp"
#include "sgmm/simd.hpp"

namespace sgmm {
namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

const Matrix& centers(const PoolSpec& spec, const PoolParams& p) {
  return spec.uses_anchor() ? p.anchor : p.mu;
}

// Broadcast accessor for log_sigma in any of its four shapes.
double log_sigma_at(const Matrix& ls, std::size_t k, std::size_t d) {
  const std::size_t r = ls.rows() == 1 ? 0 : k;
  const std::size_t c = ls.cols() == 1 ? 0 : d;
  return ls(r, c);
}

void check_shapes(const PoolSpec& spec, const PoolParams& p) {
  const std::size_t k = spec.k;
  const std::size_t d = spec.dim;
  auto need = [](const Matrix& m, std::size_t r, std::size_t c, const char* what) {
    if (m.rows() != r || m.cols() != c) {
      throw std::invalid_argument(std::string("pool params: bad shape for ") + what);
    }
  };
  if (spec.variant == Variant::kDecoupled) {
    need(p.u, k, d, "u");
    need(p.b, 1, k, "b");
  } else {
    need(p.mu, k, d, "mu");
    const auto [r, c] = log_sigma_shape(spec.variant, k, d);
    need(p.log_sigma, r, c, "log_sigma");
    if (spec.variant != Variant::kUniformPriors) need(p.logit_w, 1, k, "logit_w");
  }
  if (spec.uses_anchor()) need(p.anchor, k, d, "anchor");
}

// Log-weights of the mixture (log-softmax of the logits).
std::vector<double> log_weights(const PoolSpec& spec, const PoolParams& p) {
  std::vector<double> lw(spec.k, -std::log(static_cast<double>(spec.k)));
  if (spec.variant == Variant::kUniformPriors) return lw;
  const auto logits = p.logit_w.row(0);
  const double lse = log_sum_exp(logits);
  for (std::size_t k = 0; k < spec.k; ++k) lw[k] = logits[k] - lse;
  return lw;
}

Matrix log_scores(const PoolSpec& spec, const PoolParams& p, const Matrix& frames,
                  Matrix* inv_var_out) {
  check_shapes(spec, p);
  if (frames.cols() != spec.dim) {
    throw std::invalid_argument("pool: frame dim " + std::to_string(frames.cols()) +
                                " != layer dim " + std::to_string(spec.dim));
  }
  const std::size_t t_count = frames.rows();
  const std::size_t k_count = spec.k;
  const std::size_t d_count = spec.dim;
  Matrix s(t_count, k_count);
  if (spec.variant == Variant::kDecoupled) {
    for (std::size_t t = 0; t < t_count; ++t) {
      for (std::size_t k = 0; k < k_count; ++k) {
        s(t, k) = simd::dot(p.u.row(k), frames.row(t)) + p.b(0, k);
      }
    }
    return s;
  }
  const auto lw = log_weights(spec, p);
  Matrix inv_var(k_count, d_count);
  std::vector<double> log_norm(k_count);
  for (std::size_t k = 0; k < k_count; ++k) {
    double log_det_half = 0.0;
    for (std::size_t d = 0; d < d_count; ++d) {
      const double ls = log_sigma_at(p.log_sigma, k, d);
      log_det_half += ls;
      inv_var(k, d) = std::exp(-2.0 * ls);
    }
    log_norm[k] = lw[k] - 0.5 * d_count * kLog2Pi - log_det_half;
  }
  for (std::size_t t = 0; t < t_count; ++t) {
    for (std::size_t k = 0; k < k_count; ++k) {
      s(t, k) = log_norm[k] -
                0.5 * simd::weighted_sq_dist(frames.row(t), p.mu.row(k), inv_var.row(k));
    }
  }
  if (inv_var_out) *inv_var_out = std::move(inv_var);
  return s;
}

}  // namespace

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::kDecoupled:
      return "decoupled";
    case Variant::kUniformPriors:
      return "uniform-priors";
    case Variant::kSharedSpherical:
      return "shared-spherical";
    case Variant::kSpherical:
      return "spherical";
    case Variant::kSharedDiagonal:
      return "shared-diagonal";
    case Variant::kDiagonal:
      return "diagonal";
  }
  return "unknown";
}

std::optional<Variant> parse_variant(std::string_view s) {
  for (auto v : kAllVariants) {
    if (to_string(v) == s) return v;
  }
  return std::nullopt;
}

bool is_coupled(Variant v) { return v != Variant::kDecoupled; }

std::string_view to_string(CodeKind c) { return c == CodeKind::kVlad ? "vlad" : "dsgmm"; }

std::vector<ParamRef> PoolParams::refs() {
  std::vector<ParamRef> out;
  auto add = [&](const char* name, Matrix& m) {
    if (!m.empty()) out.push_back({std::string("pool.") + name, &m});
  };
  add("u", u);
  add("b", b);
  add("logit_w", logit_w);
  add("mu", mu);
  add("log_sigma", log_sigma);
  add("anchor", anchor);
  return out;
}

std::vector<ConstParamRef> PoolParams::refs() const {
  std::vector<ConstParamRef> out;
  for (auto& r : const_cast<PoolParams*>(this)->refs()) out.push_back({r.name, r.value});
  return out;
}

std::pair<std::size_t, std::size_t> log_sigma_shape(Variant v, std::size_t k, std::size_t d) {
  switch (v) {
    case Variant::kUniformPriors:
    case Variant::kSharedSpherical:
      return {1, 1};
    case Variant::kSpherical:
      return {k, 1};
    case Variant::kSharedDiagonal:
      return {1, d};
    case Variant::kDiagonal:
      return {k, d};
    case Variant::kDecoupled:
      break;
  }
  return {0, 0};
}

PoolParams make_pool_params(const PoolSpec& spec) {
  PoolParams p;
  if (spec.variant == Variant::kDecoupled) {
    p.u.resize(spec.k, spec.dim);
    p.b.resize(1, spec.k);
  } else {
    p.mu.resize(spec.k, spec.dim);
    const auto [r, c] = log_sigma_shape(spec.variant, spec.k, spec.dim);
    p.log_sigma.resize(r, c);
    if (spec.variant != Variant::kUniformPriors) p.logit_w.resize(1, spec.k);
  }
  if (spec.uses_anchor()) p.anchor.resize(spec.k, spec.dim);
  return p;
}

PoolParams random_pool_params(const PoolSpec& spec, SplitMix64& rng, double scale) {
  PoolParams p = make_pool_params(spec);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(spec.dim));
  for (double& v : p.u.flat()) v = rng.normal(0.0, scale * inv_sqrt_d);
  for (double& v : p.b.flat()) v = rng.normal(0.0, 0.5);
  for (double& v : p.logit_w.flat()) v = rng.normal(0.0, 0.5);
  for (double& v : p.mu.flat()) v = rng.normal(0.0, scale);
  for (double& v : p.log_sigma.flat()) v = std::log(scale) + rng.uniform(-0.3, 0.3);
  for (double& v : p.anchor.flat()) v = rng.normal(0.0, scale);
  return p;
}

std::vector<double> mixture_weights(const PoolSpec& spec, const PoolParams& p) {
  auto lw = log_weights(spec, p);
  for (double& v : lw) v = std::exp(v);
  return lw;
}

Matrix expanded_variances(const PoolSpec& spec, const PoolParams& p) {
  Matrix v(spec.k, spec.dim);
  for (std::size_t k = 0; k < spec.k; ++k) {
    for (std::size_t d = 0; d < spec.dim; ++d) v(k, d) = std::exp(2.0 * log_sigma_at(p.log_sigma, k, d));
  }
  return v;
}

Matrix assign(const PoolSpec& spec, const PoolParams& p, const Matrix& frames) {
  Matrix post = log_scores(spec, p, frames, nullptr);
  for (std::size_t t = 0; t < post.rows(); ++t) softmax_inplace(post.row(t));
  return post;
}

PoolForward forward(const PoolSpec& spec, const PoolParams& p, const Matrix& frames) {
  if (!(spec.gamma >= 0.0)) throw std::invalid_argument("pool: gamma must be non-negative");
  const std::size_t k_count = spec.k;
  const std::size_t d_count = spec.dim;
  PoolForward out;
  PoolCache& c = out.cache;
  c.frames = frames;
  c.post = assign(spec, p, frames);
  c.n.assign(k_count, 0.0);
  c.sx.resize(k_count, d_count);
  for (std::size_t t = 0; t < frames.rows(); ++t) {
    for (std::size_t k = 0; k < k_count; ++k) {
      const double g = c.post(t, k);
      c.n[k] += g;
      simd::axpy(g, frames.row(t), c.sx.row(k));
    }
  }

  const Matrix& ctr = centers(spec, p);
  c.raw.resize(k_count, d_count);
  for (std::size_t k = 0; k < k_count; ++k) {
    auto row = c.raw.row(k);
    if (spec.code == CodeKind::kVlad) {
      for (std::size_t d = 0; d < d_count; ++d) row[d] = c.sx(k, d) - c.n[k] * ctr(k, d);
      continue;
    }
    const double denom = c.n[k] + spec.gamma;
    if (denom > 0.0) {
      for (std::size_t d = 0; d < d_count; ++d) {
        row[d] = (c.sx(k, d) + spec.gamma * ctr(k, d)) / denom;
      }
    } else {
      for (std::size_t d = 0; d < d_count; ++d) row[d] = ctr(k, d);
    }
  }

  c.intra = c.raw;
  c.row_norms.assign(k_count, 0.0);
  if (spec.intra_norm) {
    for (std::size_t k = 0; k < k_count; ++k) {
      auto row = c.intra.row(k);
      c.row_norms[k] = std::sqrt(simd::dot(row, row));
      if (c.row_norms[k] > 0.0) {
        for (double& v : row) v /= c.row_norms[k];
      }
    }
  }
  out.code = c.intra;
  if (spec.final_norm) {
    auto all = out.code.flat();
    c.total_norm = std::sqrt(simd::dot(all, all));
    if (c.total_norm > 0.0) {
      for (double& v : all) v /= c.total_norm;
    }
  }
  return out;
}

PoolGradients backward(const PoolSpec& spec, const PoolParams& p, const PoolCache& c,
                       const Matrix& upstream) {
  check_shapes(spec, p);
  const std::size_t k_count = spec.k;
  const std::size_t d_count = spec.dim;
  const std::size_t t_count = c.frames.rows();
  if (c.post.rows() != t_count || c.post.cols() != k_count || c.raw.rows() != k_count ||
      c.raw.cols() != d_count) {
    throw std::invalid_argument("pool backward: missing or mismatched forward cache");
  }
  if (upstream.rows() != k_count || upstream.cols() != d_count) {
    throw std::invalid_argument("pool backward: upstream gradient must be K x D");
  }

  // Through the normalizations, back to the raw code.
  Matrix g = upstream;
  if (spec.final_norm) {
    if (c.total_norm > 0.0) {
      Matrix z = c.intra;
      for (double& v : z.flat()) v /= c.total_norm;
      const double zg = simd::dot(z.flat(), g.flat());
      auto gf = g.flat();
      auto zf = z.flat();
      for (std::size_t i = 0; i < gf.size(); ++i) gf[i] = (gf[i] - zf[i] * zg) / c.total_norm;
    } else {
      g.fill(0.0);
    }
  }
  if (spec.intra_norm) {
    for (std::size_t k = 0; k < k_count; ++k) {
      auto gr = g.row(k);
      const double nrm = c.row_norms[k];
      if (!(nrm > 0.0)) {
        std::fill(gr.begin(), gr.end(), 0.0);
        continue;
      }
      const auto r = c.intra.row(k);
      const double rg = simd::dot(r, gr);
      for (std::size_t d = 0; d < d_count; ++d) gr[d] = (gr[d] - r[d] * rg) / nrm;
    }
  }

  // Raw code -> (S_x, n, centers).
  const Matrix& ctr = centers(spec, p);
  Matrix dsx(k_count, d_count);
  std::vector<double> dn(k_count, 0.0);
  Matrix dctr(k_count, d_count);
  for (std::size_t k = 0; k < k_count; ++k) {
    const auto gk = g.row(k);
    if (spec.code == CodeKind::kVlad) {
      std::copy(gk.begin(), gk.end(), dsx.row(k).begin());
      dn[k] = -simd::dot(gk, ctr.row(k));
      simd::axpy(-c.n[k], gk, dctr.row(k));
      continue;
    }
    const double denom = c.n[k] + spec.gamma;
    if (denom > 0.0) {
      simd::axpy(1.0 / denom, gk, dsx.row(k));
      dn[k] = -simd::dot(gk, c.raw.row(k)) / denom;
      simd::axpy(spec.gamma / denom, gk, dctr.row(k));
    } else {
      std::copy(gk.begin(), gk.end(), dctr.row(k).begin());
    }
  }

  PoolGradients out;
  out.params = make_pool_params(spec);
  out.frames.resize(t_count, d_count);
  Matrix ds(t_count, k_count);  // dL/d(log-score)
  std::vector<double> dpost(k_count);
  for (std::size_t t = 0; t < t_count; ++t) {
    const auto x = c.frames.row(t);
    double mean = 0.0;
    for (std::size_t k = 0; k < k_count; ++k) {
      dpost[k] = dn[k] + simd::dot(dsx.row(k), x);
      mean += c.post(t, k) * dpost[k];
      simd::axpy(c.post(t, k), dsx.row(k), out.frames.row(t));
    }
    for (std::size_t k = 0; k < k_count; ++k) ds(t, k) = c.post(t, k) * (dpost[k] - mean);
  }

  if (spec.variant == Variant::kDecoupled) {
    for (std::size_t t = 0; t < t_count; ++t) {
      const auto x = c.frames.row(t);
      for (std::size_t k = 0; k < k_count; ++k) {
        const double s = ds(t, k);
        simd::axpy(s, x, out.params.u.row(k));
        out.params.b(0, k) += s;
        simd::axpy(s, p.u.row(k), out.frames.row(t));
      }
    }
  } else {
    Matrix inv_var(k_count, d_count);
    for (std::size_t k = 0; k < k_count; ++k) {
      for (std::size_t d = 0; d < d_count; ++d) {
        inv_var(k, d) = std::exp(-2.0 * log_sigma_at(p.log_sigma, k, d));
      }
    }
    std::vector<double> dlogw(k_count, 0.0);
    Matrix dls(k_count, d_count);  // gradient w.r.t. the expanded log-scales
    std::vector<double> scaled(d_count);
    for (std::size_t t = 0; t < t_count; ++t) {
      const auto x = c.frames.row(t);
      auto dx = out.frames.row(t);
      for (std::size_t k = 0; k < k_count; ++k) {
        const double s = ds(t, k);
        if (s == 0.0) continue;
        dlogw[k] += s;
        const auto m = p.mu.row(k);
        const auto iv = inv_var.row(k);
        auto dmu = out.params.mu.row(k);
        auto dl = dls.row(k);
        for (std::size_t d = 0; d < d_count; ++d) {
          const double diff = x[d] - m[d];
          const double z = diff * iv[d];
          dmu[d] += s * z;
          dx[d] -= s * z;
          dl[d] += s * (diff * z - 1.0);
        }
      }
    }
    if (spec.variant != Variant::kUniformPriors) {
      const auto w = mixture_weights(spec, p);
      double total = 0.0;
      for (double v : dlogw) total += v;
      for (std::size_t k = 0; k < k_count; ++k) out.params.logit_w(0, k) = dlogw[k] - w[k] * total;
    }
    Matrix& gls = out.params.log_sigma;
    for (std::size_t k = 0; k < k_count; ++k) {
      for (std::size_t d = 0; d < d_count; ++d) {
        gls(gls.rows() == 1 ? 0 : k, gls.cols() == 1 ? 0 : d) += dls(k, d);
      }
    }
  }

  if (spec.uses_anchor()) {
    out.params.anchor = std::move(dctr);
  } else {
    auto dm = out.params.mu.flat();
    auto dc = dctr.flat();
    for (std::size_t i = 0; i < dm.size(); ++i) dm[i] += dc[i];
  }
  return out;
}

PoolParams init_from_ubm(const GmmModel& ubm, const PoolSpec& spec) {
  if (ubm.num_components() != spec.k || ubm.dim() != spec.dim) {
    throw std::invalid_argument("init_from_ubm: UBM is " + std::to_string(ubm.num_components()) +
                                "x" + std::to_string(ubm.dim()) + ", layer expects " +
                                std::to_string(spec.k) + "x" + std::to_string(spec.dim));
  }
  const CovKind kind = ubm.cov_kind();
  PoolParams p = make_pool_params(spec);
  const std::size_t k_count = spec.k;
  const std::size_t d_count = spec.dim;

  if (spec.variant == Variant::kDecoupled) {
    if (kind != CovKind::kSharedFull && kind != CovKind::kSharedDiagonal &&
        kind != CovKind::kSharedSpherical) {
      throw std::invalid_argument(
          "init_from_ubm: decoupled assignment needs a covariance shared across components, got " +
          std::string(to_string(kind)));
    }
    using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    const Matrix sigma = ubm.component_covariance(0);
    const EMat s = Eigen::Map<const EMat>(sigma.data(), d_count, d_count);
    const EMat mu_t = Eigen::Map<const EMat>(ubm.means().data(), k_count, d_count).transpose();
    Eigen::LLT<EMat> llt(s);
    const EMat u = llt.solve(mu_t).transpose();  // K x D, rows Sigma^-1 mu_k
    for (std::size_t k = 0; k < k_count; ++k) {
      for (std::size_t d = 0; d < d_count; ++d) p.u(k, d) = u(k, d);
      p.b(0, k) = std::log(ubm.weights()[k]) - 0.5 * simd::dot(ubm.means().row(k), p.u.row(k));
    }
  } else {
    bool ok = false;
    switch (spec.variant) {
      case Variant::kUniformPriors:
      case Variant::kSharedSpherical:
        ok = kind == CovKind::kSharedSpherical;
        break;
      case Variant::kSpherical:
        ok = kind == CovKind::kSharedSpherical || kind == CovKind::kSpherical;
        break;
      case Variant::kSharedDiagonal:
        ok = kind == CovKind::kSharedSpherical || kind == CovKind::kSharedDiagonal;
        break;
      case Variant::kDiagonal:
        ok = kind != CovKind::kSharedFull;
        break;
      case Variant::kDecoupled:
        break;
    }
    if (!ok) {
      throw std::invalid_argument("init_from_ubm: covariance kind " + std::string(to_string(kind)) +
                                  " cannot be represented by variant " +
                                  std::string(to_string(spec.variant)));
    }
    p.mu = ubm.means();
    for (std::size_t r = 0; r < p.log_sigma.rows(); ++r) {
      for (std::size_t cc = 0; cc < p.log_sigma.cols(); ++cc) {
        p.log_sigma(r, cc) = 0.5 * std::log(ubm.variance(r, cc));
      }
    }
    if (spec.variant != Variant::kUniformPriors) {
      for (std::size_t k = 0; k < k_count; ++k) p.logit_w(0, k) = std::log(ubm.weights()[k]);
    }
  }
  if (spec.uses_anchor()) p.anchor = ubm.means();
  return p;
}

}  // namespace sgmm
