// SPDX-License-Identifier: Apache-2.0
#include "sgmm/gmm.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <limits>
#include "json.hpp"
#include <numbers>
#include <numeric>
#include <stdexcept>

#include "sgmm/binary_io.hpp"
#include "sgmm/numeric.hpp"
#include "sgmm/rng.hpp"
#include "sgmm/simd.hpp"

namespace sgmm {
namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;  // ln(2 pi)

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

EMat to_eigen(const Matrix& m) {
  return Eigen::Map<const EMat>(m.data(), static_cast<Eigen::Index>(m.rows()),
                                static_cast<Eigen::Index>(m.cols()));
}

Matrix from_eigen(const EMat& e) {
  Matrix m(static_cast<std::size_t>(e.rows()), static_cast<std::size_t>(e.cols()));
  Eigen::Map<EMat>(m.data(), e.rows(), e.cols()) = e;
  return m;
}

std::pair<std::size_t, std::size_t> cov_shape(CovKind kind, std::size_t k, std::size_t d) {
  switch (kind) {
    case CovKind::kSharedFull:
      return {d, d};
    case CovKind::kSharedSpherical:
      return {1, 1};
    case CovKind::kSpherical:
      return {k, 1};
    case CovKind::kSharedDiagonal:
      return {1, d};
    case CovKind::kDiagonal:
      return {k, d};
  }
  throw std::invalid_argument("unknown covariance kind");
}

// Clamp eigenvalues of a symmetric matrix from below. Leaves the matrix
// untouched when it already satisfies the floor.
void floor_eigenvalues(Matrix& sym, double floor) {
  EMat e = to_eigen(sym);
  e = 0.5 * (e + e.transpose());
  Eigen::SelfAdjointEigenSolver<EMat> eig(e);
  if (eig.eigenvalues().minCoeff() >= floor) {
    sym = from_eigen(e);
    return;
  }
  Eigen::VectorXd lam = eig.eigenvalues().cwiseMax(floor);
  EMat r = eig.eigenvectors() * lam.asDiagonal() * eig.eigenvectors().transpose();
  sym = from_eigen(0.5 * (r + r.transpose()));
}

}  // namespace

std::string_view to_string(CovKind kind) {
  switch (kind) {
    case CovKind::kSharedFull:
      return "shared-full";
    case CovKind::kSharedSpherical:
      return "shared-spherical";
    case CovKind::kSpherical:
      return "spherical";
    case CovKind::kSharedDiagonal:
      return "shared-diagonal";
    case CovKind::kDiagonal:
      return "diagonal";
  }
  return "unknown";
}

std::optional<CovKind> parse_cov_kind(std::string_view s) {
  for (auto k : {CovKind::kSharedFull, CovKind::kSharedSpherical, CovKind::kSpherical,
                 CovKind::kSharedDiagonal, CovKind::kDiagonal}) {
    if (to_string(k) == s) return k;
  }
  return std::nullopt;
}

GmmModel::GmmModel(std::vector<double> weights, Matrix means, CovarianceSpec cov)
    : weights_(std::move(weights)), means_(std::move(means)), cov_(std::move(cov)) {
  const std::size_t k = weights_.size();
  if (k == 0) throw std::invalid_argument("GMM needs at least one component");
  if (means_.rows() != k || means_.cols() == 0) {
    throw std::invalid_argument("GMM means must be K x D with D >= 1");
  }
  double s = 0.0;
  for (double w : weights_) {
    if (!(w > 0.0) || !std::isfinite(w)) throw std::invalid_argument("GMM weights must be positive");
    s += w;
  }
  if (std::abs(s - 1.0) > 1e-9) throw std::invalid_argument("GMM weights must sum to 1");
  for (double v : means_.flat()) {
    if (!std::isfinite(v)) throw std::invalid_argument("GMM means must be finite");
  }
  const auto [r, c] = cov_shape(cov_.kind, k, dim());
  if (cov_.values.rows() != r || cov_.values.cols() != c) {
    throw std::invalid_argument("covariance shape does not match kind " +
                                std::string(to_string(cov_.kind)));
  }
  prepare();
}

void GmmModel::prepare() {
  const std::size_t k_count = num_components();
  const std::size_t d_count = dim();
  log_norm_.assign(k_count, 0.0);
  if (cov_.kind == CovKind::kSharedFull) {
    const EMat sigma = to_eigen(cov_.values);
    if (!sigma.isApprox(sigma.transpose(), 1e-12)) {
      throw std::invalid_argument("shared full covariance must be symmetric");
    }
    Eigen::LLT<EMat> llt(sigma);
    if (llt.info() != Eigen::Success) {
      throw std::invalid_argument("shared full covariance is not positive definite");
    }
    const EMat l = llt.matrixL();
    double log_det = 0.0;
    for (Eigen::Index i = 0; i < l.rows(); ++i) log_det += 2.0 * std::log(l(i, i));
    chol_ = from_eigen(l);
    const EMat wm = l.triangularView<Eigen::Lower>().solve(to_eigen(means_).transpose());
    white_means_ = from_eigen(wm.transpose());
    for (std::size_t k = 0; k < k_count; ++k) {
      log_norm_[k] = std::log(weights_[k]) - 0.5 * (d_count * kLog2Pi + log_det);
    }
    return;
  }
  inv_var_.resize(k_count, d_count);
  for (std::size_t k = 0; k < k_count; ++k) {
    double log_det = 0.0;
    for (std::size_t d = 0; d < d_count; ++d) {
      const double v = variance(k, d);
      if (!(v > 0.0) || !std::isfinite(v)) {
        throw std::invalid_argument("covariance variances must be positive and finite");
      }
      inv_var_(k, d) = 1.0 / v;
      log_det += std::log(v);
    }
    log_norm_[k] = std::log(weights_[k]) - 0.5 * (d_count * kLog2Pi + log_det);
  }
}

double GmmModel::variance(std::size_t k, std::size_t d) const {
  switch (cov_.kind) {
    case CovKind::kSharedFull:
      return cov_.values(d, d);
    case CovKind::kSharedSpherical:
      return cov_.values(0, 0);
    case CovKind::kSpherical:
      return cov_.values(k, 0);
    case CovKind::kSharedDiagonal:
      return cov_.values(0, d);
    case CovKind::kDiagonal:
      return cov_.values(k, d);
  }
  return 0.0;
}

Matrix GmmModel::component_covariance(std::size_t k) const {
  if (cov_.kind == CovKind::kSharedFull) return cov_.values;
  Matrix s(dim(), dim());
  for (std::size_t d = 0; d < dim(); ++d) s(d, d) = variance(k, d);
  return s;
}

void GmmModel::log_joint(std::span<const double> x, std::span<double> out) const {
  const std::size_t k_count = num_components();
  if (x.size() != dim()) throw std::invalid_argument("GMM: input dimension mismatch");
  if (cov_.kind == CovKind::kSharedFull) {
    // whiten x once, then squared distances to the whitened means
    const std::size_t n = dim();
    std::vector<double> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      double s = x[i];
      for (std::size_t j = 0; j < i; ++j) s -= chol_(i, j) * y[j];
      y[i] = s / chol_(i, i);
    }
    for (std::size_t k = 0; k < k_count; ++k) {
      out[k] = log_norm_[k] - 0.5 * simd::sq_dist(y, white_means_.row(k));
    }
    return;
  }
  for (std::size_t k = 0; k < k_count; ++k) {
    out[k] = log_norm_[k] - 0.5 * simd::weighted_sq_dist(x, means_.row(k), inv_var_.row(k));
  }
}

void GmmModel::log_posterior(std::span<const double> x, std::span<double> out) const {
  for (double v : x) {
    if (!std::isfinite(v)) throw std::invalid_argument("log_posterior: non-finite input");
  }
  log_joint(x, out);
  const double lse = log_sum_exp(out);
  for (double& v : out) v -= lse;
}

std::vector<double> GmmModel::log_posterior(std::span<const double> x) const {
  std::vector<double> out(num_components());
  log_posterior(x, out);
  return out;
}

double GmmModel::log_density(std::span<const double> x) const {
  std::vector<double> lj(num_components());
  log_joint(x, lj);
  return log_sum_exp(lj);
}

double loglik(const GmmModel& model, const Matrix& frames) {
  ExactSum s;
  std::vector<double> lj(model.num_components());
  for (std::size_t t = 0; t < frames.rows(); ++t) {
    model.log_joint(frames.row(t), lj);
    s.add(log_sum_exp(lj));
  }
  return s.value();
}

// ---------------------------------------------------------------------------
// EM

namespace {

struct Responsibilities {
  Matrix resp;              // N x K
  std::vector<double> ll;   // per-frame log density
};

Responsibilities e_step(const GmmModel& model, const Matrix& x) {
  Responsibilities r{Matrix(x.rows(), model.num_components()), std::vector<double>(x.rows())};
  for (std::size_t t = 0; t < x.rows(); ++t) {
    auto row = r.resp.row(t);
    model.log_joint(x.row(t), row);
    r.ll[t] = softmax_inplace(row);
  }
  return r;
}

// Fills means/variances from responsibilities. `counts` receives n_k.
GmmModel m_step(const Matrix& x, const Matrix& resp, CovKind kind, double floor,
                std::vector<double>& counts) {
  const std::size_t n = x.rows();
  const std::size_t d_count = x.cols();
  const std::size_t k_count = resp.cols();
  counts.assign(k_count, 0.0);
  Matrix means(k_count, d_count);
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t k = 0; k < k_count; ++k) {
      const double g = resp(t, k);
      counts[k] += g;
      simd::axpy(g, x.row(t), means.row(k));
    }
  }
  for (std::size_t k = 0; k < k_count; ++k) {
    const double inv = counts[k] > 0.0 ? 1.0 / counts[k] : 0.0;
    for (double& v : means.row(k)) v *= inv;
  }
  const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
  std::vector<double> weights(k_count);
  for (std::size_t k = 0; k < k_count; ++k) weights[k] = std::max(counts[k], 1e-300) / total;
  const double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);
  for (double& w : weights) w /= wsum;

  CovarianceSpec cov{kind, {}};
  if (kind == CovKind::kSharedFull) {
    // sum_k sum_t g (x-mu_k)(x-mu_k)^T, accumulated around the global mean
    std::vector<double> gm(d_count, 0.0);
    for (std::size_t t = 0; t < n; ++t) simd::axpy(1.0, x.row(t), gm);
    for (double& v : gm) v /= static_cast<double>(n);
    EMat scatter = EMat::Zero(static_cast<Eigen::Index>(d_count), static_cast<Eigen::Index>(d_count));
    Eigen::VectorXd c(static_cast<Eigen::Index>(d_count));
    for (std::size_t t = 0; t < n; ++t) {
      for (std::size_t d = 0; d < d_count; ++d) c[static_cast<Eigen::Index>(d)] = x(t, d) - gm[d];
      scatter.selfadjointView<Eigen::Lower>().rankUpdate(c, 1.0);
    }
    for (std::size_t k = 0; k < k_count; ++k) {
      for (std::size_t d = 0; d < d_count; ++d) c[static_cast<Eigen::Index>(d)] = means(k, d) - gm[d];
      scatter.selfadjointView<Eigen::Lower>().rankUpdate(c, -counts[k]);
    }
    EMat full = scatter.selfadjointView<Eigen::Lower>();
    full /= static_cast<double>(n);
    cov.values = from_eigen(full);
    floor_eigenvalues(cov.values, floor);
    return GmmModel(std::move(weights), std::move(means), std::move(cov));
  }

  Matrix sq(k_count, d_count);  // sum_t g (x - mu_k)^2 per coordinate
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t k = 0; k < k_count; ++k) {
      const double g = resp(t, k);
      if (g == 0.0) continue;
      for (std::size_t d = 0; d < d_count; ++d) {
        const double diff = x(t, d) - means(k, d);
        sq(k, d) += g * diff * diff;
      }
    }
  }
  const auto safe = [](double num, double den) { return den > 0.0 ? num / den : 0.0; };
  switch (kind) {
    case CovKind::kDiagonal:
      cov.values.resize(k_count, d_count);
      for (std::size_t k = 0; k < k_count; ++k) {
        for (std::size_t d = 0; d < d_count; ++d) {
          cov.values(k, d) = std::max(safe(sq(k, d), counts[k]), floor);
        }
      }
      break;
    case CovKind::kSpherical:
      cov.values.resize(k_count, 1);
      for (std::size_t k = 0; k < k_count; ++k) {
        double s = 0.0;
        for (std::size_t d = 0; d < d_count; ++d) s += sq(k, d);
        cov.values(k, 0) = std::max(safe(s, counts[k] * d_count), floor);
      }
      break;
    case CovKind::kSharedDiagonal:
      cov.values.resize(1, d_count);
      for (std::size_t d = 0; d < d_count; ++d) {
        double s = 0.0;
        for (std::size_t k = 0; k < k_count; ++k) s += sq(k, d);
        cov.values(0, d) = std::max(s / static_cast<double>(n), floor);
      }
      break;
    case CovKind::kSharedSpherical: {
      cov.values.resize(1, 1);
      double s = 0.0;
      for (double v : sq.flat()) s += v;
      cov.values(0, 0) = std::max(s / static_cast<double>(n * d_count), floor);
      break;
    }
    case CovKind::kSharedFull:
      break;
  }
  return GmmModel(std::move(weights), std::move(means), std::move(cov));
}

// k-means++ seeding followed by Lloyd iterations; returns hard assignments.
std::vector<std::size_t> kmeans(const Matrix& x, std::size_t k_count, int iters, SplitMix64& rng) {
  const std::size_t n = x.rows();
  Matrix centers(k_count, x.cols());
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  std::size_t first = rng.below(n);
  std::copy(x.row(first).begin(), x.row(first).end(), centers.row(0).begin());
  for (std::size_t k = 1; k < k_count; ++k) {
    double total = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
      d2[t] = std::min(d2[t], simd::sq_dist(x.row(t), centers.row(k - 1)));
      total += d2[t];
    }
    std::size_t pick = 0;
    if (total > 0.0) {
      const double u = rng.uniform() * total;
      double c = 0.0;
      pick = n - 1;
      for (std::size_t t = 0; t < n; ++t) {
        c += d2[t];
        if (u < c) {
          pick = t;
          break;
        }
      }
    } else {
      pick = rng.below(n);
    }
    std::copy(x.row(pick).begin(), x.row(pick).end(), centers.row(k).begin());
  }

  std::vector<std::size_t> assign(n, 0);
  for (int it = 0; it <= iters; ++it) {
    std::vector<double> best(n);
    for (std::size_t t = 0; t < n; ++t) {
      double bd = std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < k_count; ++k) {
        const double dd = simd::sq_dist(x.row(t), centers.row(k));
        if (dd < bd) {
          bd = dd;
          assign[t] = k;
        }
      }
      best[t] = bd;
    }
    if (it == iters) break;
    std::vector<double> counts(k_count, 0.0);
    centers.fill(0.0);
    for (std::size_t t = 0; t < n; ++t) {
      counts[assign[t]] += 1.0;
      simd::axpy(1.0, x.row(t), centers.row(assign[t]));
    }
    for (std::size_t k = 0; k < k_count; ++k) {
      if (counts[k] > 0.0) {
        for (double& v : centers.row(k)) v /= counts[k];
        continue;
      }
      // empty cluster: move it onto the worst-served point
      const auto far = static_cast<std::size_t>(
          std::distance(best.begin(), std::max_element(best.begin(), best.end())));
      std::copy(x.row(far).begin(), x.row(far).end(), centers.row(k).begin());
      best[far] = 0.0;
    }
  }
  return assign;
}

Matrix hard_responsibilities(const std::vector<std::size_t>& assign, std::size_t k_count) {
  Matrix r(assign.size(), k_count);
  for (std::size_t t = 0; t < assign.size(); ++t) r(t, assign[t]) = 1.0;
  return r;
}

}  // namespace

GmmModel train_ubm(const Matrix& frames, std::size_t k, CovKind kind, const EmConfig& cfg,
                   EmTrace* trace) {
  if (k == 0) throw std::invalid_argument("train_ubm: K must be >= 1");
  if (frames.rows() < k) {
    throw std::invalid_argument("train_ubm: degenerate data, " + std::to_string(frames.rows()) +
                                " frames for K=" + std::to_string(k));
  }
  if (!(cfg.rel_tol > 0.0) || !(cfg.variance_floor > 0.0)) {
    throw std::invalid_argument("train_ubm: rel_tol and variance_floor must be positive");
  }
  for (double v : frames.flat()) {
    if (!std::isfinite(v)) throw std::invalid_argument("train_ubm: non-finite frame value");
  }
  SplitMix64 rng(SplitMix64::derive(cfg.seed, 0xE11));
  Matrix resp;
  if (cfg.init == EmInit::kKMeans) {
    resp = hard_responsibilities(kmeans(frames, k, cfg.kmeans_iters, rng), k);
  } else {
    resp.resize(frames.rows(), k);
    for (std::size_t t = 0; t < frames.rows(); ++t) {
      double s = 0.0;
      for (double& v : resp.row(t)) s += (v = rng.uniform() + 1e-3);
      for (double& v : resp.row(t)) v /= s;
    }
  }

  EmTrace local;
  EmTrace& tr = trace ? *trace : local;
  tr = EmTrace{};
  std::vector<double> counts;
  GmmModel model = m_step(frames, resp, kind, cfg.variance_floor, counts);
  const double empty_mass = 1e-6;

  for (int it = 0; it < cfg.max_iters; ++it) {
    // Re-seed components that collapsed to no mass.
    bool reseeded = false;
    if (std::any_of(counts.begin(), counts.end(), [&](double c) { return c < empty_mass; })) {
      Responsibilities cur = e_step(model, frames);
      std::vector<std::size_t> order(frames.rows());
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(),
                       [&](auto a, auto b) { return cur.ll[a] < cur.ll[b]; });
      std::size_t next = 0;
      for (std::size_t kk = 0; kk < k; ++kk) {
        if (counts[kk] >= empty_mass) continue;
        const std::size_t t = order[next++ % order.size()];
        for (std::size_t j = 0; j < k; ++j) cur.resp(t, j) = j == kk ? 1.0 : 0.0;
      }
      model = m_step(frames, cur.resp, kind, cfg.variance_floor, counts);
      tr.reseed_iterations.push_back(it);
      reseeded = true;
    }

    Responsibilities r = e_step(model, frames);
    const double ll = exact_sum(r.ll);
    const bool have_prev = !tr.loglik.empty() && !reseeded;
    const double prev = tr.loglik.empty() ? 0.0 : tr.loglik.back();
    tr.loglik.push_back(ll);
    if (have_prev && std::abs(ll - prev) <= cfg.rel_tol * std::abs(prev)) {
      tr.converged = true;
      break;
    }
    if (it + 1 == cfg.max_iters) break;
    model = m_step(frames, r.resp, kind, cfg.variance_floor, counts);
  }
  return model;
}

// ---------------------------------------------------------------------------
// serialization

namespace {
constexpr char kGmmMagic[4] = {'G', 'M', 'M', '1'};
constexpr std::uint32_t kGmmVersion = 1;
}  // namespace

std::vector<std::uint8_t> encode_gmm(const GmmModel& model) {
  ByteWriter w;
  w.bytes({kGmmMagic, 4});
  w.u32(kGmmVersion);
  w.u32(static_cast<std::uint32_t>(model.num_components()));
  w.u32(static_cast<std::uint32_t>(model.dim()));
  w.u8(static_cast<std::uint8_t>(model.cov_kind()));
  w.u32(static_cast<std::uint32_t>(model.covariance().values.rows()));
  w.u32(static_cast<std::uint32_t>(model.covariance().values.cols()));
  for (double v : model.weights()) w.f64(v);
  for (double v : model.means().flat()) w.f64(v);
  for (double v : model.covariance().values.flat()) w.f64(v);
  return w.buffer();
}

GmmModel decode_gmm(std::vector<std::uint8_t> bytes) {
  ByteReader r(std::move(bytes));
  if (r.remaining() < 4 || r.bytes(4) != std::string_view(kGmmMagic, 4)) {
    throw DataError("bad magic: not a GMM1 file");
  }
  if (const auto v = r.u32(); v != kGmmVersion) {
    throw DataError("unsupported GMM1 version " + std::to_string(v));
  }
  const std::size_t k = r.u32();
  const std::size_t d = r.u32();
  const auto tag = r.u8();
  if (tag > static_cast<std::uint8_t>(CovKind::kDiagonal)) {
    throw DataError("GMM1: unknown covariance kind tag " + std::to_string(tag));
  }
  const std::size_t cr = r.u32();
  const std::size_t cc = r.u32();
  r.require((k + k * d + cr * cc) * 8);
  std::vector<double> weights(k);
  for (double& v : weights) v = r.f64();
  Matrix means(k, d);
  for (double& v : means.flat()) v = r.f64();
  CovarianceSpec cov{static_cast<CovKind>(tag), Matrix(cr, cc)};
  for (double& v : cov.values.flat()) v = r.f64();
  if (!r.at_end()) throw DataError("GMM1: trailing bytes at offset " + std::to_string(r.offset()));
  try {
    return GmmModel(std::move(weights), std::move(means), std::move(cov));
  } catch (const std::invalid_argument& e) {
    throw DataError(std::string("GMM1: invalid model: ") + e.what());
  }
}

void save_gmm(const GmmModel& model, const std::string& path) {
  write_file_bytes(path, encode_gmm(model));
}

GmmModel load_gmm(const std::string& path) { return decode_gmm(read_file_bytes(path)); }

std::string gmm_to_json(const GmmModel& model) {
  nlohmann::json j;
  j["K"] = model.num_components();
  j["D"] = model.dim();
  j["cov_kind"] = std::string(to_string(model.cov_kind()));
  j["weights"] = model.weights();
  auto rows = [](const Matrix& m) {
    nlohmann::json a = nlohmann::json::array();
    for (std::size_t r = 0; r < m.rows(); ++r) {
      a.push_back(std::vector<double>(m.row(r).begin(), m.row(r).end()));
    }
    return a;
  };
  j["means"] = rows(model.means());
  j["covariance"] = rows(model.covariance().values);
  return j.dump(2);
}

}  // namespace sgmm
