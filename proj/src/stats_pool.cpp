// SPDX-License-Identifier: Apache-2.0
#include "sgmm/stats_pool.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "sgmm/binary_io.hpp"
#include "sgmm/simd.hpp"

namespace sgmm {

SufficientStats accumulate(const GmmModel& ubm, const Matrix& frames, SecondOrder second_order) {
  const std::size_t k_count = ubm.num_components();
  const std::size_t d_count = ubm.dim();
  if (frames.cols() != d_count) {
    throw std::invalid_argument("accumulate: frame dim " + std::to_string(frames.cols()) +
                                " != UBM dim " + std::to_string(d_count));
  }
  SufficientStats s;
  s.second_order = second_order;
  s.frames = frames.rows();
  s.n.assign(k_count, 0.0);
  s.sx.resize(k_count, d_count);
  if (second_order != SecondOrder::kNone) s.sx2_diag.resize(k_count, d_count);
  if (second_order == SecondOrder::kFull) s.sx2_full.assign(k_count, Matrix(d_count, d_count));

  std::vector<double> post(k_count);
  std::vector<double> sq(d_count);
  for (std::size_t t = 0; t < frames.rows(); ++t) {
    const auto x = frames.row(t);
    ubm.log_posterior(x, post);
    for (std::size_t d = 0; d < d_count; ++d) sq[d] = x[d] * x[d];
    for (std::size_t k = 0; k < k_count; ++k) {
      const double p = std::exp(post[k]);
      if (p == 0.0) continue;
      s.n[k] += p;
      simd::axpy(p, x, s.sx.row(k));
      if (second_order == SecondOrder::kNone) continue;
      simd::axpy(p, sq, s.sx2_diag.row(k));
      if (second_order == SecondOrder::kFull) {
        Matrix& m = s.sx2_full[k];
        for (std::size_t i = 0; i < d_count; ++i) simd::axpy(p * x[i], x, m.row(i));
      }
    }
  }
  return s;
}

double relevance(double n, double gamma) {
  if (n <= 0.0) return 0.0;
  return n / (n + gamma);
}

namespace {

void check_stats(const SufficientStats& stats, const GmmModel& ubm) {
  if (stats.n.size() != ubm.num_components() || stats.sx.cols() != ubm.dim()) {
    throw std::invalid_argument("statistics do not match the UBM shape");
  }
  const double total = std::accumulate(stats.n.begin(), stats.n.end(), 0.0);
  if (!(total > 0.0)) throw std::invalid_argument("all-zero sufficient statistics");
}

// Shared core of the ML and smoothed estimates. `lam(n)` is the per-component
// interpolation weight toward the video statistics.
using LambdaFn = std::function<double(double)>;

VideoGmm estimate(const SufficientStats& stats, const GmmModel& ubm, const LambdaFn& lam_w,
                  const LambdaFn& lam_m, const LambdaFn& lam_c, bool renormalize) {
  check_stats(stats, ubm);
  const std::size_t k_count = ubm.num_components();
  const std::size_t d_count = ubm.dim();
  const double total = std::accumulate(stats.n.begin(), stats.n.end(), 0.0);

  VideoGmm g;
  g.weights.resize(k_count);
  for (std::size_t k = 0; k < k_count; ++k) {
    const double l = lam_w(stats.n[k]);
    g.weights[k] = l * (stats.n[k] / total) + (1.0 - l) * ubm.weights()[k];
  }
  if (renormalize) {
    const double s = std::accumulate(g.weights.begin(), g.weights.end(), 0.0);
    for (double& w : g.weights) w /= s;
  }

  g.means.resize(k_count, d_count);
  for (std::size_t k = 0; k < k_count; ++k) {
    const double n = stats.n[k];
    const double l = lam_m(n);
    for (std::size_t d = 0; d < d_count; ++d) {
      const double ubm_mu = ubm.means()(k, d);
      g.means(k, d) = n > 0.0 ? l * (stats.sx(k, d) / n) + (1.0 - l) * ubm_mu : ubm_mu;
    }
  }

  if (stats.second_order == SecondOrder::kNone) return g;
  g.variances.resize(k_count, d_count);
  for (std::size_t k = 0; k < k_count; ++k) {
    const double n = stats.n[k];
    const double l = lam_c(n);
    for (std::size_t d = 0; d < d_count; ++d) {
      const double mu = ubm.means()(k, d);
      const double var = ubm.variance(k, d);
      if (n <= 0.0) {
        g.variances(k, d) = var;
        continue;
      }
      const double mv = g.means(k, d);
      g.variances(k, d) =
          l * (stats.sx2_diag(k, d) / n) + (1.0 - l) * (mu * mu + var) - mv * mv;
    }
  }
  if (stats.second_order != SecondOrder::kFull) return g;
  g.covariances.resize(k_count);
  for (std::size_t k = 0; k < k_count; ++k) {
    const double n = stats.n[k];
    const double l = lam_c(n);
    const Matrix ubm_cov = ubm.component_covariance(k);
    Matrix& c = g.covariances[k];
    c.resize(d_count, d_count);
    for (std::size_t i = 0; i < d_count; ++i) {
      for (std::size_t j = 0; j < d_count; ++j) {
        if (n <= 0.0) {
          c(i, j) = ubm_cov(i, j);
          continue;
        }
        const double mm = ubm.means()(k, i) * ubm.means()(k, j);
        c(i, j) = l * (stats.sx2_full[k](i, j) / n) + (1.0 - l) * (mm + ubm_cov(i, j)) -
                  g.means(k, i) * g.means(k, j);
      }
    }
  }
  return g;
}

}  // namespace

VideoGmm ml_estimates(const SufficientStats& stats, const GmmModel& ubm) {
  const auto one = [](double n) { return n > 0.0 ? 1.0 : 0.0; };
  VideoGmm g = estimate(stats, ubm, one, one, one, false);
  // ML weights are n/sum(n) even for empty components
  const double total = std::accumulate(stats.n.begin(), stats.n.end(), 0.0);
  for (std::size_t k = 0; k < g.weights.size(); ++k) g.weights[k] = stats.n[k] / total;
  return g;
}

VideoGmm smoothed_estimates(const SufficientStats& stats, const GmmModel& ubm,
                            const SmoothingConfig& cfg) {
  if (!(cfg.gamma >= 0.0)) throw std::invalid_argument("gamma must be non-negative");
  const double gamma = cfg.gamma;
  const auto smooth = [gamma](double n) { return relevance(n, gamma); };
  const auto raw = [](double n) { return n > 0.0 ? 1.0 : 0.0; };
  using Fn = LambdaFn;
  return estimate(stats, ubm, cfg.weights ? Fn(smooth) : Fn(raw), cfg.means ? Fn(smooth) : Fn(raw),
                  cfg.covariances ? Fn(smooth) : Fn(raw), true);
}

VideoCode sgmm_code(const SufficientStats& stats, const GmmModel& ubm, double gamma) {
  SufficientStats first_order = stats;
  first_order.second_order = SecondOrder::kNone;
  SmoothingConfig cfg;
  cfg.gamma = gamma;
  return {smoothed_estimates(first_order, ubm, cfg).means};
}

VideoCode vlad_code(const SufficientStats& stats, const GmmModel& ubm) {
  if (stats.n.size() != ubm.num_components() || stats.sx.cols() != ubm.dim()) {
    throw std::invalid_argument("statistics do not match the UBM shape");
  }
  VideoCode c{stats.sx};
  for (std::size_t k = 0; k < stats.n.size(); ++k) {
    simd::axpy(-stats.n[k], ubm.means().row(k), c.values.row(k));
  }
  return c;
}

VideoCode bow_code(const SufficientStats& stats) {
  VideoCode c{Matrix(1, stats.n.size())};
  const double t = static_cast<double>(stats.frames);
  for (std::size_t k = 0; k < stats.n.size(); ++k) c.values(0, k) = t > 0 ? stats.n[k] / t : 0.0;
  return c;
}

VideoCode avg_pool(const Matrix& frames) {
  if (frames.rows() == 0) throw std::invalid_argument("avg_pool: no frames");
  VideoCode c{Matrix(1, frames.cols())};
  for (std::size_t t = 0; t < frames.rows(); ++t) simd::axpy(1.0, frames.row(t), c.values.row(0));
  for (double& v : c.values.flat()) v /= static_cast<double>(frames.rows());
  return c;
}

void normalize(VideoCode& code, bool intra, bool final) {
  if (intra) {
    for (std::size_t r = 0; r < code.values.rows(); ++r) {
      auto row = code.values.row(r);
      const double norm = std::sqrt(simd::dot(row, row));
      if (norm > 0.0) {
        for (double& v : row) v /= norm;
      }
    }
    code.intra_normed = true;
  }
  if (final) {
    auto all = code.values.flat();
    const double norm = std::sqrt(simd::dot(all, all));
    if (norm > 0.0) {
      for (double& v : all) v /= norm;
    }
    code.final_normed = true;
  }
}

namespace {
constexpr char kVcodMagic[4] = {'V', 'C', 'O', 'D'};
}

void write_vcod(const std::vector<CodeEntry>& entries, const std::string& path) {
  ByteWriter w;
  std::ostringstream manifest;
  for (const auto& e : entries) {
    if (e.id.find_first_of("\t\n") != std::string::npos) {
      throw DataError("VCOD: id contains tab or newline: " + e.id);
    }
    manifest << e.id << '\t' << w.size() << '\t';
    for (std::size_t i = 0; i < e.labels.size(); ++i) manifest << (i ? "," : "") << e.labels[i];
    manifest << '\n';
    w.bytes({kVcodMagic, 4});
    w.u32(static_cast<std::uint32_t>(e.code.rows()));
    w.u32(static_cast<std::uint32_t>(e.code.cols()));
    for (double v : e.code.flat()) w.f32(static_cast<float>(v));
  }
  write_file_bytes(path, w.buffer());
  const std::string m = manifest.str();
  write_file_bytes(path + ".manifest", std::vector<std::uint8_t>(m.begin(), m.end()));
}

std::vector<CodeEntry> read_vcod(const std::string& path) {
  ByteReader r(read_file_bytes(path));
  const auto mbytes = read_file_bytes(path + ".manifest");
  std::istringstream manifest(std::string(mbytes.begin(), mbytes.end()));
  std::vector<CodeEntry> out;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string id, offset, labels;
    std::getline(fields, id, '\t');
    std::getline(fields, offset, '\t');
    std::getline(fields, labels);
    CodeEntry e;
    e.id = id;
    if (offset.empty() || std::stoull(offset) != r.offset()) {
      throw DataError("VCOD manifest offset for '" + id + "' does not match block at byte offset " +
                      std::to_string(r.offset()));
    }
    std::istringstream ls(labels);
    std::string l;
    while (std::getline(ls, l, ',')) {
      if (!l.empty()) e.labels.push_back(static_cast<std::uint32_t>(std::stoul(l)));
    }
    if (r.remaining() < 4 || r.bytes(4) != std::string_view(kVcodMagic, 4)) {
      throw DataError("bad magic: VCOD block expected at byte offset " + std::to_string(r.offset() - 4));
    }
    const std::size_t rows = r.u32();
    const std::size_t cols = r.u32();
    r.require(rows * cols * 4);
    e.code.resize(rows, cols);
    for (double& v : e.code.flat()) v = r.f32();
    out.push_back(std::move(e));
  }
  if (!r.at_end()) throw DataError("VCOD: blocks not listed in manifest after byte offset " + std::to_string(r.offset()));
  return out;
}

}  // namespace sgmm
