// SPDX-License-Identifier: Apache-2.0
#include "sgmm/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "sgmm/binary_io.hpp"
#include "sgmm/rng.hpp"

namespace sgmm {
namespace {

constexpr char kVseqMagic[4] = {'V', 'S', 'E', 'Q'};

double round_to_float(double v) {
  return static_cast<double>(static_cast<float>(v));
}

double tv_distance(std::span<const double> p, std::span<const double> q) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
  return 0.5 * s;
}

std::size_t sample_categorical(SplitMix64& rng, std::span<const double> p) {
  const double u = rng.uniform();
  double c = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    c += p[i];
    if (u < c) return i;
  }
  // rounding left u above the last partial sum
  for (std::size_t i = p.size(); i-- > 0;) {
    if (p[i] > 0.0) return i;
  }
  return p.size() - 1;
}

// Partial Fisher-Yates: first `count` entries of a seeded permutation of [0,n).
std::vector<std::uint32_t> sample_without_replacement(SplitMix64& rng,
                                                      std::uint32_t n,
                                                      std::uint32_t count) {
  std::vector<std::uint32_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0u);
  count = std::min(count, n);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto j = i + static_cast<std::uint32_t>(rng.below(n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(count);
  return idx;
}

}  // namespace

void validate(const Dataset& ds) {
  if (ds.dim == 0) throw std::invalid_argument("dataset dim must be positive");
  if (ds.num_classes == 0) {
    throw std::invalid_argument("dataset num_classes must be positive");
  }
  for (std::size_t r = 0; r < ds.records.size(); ++r) {
    const auto& rec = ds.records[r];
    const std::string where = "record " + std::to_string(r) + " ('" + rec.id + "')";
    if (rec.frames.rows() == 0) throw std::invalid_argument(where + ": T must be >= 1");
    if (rec.frames.cols() != ds.dim) {
      throw std::invalid_argument(where + ": frame dim " +
                                  std::to_string(rec.frames.cols()) +
                                  " != dataset dim " + std::to_string(ds.dim));
    }
    for (double v : rec.frames.flat()) {
      if (!std::isfinite(v)) throw std::invalid_argument(where + ": non-finite frame value");
    }
    for (std::size_t i = 0; i < rec.labels.size(); ++i) {
      if (rec.labels[i] >= ds.num_classes) {
        throw std::invalid_argument(where + ": label " + std::to_string(rec.labels[i]) +
                                    " >= num_classes");
      }
      if (i > 0 && rec.labels[i] <= rec.labels[i - 1]) {
        throw std::invalid_argument(where + ": labels must be sorted and unique");
      }
    }
  }
}

std::vector<std::uint8_t> encode_vseq(const Dataset& ds) {
  validate(ds);
  constexpr auto kU32Max = std::numeric_limits<std::uint32_t>::max();
  constexpr auto kU16Max = std::numeric_limits<std::uint16_t>::max();
  if (ds.records.size() > kU32Max) throw DataError("VSEQ: too many records");
  ByteWriter w;
  w.bytes({kVseqMagic, 4});
  w.u32(kVseqVersion);
  w.u32(ds.dim);
  w.u32(static_cast<std::uint32_t>(ds.records.size()));
  for (const auto& rec : ds.records) {
    if (rec.id.size() > kU16Max) throw DataError("VSEQ: id longer than 65535 bytes: " + rec.id.substr(0, 32));
    if (rec.labels.size() > kU16Max) throw DataError("VSEQ: more than 65535 labels in " + rec.id);
    if (rec.frames.rows() > kU32Max) throw DataError("VSEQ: too many frames in " + rec.id);
    w.u16(static_cast<std::uint16_t>(rec.id.size()));
    w.bytes(rec.id);
    w.u16(static_cast<std::uint16_t>(rec.labels.size()));
    for (auto l : rec.labels) w.u32(l);
    w.u32(static_cast<std::uint32_t>(rec.frames.rows()));
    for (double v : rec.frames.flat()) w.f32(static_cast<float>(v));
  }
  return w.buffer();
}

Dataset decode_vseq(std::vector<std::uint8_t> bytes) {
  ByteReader r(std::move(bytes));
  if (r.remaining() < 4 || r.bytes(4) != std::string_view(kVseqMagic, 4)) {
    throw DataError("bad magic: not a VSEQ file");
  }
  const auto version = r.u32();
  if (version != kVseqVersion) {
    throw DataError("unsupported VSEQ version " + std::to_string(version));
  }
  Dataset ds;
  ds.dim = r.u32();
  if (ds.dim == 0) throw DataError("VSEQ: dim is zero");
  const auto count = r.u32();
  std::uint32_t max_label = 0;
  bool any_label = false;
  ds.records.reserve(std::min<std::uint32_t>(count, 1u << 20));
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t record_start = r.offset();
    try {
      VideoRecord rec;
      rec.id = r.bytes(r.u16());
      const auto n_labels = r.u16();
      rec.labels.resize(n_labels);
      for (auto& l : rec.labels) {
        l = r.u32();
        max_label = std::max(max_label, l);
        any_label = true;
      }
      const auto t = r.u32();
      r.require(static_cast<std::size_t>(t) * ds.dim * 4);
      rec.frames.resize(t, ds.dim);
      for (auto& v : rec.frames.flat()) {
        const std::size_t at = r.offset();
        v = r.f32();
        if (!std::isfinite(v)) {
          throw DataError("VSEQ: non-finite float at byte offset " + std::to_string(at));
        }
      }
      ds.records.push_back(std::move(rec));
    } catch (const DataError& e) {
      throw DataError("VSEQ record " + std::to_string(i) + " (starting at byte offset " +
                      std::to_string(record_start) + "): " + e.what());
    }
  }
  if (!r.at_end()) {
    throw DataError("VSEQ: " + std::to_string(r.remaining()) +
                    " trailing bytes at offset " + std::to_string(r.offset()));
  }
  ds.num_classes = any_label ? max_label + 1 : 1;
  try {
    validate(ds);
  } catch (const std::invalid_argument& e) {
    throw DataError(std::string("VSEQ: ") + e.what());
  }
  return ds;
}

void write_vseq(const Dataset& ds, const std::string& path) {
  write_file_bytes(path, encode_vseq(ds));
}

Dataset read_vseq(const std::string& path) {
  return decode_vseq(read_file_bytes(path));
}

Matrix stack_frames(const Dataset& ds, std::size_t max_frames,
                    std::uint64_t seed) {
  std::size_t total = 0;
  for (const auto& rec : ds.records) total += rec.frames.rows();
  Matrix all(total, ds.dim);
  std::size_t at = 0;
  for (const auto& rec : ds.records) {
    std::copy(rec.frames.flat().begin(), rec.frames.flat().end(),
              all.flat().begin() + static_cast<std::ptrdiff_t>(at * ds.dim));
    at += rec.frames.rows();
  }
  if (max_frames == 0 || max_frames >= total) return all;
  SplitMix64 rng(seed);
  auto pick = sample_without_replacement(rng, static_cast<std::uint32_t>(total),
                                         static_cast<std::uint32_t>(max_frames));
  std::sort(pick.begin(), pick.end());
  Matrix sub(pick.size(), ds.dim);
  for (std::size_t i = 0; i < pick.size(); ++i) {
    std::copy(all.row(pick[i]).begin(), all.row(pick[i]).end(), sub.row(i).begin());
  }
  return sub;
}

DatasetSplit split_dataset(const Dataset& ds, double train_frac,
                           double val_frac, std::uint64_t seed) {
  if (train_frac < 0 || val_frac < 0 || train_frac + val_frac > 1.0) {
    throw std::invalid_argument("split fractions must be non-negative and sum to <= 1");
  }
  const auto n = static_cast<std::uint32_t>(ds.records.size());
  SplitMix64 rng(seed);
  const auto perm = sample_without_replacement(rng, n, n);
  const auto n_train = static_cast<std::size_t>(std::floor(train_frac * n));
  const auto n_val = static_cast<std::size_t>(std::floor(val_frac * n));
  DatasetSplit out;
  for (Dataset* d : {&out.train, &out.val, &out.test}) {
    d->num_classes = ds.num_classes;
    d->dim = ds.dim;
  }
  for (std::size_t i = 0; i < perm.size(); ++i) {
    Dataset& dst = i < n_train ? out.train : (i < n_train + n_val ? out.val : out.test);
    dst.records.push_back(ds.records[perm[i]]);
  }
  return out;
}

void validate(const SynthConfig& cfg) {
  if (cfg.num_classes == 0) throw std::invalid_argument("num_classes must be >= 1");
  if (cfg.num_clusters_true == 0) throw std::invalid_argument("num_clusters_true must be >= 1");
  if (cfg.dim == 0) throw std::invalid_argument("dim must be >= 1");
  if (cfg.frames_min < 1) throw std::invalid_argument("frames_min must be >= 1");
  if (cfg.frames_min > cfg.frames_max) throw std::invalid_argument("frames_min must be <= frames_max");
  if (!(cfg.cluster_spread > 0.0)) throw std::invalid_argument("cluster_spread must be > 0");
  if (!(cfg.centroid_radius >= 0.0)) throw std::invalid_argument("centroid_radius must be >= 0");
  if (cfg.max_labels < 1) throw std::invalid_argument("max_labels must be >= 1");
}

Dataset gen_classification(const SynthConfig& cfg, SynthTruth* truth) {
  validate(cfg);
  const std::uint32_t C = cfg.num_classes;
  const std::uint32_t M = cfg.num_clusters_true;
  const std::uint32_t D = cfg.dim;
  const std::uint32_t pairs = M / 2;
  const std::uint32_t groups = pairs + (M % 2);  // odd cluster sits at origin
  SplitMix64 rng(SplitMix64::derive(cfg.seed, 0x5EED));

  // Antipodal centroid pairs on a sphere of radius centroid_radius.
  Matrix centroids(M, D);
  for (std::uint32_t p = 0; p < pairs; ++p) {
    std::vector<double> dir(D);
    double norm = 0.0;
    do {
      norm = 0.0;
      for (auto& v : dir) {
        v = rng.normal();
        norm += v * v;
      }
      norm = std::sqrt(norm);
    } while (norm < 1e-12);
    for (std::uint32_t d = 0; d < D; ++d) {
      centroids(2 * p, d) = round_to_float(cfg.centroid_radius * dir[d] / norm);
      centroids(2 * p + 1, d) = -centroids(2 * p, d);
    }
  }

  // Class profiles: softmax of gaussian scores over groups, split evenly
  // within a pair. Resample a class whose profile lands too close to an
  // earlier one.
  Matrix profiles(C, M);
  for (std::uint32_t c = 0; c < C; ++c) {
    for (int attempt = 0; attempt < 1000; ++attempt) {
      std::vector<double> g(groups);
      double mx = -std::numeric_limits<double>::infinity();
      for (auto& v : g) {
        v = 2.0 * rng.normal();
        mx = std::max(mx, v);
      }
      double s = 0.0;
      for (auto& v : g) {
        v = std::exp(v - mx);
        s += v;
      }
      for (std::uint32_t q = 0; q < groups; ++q) {
        const double mass = g[q] / s;
        if (q < pairs) {
          profiles(c, 2 * q) = 0.5 * mass;
          profiles(c, 2 * q + 1) = 0.5 * mass;
        } else {
          profiles(c, M - 1) = mass;
        }
      }
      bool far_enough = true;
      for (std::uint32_t o = 0; o < c && far_enough; ++o) {
        far_enough = tv_distance(profiles.row(c), profiles.row(o)) >= cfg.min_profile_tv;
      }
      if (far_enough) break;
    }
  }

  // Nearest-profile neighbours per class, for correlated extra labels.
  std::vector<std::vector<std::uint32_t>> neighbours(C);
  for (std::uint32_t c = 0; c < C; ++c) {
    std::vector<std::uint32_t> others;
    for (std::uint32_t o = 0; o < C; ++o) {
      if (o != c) others.push_back(o);
    }
    std::stable_sort(others.begin(), others.end(), [&](auto a, auto b) {
      return tv_distance(profiles.row(c), profiles.row(a)) <
             tv_distance(profiles.row(c), profiles.row(b));
    });
    others.resize(std::min<std::size_t>(others.size(), 3));
    neighbours[c] = std::move(others);
  }

  Dataset ds;
  ds.num_classes = C;
  ds.dim = D;
  if (truth) {
    truth->centroids = centroids;
    truth->class_profiles = profiles;
    truth->frame_clusters.clear();
  }
  for (std::uint32_t c = 0; c < C; ++c) {
    for (std::uint32_t i = 0; i < cfg.videos_per_class; ++i) {
      SplitMix64 vr(SplitMix64::derive(cfg.seed, c + 1, i));
      VideoRecord rec;
      rec.id = "c" + std::to_string(c) + "-v" + std::to_string(i);
      rec.labels.push_back(c);
      const auto n_labels = std::min<std::uint32_t>(
          1 + static_cast<std::uint32_t>(vr.below(cfg.max_labels)),
          1 + static_cast<std::uint32_t>(neighbours[c].size()));
      auto pool = neighbours[c];
      while (rec.labels.size() < n_labels) {
        const auto j = vr.below(pool.size());
        rec.labels.push_back(pool[j]);
        pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(j));
      }
      std::vector<double> mix(M, 0.0);
      for (auto l : rec.labels) {
        for (std::uint32_t m = 0; m < M; ++m) mix[m] += profiles(l, m) / rec.labels.size();
      }
      std::sort(rec.labels.begin(), rec.labels.end());

      const auto t = cfg.frames_min +
                     static_cast<std::uint32_t>(vr.below(cfg.frames_max - cfg.frames_min + 1));
      rec.frames.resize(t, D);
      std::vector<std::uint32_t> clusters(t);
      for (std::uint32_t f = 0; f < t; ++f) {
        const auto m = static_cast<std::uint32_t>(sample_categorical(vr, mix));
        clusters[f] = m;
        for (std::uint32_t d = 0; d < D; ++d) {
          rec.frames(f, d) = round_to_float(centroids(m, d) + cfg.cluster_spread * vr.normal());
        }
      }
      if (truth) truth->frame_clusters.push_back(std::move(clusters));
      ds.records.push_back(std::move(rec));
    }
  }
  return ds;
}

CowatchData gen_cowatch(const Dataset& videos, const CowatchConfig& cfg) {
  CowatchData out;
  const std::uint32_t C = videos.num_classes;
  out.user_topics.resize(cfg.users, C);
  if (cfg.users == 0) return out;
  if (videos.records.empty()) throw std::invalid_argument("gen_cowatch: no videos");
  const auto n_videos = static_cast<std::uint32_t>(videos.records.size());

  for (std::uint32_t u = 0; u < cfg.users; ++u) {
    SplitMix64 rng(SplitMix64::derive(cfg.seed, 0xC0FFEE, u));
    double mx = -std::numeric_limits<double>::infinity();
    std::vector<double> z(C);
    for (auto& v : z) {
      v = cfg.topic_concentration * rng.normal();
      mx = std::max(mx, v);
    }
    double s = 0.0;
    for (auto& v : z) {
      v = std::exp(v - mx);
      s += v;
    }
    double top = 0.0;
    for (std::uint32_t c = 0; c < C; ++c) {
      out.user_topics(u, c) = z[c] / s;
      top = std::max(top, out.user_topics(u, c));
    }
    const double bias = cfg.user_bias_sd * rng.normal();

    const auto presented = sample_without_replacement(
        rng, n_videos, cfg.sessions_per_user * cfg.videos_per_session);
    for (std::uint32_t sess = 0; sess * cfg.videos_per_session < presented.size(); ++sess) {
      const auto begin = presented.begin() + sess * cfg.videos_per_session;
      const auto end = presented.begin() +
                       std::min<std::size_t>(presented.size(), (sess + 1) * cfg.videos_per_session);
      std::vector<std::uint32_t> watched, skipped;
      for (auto it = begin; it != end; ++it) {
        const auto& rec = videos.records[*it];
        double affinity = 0.0;
        for (auto l : rec.labels) affinity += out.user_topics(u, l);
        affinity = rec.labels.empty() ? 0.0 : affinity / (rec.labels.size() * top);
        const double logit = cfg.sharpness * (affinity - 0.5) + bias;
        const double p = 1.0 / (1.0 + std::exp(-logit));
        const bool w = rng.bernoulli(p);
        out.events.push_back({u, sess, *it, static_cast<std::uint8_t>(w ? 1 : 0)});
        (w ? watched : skipped).push_back(*it);
      }
      for (std::size_t i = 0; i < watched.size(); ++i) {
        for (std::size_t j = i + 1; j < watched.size(); ++j) {
          out.pairs.push_back({u, sess, watched[i], watched[j]});
          if (skipped.empty()) continue;
          for (std::uint32_t r = 0; r < cfg.negatives_per_pair; ++r) {
            const auto n = skipped[rng.below(skipped.size())];
            out.triplets.push_back({watched[i], watched[j], n, u, sess});
          }
        }
      }
    }
  }
  return out;
}

void write_cowatch(const CowatchData& data, const std::string& prefix) {
  auto open = [](const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw DataError("cannot open " + path + " for writing");
    return f;
  };
  {
    auto f = open(prefix + ".events.csv");
    f << "user,session,video,label\n";
    for (const auto& e : data.events) {
      f << e.user << ',' << e.session << ',' << e.video << ',' << int(e.label) << '\n';
    }
  }
  {
    auto f = open(prefix + ".pairs.csv");
    f << "user,session,a,b\n";
    for (const auto& p : data.pairs) f << p.user << ',' << p.session << ',' << p.a << ',' << p.b << '\n';
  }
  {
    auto f = open(prefix + ".triplets.csv");
    f << "anchor,positive,negative,user,session\n";
    for (const auto& t : data.triplets) {
      f << t.anchor << ',' << t.positive << ',' << t.negative << ',' << t.user << ','
        << t.session << '\n';
    }
  }
  {
    auto f = open(prefix + ".topics.csv");
    f.precision(17);
    for (std::size_t u = 0; u < data.user_topics.rows(); ++u) {
      for (std::size_t c = 0; c < data.user_topics.cols(); ++c) {
        f << (c ? "," : "") << data.user_topics(u, c);
      }
      f << '\n';
    }
  }
}

namespace {

std::vector<std::vector<std::string>> read_csv(const std::string& path, bool header) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open " + path);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  if (header) std::getline(f, line);
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

std::uint32_t to_u32(const std::string& s, const std::string& path) {
  try {
    std::size_t used = 0;
    const auto v = std::stoul(s, &used);
    if (used != s.size() || v > std::numeric_limits<std::uint32_t>::max()) throw std::out_of_range(s);
    return static_cast<std::uint32_t>(v);
  } catch (const std::exception&) {
    throw DataError(path + ": bad integer field '" + s + "'");
  }
}

}  // namespace

CowatchData read_cowatch(const std::string& prefix) {
  CowatchData out;
  const auto need = [](const auto& row, std::size_t n, const std::string& path) {
    if (row.size() != n) throw DataError(path + ": expected " + std::to_string(n) + " columns");
  };
  {
    const auto path = prefix + ".events.csv";
    for (const auto& r : read_csv(path, true)) {
      need(r, 4, path);
      out.events.push_back({to_u32(r[0], path), to_u32(r[1], path), to_u32(r[2], path),
                            static_cast<std::uint8_t>(to_u32(r[3], path) ? 1 : 0)});
    }
  }
  {
    const auto path = prefix + ".pairs.csv";
    for (const auto& r : read_csv(path, true)) {
      need(r, 4, path);
      out.pairs.push_back({to_u32(r[0], path), to_u32(r[1], path), to_u32(r[2], path),
                           to_u32(r[3], path)});
    }
  }
  {
    const auto path = prefix + ".triplets.csv";
    for (const auto& r : read_csv(path, true)) {
      need(r, 5, path);
      out.triplets.push_back({to_u32(r[0], path), to_u32(r[1], path), to_u32(r[2], path),
                              to_u32(r[3], path), to_u32(r[4], path)});
    }
  }
  {
    const auto path = prefix + ".topics.csv";
    const auto rows = read_csv(path, false);
    const std::size_t cols = rows.empty() ? 0 : rows.front().size();
    out.user_topics.resize(rows.size(), cols);
    for (std::size_t u = 0; u < rows.size(); ++u) {
      need(rows[u], cols, path);
      for (std::size_t c = 0; c < cols; ++c) out.user_topics(u, c) = std::stod(rows[u][c]);
    }
  }
  return out;
}

}  // namespace sgmm
