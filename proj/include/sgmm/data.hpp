// SPDX-License-Identifier: Apache-2.0
#pragma once

// Video/frame data model, the VSEQ container, and the synthetic generators
// used in place of real video corpora.

#include <cstdint>
#include <string>
#include <vector>

#include "sgmm/matrix.hpp"

namespace sgmm {

struct VideoRecord {
  std::string id;
  std::vector<std::uint32_t> labels;  // sorted, unique
  Matrix frames;                      // T x D

  bool operator==(const VideoRecord&) const = default;
};

struct Dataset {
  std::vector<VideoRecord> records;
  std::uint32_t num_classes = 1;
  std::uint32_t dim = 1;

  bool operator==(const Dataset&) const = default;
};

// Throws std::invalid_argument naming the first violated invariant.
void validate(const Dataset& ds);

// VSEQ: "VSEQ", u32 version=1, u32 D, u32 count, then per record
// u16 id_len + id bytes, u16 label_count + u32 labels, u32 T, T*D float32.
// Everything little-endian. num_classes is not stored; readers recover it as
// 1 + max label.
inline constexpr std::uint32_t kVseqVersion = 1;
std::vector<std::uint8_t> encode_vseq(const Dataset& ds);
Dataset decode_vseq(std::vector<std::uint8_t> bytes);
void write_vseq(const Dataset& ds, const std::string& path);
Dataset read_vseq(const std::string& path);

// Every frame row as one matrix (for UBM training).
Matrix stack_frames(const Dataset& ds, std::size_t max_frames = 0,
                    std::uint64_t seed = 0);

struct DatasetSplit {
  Dataset train, val, test;
};
// Seeded permutation, then contiguous slices.
DatasetSplit split_dataset(const Dataset& ds, double train_frac,
                           double val_frac, std::uint64_t seed);

struct SynthConfig {
  std::uint32_t num_classes = 8;
  std::uint32_t num_clusters_true = 16;
  std::uint32_t dim = 16;
  std::uint32_t videos_per_class = 100;
  std::uint32_t frames_min = 20;
  std::uint32_t frames_max = 60;
  double cluster_spread = 1.0;   // per-coordinate stddev around a centroid
  double centroid_radius = 3.0;  // distance of every centroid from origin
  std::uint32_t max_labels = 3;
  double min_profile_tv = 0.35;  // rejection threshold between class profiles
  std::uint64_t seed = 1;
};

void validate(const SynthConfig& cfg);

// Latent structure behind a generated dataset; tests use it as an oracle.
struct SynthTruth {
  Matrix centroids;       // num_clusters_true x D
  Matrix class_profiles;  // num_classes x num_clusters_true, rows sum to 1
  std::vector<std::vector<std::uint32_t>> frame_clusters;  // per record
};

// Centroids come in antipodal pairs (+c, -c); each class spreads its mass
// evenly inside a pair, so every class has the same expected frame mean and
// the class signal lives only in which clusters are occupied.
Dataset gen_classification(const SynthConfig& cfg, SynthTruth* truth = nullptr);

struct CowatchConfig {
  std::uint32_t users = 100;
  std::uint32_t sessions_per_user = 4;
  std::uint32_t videos_per_session = 8;
  double sharpness = 10.0;         // logit slope on relative topic affinity
  double topic_concentration = 2.0;
  double user_bias_sd = 0.5;
  std::uint32_t negatives_per_pair = 2;
  std::uint64_t seed = 1;
};

struct WatchEvent {
  std::uint32_t user;
  std::uint32_t session;
  std::uint32_t video;  // index into Dataset::records
  std::uint8_t label;   // 1 = valid watch

  bool operator==(const WatchEvent&) const = default;
};

struct CowatchPair {
  std::uint32_t user;
  std::uint32_t session;
  std::uint32_t a, b;

  bool operator==(const CowatchPair&) const = default;
};

struct TripletIds {
  std::uint32_t anchor, positive, negative;
  std::uint32_t user, session;

  bool operator==(const TripletIds&) const = default;
};

struct CowatchData {
  std::vector<WatchEvent> events;
  std::vector<CowatchPair> pairs;
  std::vector<TripletIds> triplets;
  Matrix user_topics;  // users x num_classes

  bool operator==(const CowatchData&) const = default;
};

// Each user sees disjoint sessions of distinct videos. Watch probability is
// sigmoid(sharpness * (a - 0.5) + bias_u) with a the user's topic weight on
// the video's labels relative to the user's favourite topic. Positives are
// watched pairs inside one session, negatives are presented-but-unwatched
// videos of the same session.
CowatchData gen_cowatch(const Dataset& videos, const CowatchConfig& cfg);

void write_cowatch(const CowatchData& data, const std::string& prefix);
CowatchData read_cowatch(const std::string& prefix);

}  // namespace sgmm
