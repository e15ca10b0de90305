// SPDX-License-Identifier: Apache-2.0
#include "sgmm/checkpoint.hpp"

#include "sgmm/binary_io.hpp"

namespace sgmm {
namespace {

constexpr char kMagic[4] = {'C', 'K', 'P', 'T'};

void put_string(ByteWriter& w, const std::string& s) {
  w.u32(static_cast<std::uint32_t>(s.size()));
  w.bytes(s);
}

std::string get_string(ByteReader& r) { return r.bytes(r.u32()); }

void put_matrix_data(ByteWriter& w, const Matrix& m) {
  for (double v : m.flat()) w.f64(v);
}

Matrix get_matrix_data(ByteReader& r, std::uint32_t rows, std::uint32_t cols) {
  const std::size_t count = static_cast<std::size_t>(rows) * cols;
  r.require(count * 8);
  Matrix m(rows, cols);
  for (double& v : m.flat()) v = r.f64();
  return m;
}

}  // namespace

std::vector<NamedMatrix> snapshot(const std::vector<ConstParamRef>& params) {
  std::vector<NamedMatrix> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back({p.name, *p.value});
  return out;
}

void restore(const std::vector<NamedMatrix>& stored, const std::vector<ParamRef>& params) {
  if (stored.size() != params.size()) {
    throw DataError("checkpoint has " + std::to_string(stored.size()) + " tensors, model needs " +
                    std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (stored[i].name != params[i].name || !stored[i].value.same_shape(*params[i].value)) {
      throw DataError("checkpoint tensor " + std::to_string(i) + " (" + stored[i].name +
                      ") does not match model tensor " + params[i].name);
    }
    *params[i].value = stored[i].value;
  }
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  if (c.adam_m.size() != c.adam_v.size()) {
    throw std::invalid_argument("checkpoint: moment lists differ in length");
  }
  ByteWriter w;
  w.bytes(std::string_view(kMagic, 4));
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(c.meta.size()));
  for (const auto& [k, v] : c.meta) {
    put_string(w, k);
    put_string(w, v);
  }
  w.u64(c.seed);
  w.u64(c.step);
  w.f64(c.val_loss);
  w.f64(c.best_val_loss);
  w.u64(c.best_step);
  w.u64(c.adam_t);
  w.u32(static_cast<std::uint32_t>(c.params.size()));
  for (const auto& p : c.params) {
    put_string(w, p.name);
    w.u32(static_cast<std::uint32_t>(p.value.rows()));
    w.u32(static_cast<std::uint32_t>(p.value.cols()));
    put_matrix_data(w, p.value);
  }
  w.u32(static_cast<std::uint32_t>(c.adam_m.size()));
  for (std::size_t i = 0; i < c.adam_m.size(); ++i) {
    if (!c.adam_m[i].same_shape(c.adam_v[i])) {
      throw std::invalid_argument("checkpoint: moment shapes differ");
    }
    w.u32(static_cast<std::uint32_t>(c.adam_m[i].rows()));
    w.u32(static_cast<std::uint32_t>(c.adam_m[i].cols()));
    put_matrix_data(w, c.adam_m[i]);
    put_matrix_data(w, c.adam_v[i]);
  }
  return w.buffer();
}

Checkpoint decode_checkpoint(std::vector<std::uint8_t> bytes) {
  ByteReader r(std::move(bytes));
  if (r.bytes(4) != std::string_view(kMagic, 4)) throw DataError("checkpoint: bad magic");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint: unsupported version " + std::to_string(version));
  }
  Checkpoint c;
  const std::uint32_t n_meta = r.u32();
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = get_string(r);
    c.meta[std::move(k)] = get_string(r);
  }
  c.seed = r.u64();
  c.step = r.u64();
  c.val_loss = r.f64();
  c.best_val_loss = r.f64();
  c.best_step = r.u64();
  c.adam_t = r.u64();
  const std::uint32_t n_params = r.u32();
  for (std::uint32_t i = 0; i < n_params; ++i) {
    NamedMatrix nm;
    nm.name = get_string(r);
    const std::uint32_t rows = r.u32();
    const std::uint32_t cols = r.u32();
    nm.value = get_matrix_data(r, rows, cols);
    c.params.push_back(std::move(nm));
  }
  const std::uint32_t n_mom = r.u32();
  for (std::uint32_t i = 0; i < n_mom; ++i) {
    const std::uint32_t rows = r.u32();
    const std::uint32_t cols = r.u32();
    c.adam_m.push_back(get_matrix_data(r, rows, cols));
    c.adam_v.push_back(get_matrix_data(r, rows, cols));
  }
  if (!r.at_end()) {
    throw DataError("checkpoint: " + std::to_string(r.remaining()) + " trailing bytes at offset " +
                    std::to_string(r.offset()));
  }
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  write_file_bytes(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::string& path) {
  return decode_checkpoint(read_file_bytes(path));
}

}  // namespace sgmm
