// SPDX-License-Identifier: Apache-2.0
#include "sgmm/model.hpp"

#include <cstdio>
#include <stdexcept>

#include "sgmm/binary_io.hpp"
#include "sgmm/stats_pool.hpp"

namespace sgmm {
namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

const std::string& need(const Meta& meta, const std::string& key) {
  auto it = meta.find(key);
  if (it == meta.end()) throw DataError("checkpoint meta: missing key '" + key + "'");
  return it->second;
}

std::size_t need_size(const Meta& meta, const std::string& key) {
  const std::string& s = need(meta, key);
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw DataError("checkpoint meta: bad integer for '" + key + "': " + s);
  }
}

bool need_bool(const Meta& meta, const std::string& key) {
  const std::string& s = need(meta, key);
  if (s == "1") return true;
  if (s == "0") return false;
  throw DataError("checkpoint meta: bad flag for '" + key + "': " + s);
}

}  // namespace

std::size_t ModelSpec::code_dim() const {
  return pool == PoolKind::kAvg ? deep.dim : deep.k * deep.dim;
}

HeadSpec ModelSpec::head() const {
  HeadSpec h;
  h.input_dim = code_dim();
  h.num_classes = num_classes;
  h.experts = experts;
  h.input_gate = input_gate;
  h.output_gate = output_gate;
  return h;
}

Meta to_meta(const ModelSpec& s) {
  Meta m;
  m["model.pool"] = s.pool == PoolKind::kAvg ? "avg" : "deep";
  m["model.code"] = std::string(to_string(s.deep.code));
  m["model.variant"] = std::string(to_string(s.deep.variant));
  m["model.k"] = std::to_string(s.deep.k);
  m["model.dim"] = std::to_string(s.deep.dim);
  m["model.gamma"] = fmt_double(s.deep.gamma);
  m["model.intra_norm"] = s.deep.intra_norm ? "1" : "0";
  m["model.final_norm"] = s.deep.final_norm ? "1" : "0";
  m["model.shared_means"] = s.deep.shared_means ? "1" : "0";
  m["model.num_classes"] = std::to_string(s.num_classes);
  m["model.experts"] = std::to_string(s.experts);
  m["model.input_gate"] = s.input_gate ? "1" : "0";
  m["model.output_gate"] = s.output_gate ? "1" : "0";
  m["model.freeze_pool"] = s.freeze_pool ? "1" : "0";
  return m;
}

ModelSpec model_spec_from_meta(const Meta& meta) {
  ModelSpec s;
  const std::string& pool = need(meta, "model.pool");
  if (pool == "avg") {
    s.pool = PoolKind::kAvg;
  } else if (pool == "deep") {
    s.pool = PoolKind::kDeep;
  } else {
    throw DataError("checkpoint meta: unknown pool '" + pool + "'");
  }
  const std::string& code = need(meta, "model.code");
  if (code == "vlad") {
    s.deep.code = CodeKind::kVlad;
  } else if (code == "dsgmm") {
    s.deep.code = CodeKind::kDsgmm;
  } else {
    throw DataError("checkpoint meta: unknown code '" + code + "'");
  }
  auto v = parse_variant(need(meta, "model.variant"));
  if (!v) throw DataError("checkpoint meta: unknown variant");
  s.deep.variant = *v;
  s.deep.k = need_size(meta, "model.k");
  s.deep.dim = need_size(meta, "model.dim");
  try {
    s.deep.gamma = std::stod(need(meta, "model.gamma"));
  } catch (const std::exception&) {
    throw DataError("checkpoint meta: bad gamma");
  }
  s.deep.intra_norm = need_bool(meta, "model.intra_norm");
  s.deep.final_norm = need_bool(meta, "model.final_norm");
  s.deep.shared_means = need_bool(meta, "model.shared_means");
  s.num_classes = need_size(meta, "model.num_classes");
  s.experts = need_size(meta, "model.experts");
  s.input_gate = need_bool(meta, "model.input_gate");
  s.output_gate = need_bool(meta, "model.output_gate");
  s.freeze_pool = need_bool(meta, "model.freeze_pool");
  return s;
}

std::vector<ParamRef> Model::params() {
  std::vector<ParamRef> out;
  if (spec.pool == PoolKind::kDeep) out = pool.refs();
  for (auto& r : head.refs()) out.push_back(r);
  return out;
}

std::vector<ConstParamRef> Model::params() const {
  std::vector<ConstParamRef> out;
  for (auto& r : const_cast<Model*>(this)->params()) out.push_back({r.name, r.value});
  return out;
}

std::vector<ParamRef> Model::trainable() {
  std::vector<ParamRef> out;
  if (spec.pool == PoolKind::kDeep && !spec.freeze_pool) out = pool.refs();
  for (auto& r : head.refs()) out.push_back(r);
  return out;
}

Model make_model(const ModelSpec& spec, SplitMix64& rng, const PoolParams* pool) {
  if (spec.num_classes == 0) throw std::invalid_argument("model: num_classes must be positive");
  Model m;
  m.spec = spec;
  if (spec.pool == PoolKind::kDeep) {
    m.pool = pool ? *pool : random_pool_params(spec.deep, rng, 1.0);
  }
  m.head = random_head(spec.head(), rng, 1.0);
  return m;
}

std::vector<double> pooled_code(const Model& m, const Matrix& frames) {
  if (m.spec.pool == PoolKind::kAvg) {
    const VideoCode c = avg_pool(frames);
    auto f = c.values.flat();
    return {f.begin(), f.end()};
  }
  const PoolForward pf = forward(m.spec.deep, m.pool, frames);
  auto f = pf.code.flat();
  return {f.begin(), f.end()};
}

std::vector<double> predict(const Model& m, const Matrix& frames) {
  return forward_head(m.spec.head(), m.head, pooled_code(m, frames)).probs;
}

double example_loss(const Model& m, const Matrix& frames, std::span<const std::uint32_t> labels,
                    std::vector<Matrix>* grads) {
  const HeadSpec hs = m.spec.head();
  const bool deep = m.spec.pool == PoolKind::kDeep;
  PoolForward pf;
  std::vector<double> code;
  if (deep) {
    pf = forward(m.spec.deep, m.pool, frames);
    auto f = pf.code.flat();
    code.assign(f.begin(), f.end());
  } else {
    code = pooled_code(m, frames);
  }
  const HeadForward hf = forward_head(hs, m.head, code);
  BceResult bce = bce_loss(hf.probs, labels);
  if (!grads) return bce.loss;

  HeadGradients hg = backward_head(hs, m.head, hf.cache, bce.dprobs);
  grads->clear();
  if (deep && !m.spec.freeze_pool) {
    Matrix upstream(m.spec.deep.k, m.spec.deep.dim);
    std::copy(hg.input.begin(), hg.input.end(), upstream.flat().begin());
    PoolGradients pg = backward(m.spec.deep, m.pool, pf.cache, upstream);
    for (auto& r : pg.params.refs()) grads->push_back(std::move(*r.value));
  }
  for (auto& r : hg.params.refs()) grads->push_back(std::move(*r.value));
  return bce.loss;
}

}  // namespace sgmm
