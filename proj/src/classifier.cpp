// SPDX-License-Identifier: Apache-2.0
#include "sgmm/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "sgmm/numeric.hpp"
#include "sgmm/simd.hpp"

namespace sgmm {

std::vector<ParamRef> ClassifierHead::refs() {
  std::vector<ParamRef> out;
  auto add = [&](const char* name, Matrix& m) {
    if (!m.empty()) out.push_back({std::string("head.") + name, &m});
  };
  add("gate_w", gate_w);
  add("gate_b", gate_b);
  add("expert_gate_w", expert_gate_w);
  add("expert_gate_b", expert_gate_b);
  add("expert_w", expert_w);
  add("expert_b", expert_b);
  add("out_gate_w", out_gate_w);
  add("out_gate_b", out_gate_b);
  return out;
}

std::vector<ConstParamRef> ClassifierHead::refs() const {
  std::vector<ConstParamRef> out;
  for (auto& r : const_cast<ClassifierHead*>(this)->refs()) out.push_back({r.name, r.value});
  return out;
}

void validate(const HeadSpec& spec) {
  if (spec.input_dim == 0 || spec.num_classes == 0) {
    throw std::invalid_argument("head: input_dim and num_classes must be positive");
  }
  if (spec.experts == 0) throw std::invalid_argument("head: need at least one expert");
}

ClassifierHead make_head(const HeadSpec& spec) {
  validate(spec);
  const std::size_t in = spec.input_dim;
  const std::size_t ce = spec.num_classes * spec.experts;
  ClassifierHead h;
  if (spec.input_gate) {
    h.gate_w.resize(in, in);
    h.gate_b.resize(1, in);
  }
  h.expert_gate_w.resize(ce, in);
  h.expert_gate_b.resize(1, ce);
  h.expert_w.resize(ce, in);
  h.expert_b.resize(1, ce);
  if (spec.output_gate) {
    h.out_gate_w.resize(spec.num_classes, spec.num_classes);
    h.out_gate_b.resize(1, spec.num_classes);
  }
  return h;
}

ClassifierHead random_head(const HeadSpec& spec, SplitMix64& rng, double scale) {
  ClassifierHead h = make_head(spec);
  auto fill = [&](Matrix& m) {
    const double sd = scale / std::sqrt(static_cast<double>(m.cols()));
    for (double& v : m.flat()) v = rng.normal(0.0, sd);
  };
  fill(h.gate_w);
  fill(h.expert_gate_w);
  fill(h.expert_w);
  fill(h.out_gate_w);
  return h;
}

HeadForward forward_head(const HeadSpec& spec, const ClassifierHead& head,
                         std::span<const double> code) {
  if (code.size() != spec.input_dim) {
    throw std::invalid_argument("head: code length " + std::to_string(code.size()) +
                                " != input_dim " + std::to_string(spec.input_dim));
  }
  const std::size_t in = spec.input_dim;
  const std::size_t n_cls = spec.num_classes;
  const std::size_t n_exp = spec.experts;
  HeadForward out;
  HeadCache& c = out.cache;
  c.x.assign(code.begin(), code.end());
  if (spec.input_gate) {
    c.gate.resize(in);
    c.y.resize(in);
    for (std::size_t i = 0; i < in; ++i) {
      c.gate[i] = sigmoid(simd::dot(head.gate_w.row(i), c.x) + head.gate_b(0, i));
      c.y[i] = c.gate[i] * c.x[i];
    }
  } else {
    c.y = c.x;
  }
  c.mix.resize(n_cls * n_exp);
  c.expert.resize(n_cls * n_exp);
  c.moe.assign(n_cls, 0.0);
  for (std::size_t cl = 0; cl < n_cls; ++cl) {
    std::span<double> mix(c.mix.data() + cl * n_exp, n_exp);
    for (std::size_t e = 0; e < n_exp; ++e) {
      const std::size_t r = cl * n_exp + e;
      mix[e] = simd::dot(head.expert_gate_w.row(r), c.y) + head.expert_gate_b(0, r);
      c.expert[r] = sigmoid(simd::dot(head.expert_w.row(r), c.y) + head.expert_b(0, r));
    }
    softmax_inplace(mix);
    for (std::size_t e = 0; e < n_exp; ++e) c.moe[cl] += mix[e] * c.expert[cl * n_exp + e];
  }
  if (spec.output_gate) {
    c.out_gate.resize(n_cls);
    out.probs.resize(n_cls);
    for (std::size_t cl = 0; cl < n_cls; ++cl) {
      c.out_gate[cl] = sigmoid(simd::dot(head.out_gate_w.row(cl), c.moe) + head.out_gate_b(0, cl));
      out.probs[cl] = c.out_gate[cl] * c.moe[cl];
    }
  } else {
    out.probs = c.moe;
  }
  return out;
}

HeadGradients backward_head(const HeadSpec& spec, const ClassifierHead& head,
                            const HeadCache& c, std::span<const double> dprobs) {
  const std::size_t in = spec.input_dim;
  const std::size_t n_cls = spec.num_classes;
  const std::size_t n_exp = spec.experts;
  if (dprobs.size() != n_cls || c.x.size() != in || c.moe.size() != n_cls) {
    throw std::invalid_argument("head backward: cache/gradient shape mismatch");
  }
  HeadGradients g;
  g.params = make_head(spec);
  ClassifierHead& d = g.params;

  std::vector<double> dmoe(dprobs.begin(), dprobs.end());
  if (spec.output_gate) {
    for (std::size_t cl = 0; cl < n_cls; ++cl) {
      const double q = c.out_gate[cl];
      dmoe[cl] = dprobs[cl] * q;
    }
    for (std::size_t cl = 0; cl < n_cls; ++cl) {
      const double q = c.out_gate[cl];
      const double dz = dprobs[cl] * c.moe[cl] * q * (1.0 - q);
      if (dz == 0.0) continue;
      simd::axpy(dz, c.moe, d.out_gate_w.row(cl));
      d.out_gate_b(0, cl) += dz;
      simd::axpy(dz, head.out_gate_w.row(cl), dmoe);
    }
  }

  std::vector<double> dy(in, 0.0);
  for (std::size_t cl = 0; cl < n_cls; ++cl) {
    const double* mix = c.mix.data() + cl * n_exp;
    const double* h = c.expert.data() + cl * n_exp;
    double mean = 0.0;
    for (std::size_t e = 0; e < n_exp; ++e) mean += mix[e] * h[e];
    for (std::size_t e = 0; e < n_exp; ++e) {
      const std::size_t r = cl * n_exp + e;
      // d/d(gate logit): mix_e * (h_e - sum_j mix_j h_j)
      const double dz = dmoe[cl] * mix[e] * (h[e] - mean);
      const double da = dmoe[cl] * mix[e] * h[e] * (1.0 - h[e]);
      if (dz != 0.0) {
        simd::axpy(dz, c.y, d.expert_gate_w.row(r));
        d.expert_gate_b(0, r) += dz;
        simd::axpy(dz, head.expert_gate_w.row(r), dy);
      }
      if (da != 0.0) {
        simd::axpy(da, c.y, d.expert_w.row(r));
        d.expert_b(0, r) += da;
        simd::axpy(da, head.expert_w.row(r), dy);
      }
    }
  }

  if (!spec.input_gate) {
    g.input = std::move(dy);
    return g;
  }
  g.input.assign(in, 0.0);
  for (std::size_t i = 0; i < in; ++i) {
    const double s = c.gate[i];
    g.input[i] += dy[i] * s;
    const double dz = dy[i] * c.x[i] * s * (1.0 - s);
    if (dz == 0.0) continue;
    simd::axpy(dz, c.x, d.gate_w.row(i));
    d.gate_b(0, i) += dz;
    simd::axpy(dz, head.gate_w.row(i), g.input);
  }
  return g;
}

BceResult bce_loss(std::span<const double> probs, std::span<const std::uint32_t> labels) {
  const std::size_t n = probs.size();
  if (n == 0) throw std::invalid_argument("bce_loss: empty prediction");
  std::vector<char> target(n, 0);
  for (std::uint32_t l : labels) {
    if (l >= n) {
      throw std::invalid_argument("bce_loss: label " + std::to_string(l) + " out of range");
    }
    target[l] = 1;
  }
  BceResult r;
  r.dprobs.assign(n, 0.0);
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double raw = probs[i];
    const double p = std::clamp(raw, kProbClamp, 1.0 - kProbClamp);
    const bool clamped = p != raw;
    if (target[i]) {
      r.loss -= std::log(p);
      if (!clamped) r.dprobs[i] = -inv_n / p;
    } else {
      r.loss -= std::log1p(-p);
      if (!clamped) r.dprobs[i] = inv_n / (1.0 - p);
    }
  }
  r.loss *= inv_n;
  return r;
}

}  // namespace sgmm
