// Copyright 2026 The kdcap Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Parameter counts, analytic FLOPs and latency benchmarks.
//
// FLOPs count a multiply-accumulate as two operations:
//   conv1d     2 * T' * Cout * Cin * k
//   linear     2 * rows * in * out
//   attention  2 * Lq * Lk * d for the scores plus the same for the values
// Norms, activations, softmax and embedding lookups are listed but cost
// nothing. Decoding is a single beam that re-runs the decoder over the whole
// prefix at every step (no key/value reuse).

#pragma once

#include <chrono>
#include <cstdint>
#include <string>
#include <vector>

#include "kdcap/json.hpp"

#include "kdcap/decode.hpp"

namespace kdcap {

struct UnsupportedLayer : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ParamCount {
  std::uint64_t total = 0, encoder = 0, decoder = 0, projection = 0;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ParamCount, total, encoder, decoder, projection)

template <class S>
ParamCount count_params(const ParamStore<S>& store) {
  ParamCount c;
  for (const auto& p : store) {
    const auto n = static_cast<std::uint64_t>(p.value.size());
    c.total += n;
    switch (p.component) {
      case Component::encoder: c.encoder += n; break;
      case Component::decoder: c.decoder += n; break;
      case Component::projection: c.projection += n; break;
    }
  }
  return c;
}

template <class S>
ParamCount count_params(const CaptionerModel<S>& model) {
  return count_params(model.params());
}

enum class LayerKind { conv1d, linear, attention, norm, elementwise, embedding, recurrent };

// One layer application. Field use depends on the kind:
//   conv1d     rows = T', in = Cin, out = Cout, kernel = k
//   linear     rows = applications, in, out
//   attention  rows = Lq, keys = Lk, in = d
struct LayerOp {
  LayerKind kind = LayerKind::linear;
  std::string name;
  std::uint64_t rows = 1, in = 0, out = 0, kernel = 1, keys = 0;
  bool encoder = false;
};

inline std::uint64_t layer_flops(const LayerOp& op) {
  switch (op.kind) {
    case LayerKind::conv1d: return 2 * op.rows * op.out * op.in * op.kernel;
    case LayerKind::linear: return 2 * op.rows * op.in * op.out;
    case LayerKind::attention: return 2 * (2 * op.rows * op.keys * op.in);
    case LayerKind::norm:
    case LayerKind::elementwise:
    case LayerKind::embedding: return 0;
    default: break;
  }
  throw UnsupportedLayer("count_flops: no cost model for layer '" + op.name + "'");
}

struct FlopCount {
  std::uint64_t total = 0, encoder = 0, decoder = 0;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(FlopCount, total, encoder, decoder)

inline FlopCount count_flops(const std::vector<LayerOp>& ops) {
  FlopCount f;
  for (const auto& op : ops) {
    auto n = layer_flops(op);
    f.total += n;
    (op.encoder ? f.encoder : f.decoder) += n;
  }
  return f;
}

// Layer applications for one clip of t_in frames decoded to l_out tokens.
template <class S>
std::vector<LayerOp> layer_ops(const CaptionerModel<S>& model, std::uint64_t t_in, std::uint64_t l_out) {
  if (t_in < 1 || l_out < 1) throw DomainError("count_flops: T_in and L_out must be >= 1");
  const auto& cfg = model.config();
  std::vector<LayerOp> ops;
  std::uint64_t t = t_in;
  std::uint64_t cin = static_cast<std::uint64_t>(cfg.encoder.in_channels());
  for (std::size_t i = 0; i < model.conv_layers().size(); ++i) {
    const auto& c = model.conv_layers()[i].cfg;
    t = conv_output_length(t, c.kernel, c.stride, c.padding);
    ops.push_back({LayerKind::conv1d, "encoder.conv" + std::to_string(i), t, cin,
                   static_cast<std::uint64_t>(c.channels), static_cast<std::uint64_t>(c.kernel), 0, true});
    if (i + 1 < model.conv_layers().size()) ops.push_back({LayerKind::elementwise, "encoder.relu", t, 0, 0, 1, 0, true});
    cin = static_cast<std::uint64_t>(c.channels);
  }
  if (cfg.kd_head == EncKind::mse)
    ops.push_back({LayerKind::linear, "kd.proj_stu", t, cin, static_cast<std::uint64_t>(cfg.teacher_dim), 1, 0, true});

  const auto& dc = cfg.decoder;
  const auto d = static_cast<std::uint64_t>(dc.dim), ff = static_cast<std::uint64_t>(dc.ff_dim);
  const auto mem = static_cast<std::uint64_t>(cfg.memory_dim()), v = static_cast<std::uint64_t>(dc.vocab_size);
  for (std::uint64_t step = 1; step <= l_out; ++step) {
    const std::uint64_t l = step;  // prefix length fed at this step
    ops.push_back({LayerKind::embedding, "decoder.embed", l, 0, d, 1, 0, false});
    for (int li = 0; li < dc.layers; ++li) {
      const std::string p = "decoder.layer" + std::to_string(li) + ".";
      ops.push_back({LayerKind::norm, p + "ln_self", l, d, d, 1, 0, false});
      for (const char* n : {"self_q", "self_k", "self_v"}) ops.push_back({LayerKind::linear, p + n, l, d, d, 1, 0, false});
      ops.push_back({LayerKind::attention, p + "self_attn", l, d, 0, 1, l, false});
      ops.push_back({LayerKind::linear, p + "self_o", l, d, d, 1, 0, false});
      ops.push_back({LayerKind::norm, p + "ln_cross", l, d, d, 1, 0, false});
      ops.push_back({LayerKind::linear, p + "cross_q", l, d, d, 1, 0, false});
      ops.push_back({LayerKind::linear, p + "cross_k", t, mem, d, 1, 0, false});
      ops.push_back({LayerKind::linear, p + "cross_v", t, mem, d, 1, 0, false});
      ops.push_back({LayerKind::attention, p + "cross_attn", l, d, 0, 1, t, false});
      ops.push_back({LayerKind::linear, p + "cross_o", l, d, d, 1, 0, false});
      ops.push_back({LayerKind::norm, p + "ln_ff", l, d, d, 1, 0, false});
      ops.push_back({LayerKind::linear, p + "ff1", l, d, ff, 1, 0, false});
      ops.push_back({LayerKind::elementwise, p + "relu", l, ff, ff, 1, 0, false});
      ops.push_back({LayerKind::linear, p + "ff2", l, ff, d, 1, 0, false});
    }
    ops.push_back({LayerKind::norm, "decoder.ln_final", l, d, d, 1, 0, false});
    ops.push_back({LayerKind::linear, "decoder.out", l, d, v, 1, 0, false});
    ops.push_back({LayerKind::elementwise, "decoder.log_softmax", l, v, v, 1, 0, false});
  }
  return ops;
}

template <class S>
FlopCount count_flops(const CaptionerModel<S>& model, std::uint64_t t_in, std::uint64_t l_out) {
  return count_flops(layer_ops(model, t_in, l_out));
}

struct EfficiencyReport {
  ParamCount params;
  FlopCount flops;
  std::uint64_t t_in = 0, l_out = 0;
  int runs = 0;
  int beam_size = 3;
  double latency_mean = 0;
  double latency_cv = 0;
  std::vector<double> latency_samples;
  std::string flop_protocol = "2 FLOPs per multiply-accumulate; single beam; decoder recomputes the full prefix each step";
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(EfficiencyReport, params, flops, t_in, l_out, runs, beam_size, latency_mean,
                                   latency_cv, latency_samples, flop_protocol)

// Wall-clock seconds for encode + beam decode of exactly l_out tokens, after
// one discarded warmup run.
template <class S>
EfficiencyReport bench_latency(const CaptionerModel<S>& model, std::uint64_t t_in, std::uint64_t l_out,
                               int runs = 10, int beam_size = 3) {
  using Clock = std::chrono::steady_clock;
  if (runs < 1) throw DomainError("bench_latency: runs must be >= 1");
  if (static_cast<double>(Clock::period::num) / Clock::period::den > 1e-6)
    throw DomainError("bench_latency: clock resolution coarser than 1 microsecond");
  if (l_out > static_cast<std::uint64_t>(model.config().decoder.max_len))
    throw DomainError("bench_latency: L_out exceeds the decoder's maximum length");

  EfficiencyReport r;
  r.params = count_params(model);
  r.flops = count_flops(model, t_in, l_out);
  r.t_in = t_in;
  r.l_out = l_out;
  r.runs = runs;
  r.beam_size = beam_size;

  Tensor<float> features({static_cast<std::size_t>(t_in), static_cast<std::size_t>(model.config().encoder.input_dim)});
  Rng rng(derive_seed(0, "bench-input"));
  std::normal_distribution<float> nd(0.0f, 1.0f);
  for (auto& x : features.data) x = nd(rng);
  DecodeConfig dc{beam_size, static_cast<int>(l_out), static_cast<int>(l_out), true};

  volatile double sink = 0;
  for (int i = 0; i <= runs; ++i) {
    auto t0 = Clock::now();
    sink = sink + decode_clip(model, features, dc).log_prob;
    auto t1 = Clock::now();
    if (i > 0) r.latency_samples.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  double sum = 0;
  for (double s : r.latency_samples) sum += s;
  r.latency_mean = sum / static_cast<double>(r.latency_samples.size());
  double var = 0;
  for (double s : r.latency_samples) var += (s - r.latency_mean) * (s - r.latency_mean);
  r.latency_cv = r.latency_samples.size() > 1 && r.latency_mean > 0
                     ? std::sqrt(var / static_cast<double>(r.latency_samples.size() - 1)) / r.latency_mean
                     : 0.0;
  return r;
}

}  // namespace kdcap
