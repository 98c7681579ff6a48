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

// Encoder-decoder captioner used for both teacher and student.
//
// Encoder: strided 1-D convolutions over time. The input is the T x F feature
// matrix with a few fixed time channels appended so frame embeddings carry
// their position; every block but the last is followed by ReLU.
//
// Decoder: pre-norm transformer (causal self-attention, cross-attention over
// the encoder frames, feed-forward), learned token and position embeddings,
// untied output projection. No positional encoding is added to the encoder
// frames on the decoder side.
//
// KD heads: a contrastive student carries Proj_tea and Proj_stu (used only
// for training); an MSE student carries Proj_stu, which also maps every frame
// into the teacher's embedding space before the decoder sees it.

#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include "kdcap/json.hpp"

#include "kdcap/autograd.hpp"
#include "kdcap/synthworld.hpp"

namespace kdcap {

enum class EncKind { none, contrastive, mse };

NLOHMANN_JSON_SERIALIZE_ENUM(EncKind, {{EncKind::none, "none"},
                                       {EncKind::contrastive, "contrastive"},
                                       {EncKind::mse, "mse"}})

inline const char* enc_kind_name(EncKind k) {
  switch (k) {
    case EncKind::none: return "none";
    case EncKind::contrastive: return "contrastive";
    case EncKind::mse: return "mse";
  }
  return "?";
}

inline EncKind parse_enc_kind(const std::string& s) {
  if (s == "none") return EncKind::none;
  if (s == "contrastive") return EncKind::contrastive;
  if (s == "mse") return EncKind::mse;
  throw ConfigError("unknown enc_kind '" + s + "' (expected none|contrastive|mse)");
}

struct ConvBlockConfig {
  int channels = 64;
  int kernel = 3;
  int stride = 1;
  int padding = 1;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ConvBlockConfig, channels, kernel, stride, padding)

struct EncoderConfig {
  int input_dim = 16;
  int time_channels = 4;
  std::vector<ConvBlockConfig> blocks;

  int in_channels() const { return input_dim + time_channels; }
  int d_enc() const { return blocks.empty() ? 0 : blocks.back().channels; }
  int downsample() const {
    int f = 1;
    for (const auto& b : blocks) f *= b.stride;
    return f;
  }
  int output_frames(int t_in) const {
    std::size_t t = static_cast<std::size_t>(t_in);
    for (const auto& b : blocks) t = conv_output_length(t, b.kernel, b.stride, b.padding);
    return static_cast<int>(t);
  }
  void validate(int t_in) const {
    if (blocks.empty()) throw ConfigError("encoder: at least one block required");
    for (const auto& b : blocks)
      if (b.channels <= 0 || b.kernel <= 0 || b.stride <= 0 || b.padding < 0)
        throw ConfigError("encoder: block fields must be positive");
    int t = output_frames(t_in);
    if (t < 4) throw ConfigError("encoder: downsampling leaves " + std::to_string(t) + " < 4 frames");
  }
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(EncoderConfig, input_dim, time_channels, blocks)

struct DecoderConfig {
  int layers = 2;
  int dim = 64;
  int heads = 4;
  int ff_dim = 128;
  int vocab_size = 34;
  int max_len = 20;

  void validate() const {
    if (layers < 1 || dim < 1 || heads < 1 || ff_dim < 1 || vocab_size < 4 || max_len < 1)
      throw ConfigError("decoder: fields must be positive");
    if (dim % heads != 0) throw ConfigError("decoder: dim must be divisible by heads");
  }
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(DecoderConfig, layers, dim, heads, ff_dim, vocab_size, max_len)

struct ModelConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;
  EncKind kd_head = EncKind::none;
  int teacher_dim = 128;  // d_enc of the teacher the heads align to
  int kd_dim = 64;        // shared space of the contrastive heads
  bool identity_projection_init = false;

  // Width of the frames the decoder attends over.
  int memory_dim() const { return kd_head == EncKind::mse ? teacher_dim : encoder.d_enc(); }
  void validate(int t_in) const {
    encoder.validate(t_in);
    decoder.validate();
    if (kd_head != EncKind::none && (teacher_dim < 1 || kd_dim < 1))
      throw ConfigError("model: projection dims must be positive");
  }
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ModelConfig, encoder, decoder, kd_head, teacher_dim, kd_dim,
                                   identity_projection_init)

inline ModelConfig teacher_config() {
  ModelConfig c;
  c.encoder.blocks = {{64, 4, 2, 1}, {128, 4, 2, 1}, {128, 3, 1, 1}, {128, 3, 1, 1}};
  c.decoder = {2, 128, 4, 512, vocab().size(), 20};
  c.teacher_dim = 128;
  return c;
}

inline ModelConfig student_config(EncKind head = EncKind::none) {
  ModelConfig c;
  c.encoder.blocks = {{32, 5, 5, 0}, {64, 3, 1, 1}};
  c.decoder = {2, 64, 4, 64, vocab().size(), 20};
  c.kd_head = head;
  c.teacher_dim = 128;
  c.kd_dim = 64;
  return c;
}

// Fixed time channels appended to every input frame: a ramp in [-1, 1]
// followed by cos/sin pairs of increasing frequency.
inline double time_channel(int channel, int t, int frames) {
  double x = frames > 1 ? static_cast<double>(t) / (frames - 1) : 0.0;
  if (channel == 0) return 2.0 * x - 1.0;
  int k = (channel + 1) / 2;
  return channel % 2 == 1 ? std::cos(std::numbers::pi * k * x) : std::sin(std::numbers::pi * k * x);
}

// Teacher-forcing layout for a batch of BOS...EOS sequences, padded to the
// longest one. Position l of sequence b predicts token l+1 from tokens <= l.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<int> inputs;
  std::vector<int> targets;
  std::vector<int> positions;
  std::vector<char> mask;
};

inline TokenBatch make_token_batch(const std::vector<const TokenSequence*>& seqs,
                                   std::size_t max_positions) {
  TokenBatch tb;
  tb.batch = seqs.size();
  for (const auto* s : seqs) {
    if (s->size() < 2 || s->front() != kBos || s->back() != kEos)
      throw VocabularyError("teacher forcing needs BOS-prefixed, EOS-terminated sequences");
    tb.length = std::max(tb.length, s->size() - 1);
  }
  if (tb.length > max_positions)
    throw DimensionError("caption of " + std::to_string(tb.length) + " steps exceeds " +
                         std::to_string(max_positions) + " positions");
  const std::size_t n = tb.batch * tb.length;
  tb.inputs.assign(n, kPad);
  tb.targets.assign(n, kPad);
  tb.positions.resize(n);
  tb.mask.assign(n, 0);
  for (std::size_t b = 0; b < tb.batch; ++b) {
    const auto& s = *seqs[b];
    for (std::size_t l = 0; l < tb.length; ++l) {
      tb.positions[b * tb.length + l] = static_cast<int>(l);
      if (l + 1 < s.size()) {
        tb.inputs[b * tb.length + l] = s[l];
        tb.targets[b * tb.length + l] = s[l + 1];
        tb.mask[b * tb.length + l] = 1;
      }
    }
  }
  return tb;
}

template <class S>
struct LinearLayer {
  Parameter<S>* w = nullptr;
  Parameter<S>* b = nullptr;
  Var<S> operator()(Graph<S>& g, Var<S> x) const { return linear(x, g.param(*w), g.param(*b)); }
  int in_dim() const { return static_cast<int>(w->value.cols()); }
  int out_dim() const { return static_cast<int>(w->value.rows()); }
};

template <class S>
struct NormLayer {
  Parameter<S>* gamma = nullptr;
  Parameter<S>* beta = nullptr;
  Var<S> operator()(Graph<S>& g, Var<S> x) const {
    return layer_norm(x, g.param(*gamma), g.param(*beta));
  }
};

template <class S>
struct ConvLayer {
  Parameter<S>* w = nullptr;
  Parameter<S>* b = nullptr;
  ConvBlockConfig cfg;
};

template <class S>
struct DecoderLayer {
  NormLayer<S> ln_self, ln_cross, ln_ff;
  LinearLayer<S> self_q, self_k, self_v, self_o;
  LinearLayer<S> cross_q, cross_k, cross_v, cross_o;
  LinearLayer<S> ff1, ff2;
};

template <class S>
class CaptionerModel {
 public:
  CaptionerModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)), store_(std::make_unique<ParamStore<S>>()) {
    cfg_.encoder.validate(std::max(4 * cfg_.encoder.downsample(), 4));
    cfg_.decoder.validate();
    build(seed);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<S>& params() { return *store_; }
  const ParamStore<S>& params() const { return *store_; }

  // Raw encoder frames for a batch of clips: [B*T' x d_enc].
  Var<S> encode(Graph<S>& g, const std::vector<const Tensor<float>*>& clips) const {
    if (clips.empty()) throw DimensionError("encode: empty batch");
    const std::size_t t = clips.front()->rows();
    const std::size_t f = static_cast<std::size_t>(cfg_.encoder.input_dim);
    const std::size_t p = static_cast<std::size_t>(cfg_.encoder.time_channels);
    Tensor<S> x({clips.size() * t, f + p});
    for (std::size_t b = 0; b < clips.size(); ++b) {
      const auto& c = *clips[b];
      if (c.rows() != t || c.cols() != f)
        throw DimensionError("encode: clip " + shape_str(c.shape) + " does not match T x " +
                             std::to_string(f));
      for (std::size_t i = 0; i < t; ++i) {
        S* row = &x.data[(b * t + i) * (f + p)];
        for (std::size_t j = 0; j < f; ++j) row[j] = static_cast<S>(c(i, j));
        for (std::size_t j = 0; j < p; ++j)
          row[f + j] = static_cast<S>(time_channel(static_cast<int>(j), static_cast<int>(i), static_cast<int>(t)));
      }
    }
    Var<S> h = g.constant(std::move(x));
    std::size_t len = t;
    for (std::size_t i = 0; i < conv_.size(); ++i) {
      const auto& c = conv_[i];
      h = conv1d(h, g.param(*c.w), g.param(*c.b), clips.size(), len,
                 static_cast<std::size_t>(c.cfg.stride), static_cast<std::size_t>(c.cfg.padding));
      len = conv_output_length(len, c.cfg.kernel, c.cfg.stride, c.cfg.padding);
      if (i + 1 < conv_.size()) h = relu(h);
    }
    return h;
  }

  std::size_t encoded_frames(std::size_t t_in) const {
    return static_cast<std::size_t>(cfg_.encoder.output_frames(static_cast<int>(t_in)));
  }

  // Frames the decoder attends over: Proj_stu(e_t) for an MSE student, the
  // raw frames otherwise.
  Var<S> decoder_memory(Graph<S>& g, Var<S> frames) const {
    if (cfg_.kd_head == EncKind::mse) return proj_stu_(g, frames);
    return frames;
  }

  // Teacher-forced log-probabilities [B*L x V] for a token batch.
  Var<S> decode_log_probs(Graph<S>& g, Var<S> memory, std::size_t mem_frames,
                          const TokenBatch& tb) const {
    const std::size_t batch = tb.batch, len = tb.length;
    if (memory.rows() != batch * mem_frames)
      throw DimensionError("decode: memory rows do not match batch layout");
    if (memory.cols() != static_cast<std::size_t>(cfg_.memory_dim()))
      throw DimensionError("decode: memory dim " + std::to_string(memory.cols()) + " != " +
                           std::to_string(cfg_.memory_dim()));
    for (int id : tb.inputs)
      if (id < 0 || id >= cfg_.decoder.vocab_size)
        throw VocabularyError("token id " + std::to_string(id) + " >= vocabulary size");
    const std::size_t heads = static_cast<std::size_t>(cfg_.decoder.heads);
    Var<S> x = add(embedding(g.param(*tok_emb_), tb.inputs), embedding(g.param(*pos_emb_), tb.positions));
    for (const auto& l : layers_) {
      Var<S> h = l.ln_self(g, x);
      Var<S> a = attention(l.self_q(g, h), l.self_k(g, h), l.self_v(g, h), batch, len, len, heads, true);
      x = add(x, l.self_o(g, a));
      h = l.ln_cross(g, x);
      a = attention(l.cross_q(g, h), l.cross_k(g, memory), l.cross_v(g, memory), batch, len,
                    mem_frames, heads, false);
      x = add(x, l.cross_o(g, a));
      h = l.ln_ff(g, x);
      x = add(x, l.ff2(g, relu(l.ff1(g, h))));
    }
    return log_softmax_rows(out_(g, ln_final_(g, x)));
  }

  void set_frozen(Component c, bool frozen) {
    for (auto& p : *store_)
      if (p.component == c) p.frozen = frozen;
  }

  bool has_head(EncKind k) const { return cfg_.kd_head == k; }
  const LinearLayer<S>& proj_stu() const { return proj_stu_; }
  const LinearLayer<S>& proj_tea() const { return proj_tea_; }

  // Read-only views used by the incremental decoder and the FLOP counter.
  const std::vector<ConvLayer<S>>& conv_layers() const { return conv_; }
  const std::vector<DecoderLayer<S>>& decoder_layers() const { return layers_; }
  const Parameter<S>& token_embedding() const { return *tok_emb_; }
  const Parameter<S>& position_embedding() const { return *pos_emb_; }
  const NormLayer<S>& final_norm() const { return ln_final_; }
  const LinearLayer<S>& output_layer() const { return out_; }

 private:
  Tensor<S> normal(const std::string& name, Shape shape, double sd) {
    Rng rng(derive_seed(seed_, name));
    std::normal_distribution<double> dist(0.0, sd);
    Tensor<S> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<S>(dist(rng));
    return t;
  }

  LinearLayer<S> make_linear(const std::string& name, Component c, int in, int out, bool identity = false) {
    LinearLayer<S> l;
    Tensor<S> w;
    if (identity && in == out) {
      w = Tensor<S>({static_cast<std::size_t>(out), static_cast<std::size_t>(in)});
      for (int i = 0; i < in; ++i) w(i, i) = S(1);
    } else {
      w = normal(name + ".w", {static_cast<std::size_t>(out), static_cast<std::size_t>(in)}, 1.0 / std::sqrt(in));
    }
    l.w = &store_->add(name + ".w", c, std::move(w));
    l.b = &store_->add(name + ".b", c, Tensor<S>({static_cast<std::size_t>(out)}));
    return l;
  }

  NormLayer<S> make_norm(const std::string& name, int dim) {
    NormLayer<S> n;
    n.gamma = &store_->add(name + ".g", Component::decoder, Tensor<S>({static_cast<std::size_t>(dim)}, S(1)));
    n.beta = &store_->add(name + ".b", Component::decoder, Tensor<S>({static_cast<std::size_t>(dim)}));
    return n;
  }

  void build(std::uint64_t seed) {
    seed_ = seed;
    int cin = cfg_.encoder.in_channels();
    for (std::size_t i = 0; i < cfg_.encoder.blocks.size(); ++i) {
      const auto& bc = cfg_.encoder.blocks[i];
      std::string name = "encoder.conv" + std::to_string(i);
      bool last = i + 1 == cfg_.encoder.blocks.size();
      double fan_in = static_cast<double>(cin) * bc.kernel;
      double sd = last ? std::sqrt(1.0 / fan_in) : std::sqrt(2.0 / fan_in);
      ConvLayer<S> c;
      c.cfg = bc;
      c.w = &store_->add(name + ".w", Component::encoder,
                         normal(name + ".w", {static_cast<std::size_t>(bc.channels), static_cast<std::size_t>(cin),
                                              static_cast<std::size_t>(bc.kernel)}, sd));
      c.b = &store_->add(name + ".b", Component::encoder, Tensor<S>({static_cast<std::size_t>(bc.channels)}));
      conv_.push_back(c);
      cin = bc.channels;
    }

    const auto& dc = cfg_.decoder;
    const int d = dc.dim, mem = cfg_.memory_dim();
    tok_emb_ = &store_->add("decoder.tok_emb", Component::decoder,
                            normal("decoder.tok_emb", {static_cast<std::size_t>(dc.vocab_size), static_cast<std::size_t>(d)}, 0.1));
    pos_emb_ = &store_->add("decoder.pos_emb", Component::decoder,
                            normal("decoder.pos_emb", {static_cast<std::size_t>(dc.max_len + 1), static_cast<std::size_t>(d)}, 0.1));
    for (int i = 0; i < dc.layers; ++i) {
      std::string p = "decoder.layer" + std::to_string(i) + ".";
      DecoderLayer<S> l;
      l.ln_self = make_norm(p + "ln_self", d);
      l.self_q = make_linear(p + "self_q", Component::decoder, d, d);
      l.self_k = make_linear(p + "self_k", Component::decoder, d, d);
      l.self_v = make_linear(p + "self_v", Component::decoder, d, d);
      l.self_o = make_linear(p + "self_o", Component::decoder, d, d);
      l.ln_cross = make_norm(p + "ln_cross", d);
      l.cross_q = make_linear(p + "cross_q", Component::decoder, d, d);
      l.cross_k = make_linear(p + "cross_k", Component::decoder, mem, d);
      l.cross_v = make_linear(p + "cross_v", Component::decoder, mem, d);
      l.cross_o = make_linear(p + "cross_o", Component::decoder, d, d);
      l.ln_ff = make_norm(p + "ln_ff", d);
      l.ff1 = make_linear(p + "ff1", Component::decoder, d, dc.ff_dim);
      l.ff2 = make_linear(p + "ff2", Component::decoder, dc.ff_dim, d);
      layers_.push_back(l);
    }
    ln_final_ = make_norm("decoder.ln_final", d);
    out_ = make_linear("decoder.out", Component::decoder, d, dc.vocab_size);

    const int ds = cfg_.encoder.d_enc();
    if (cfg_.kd_head == EncKind::contrastive) {
      proj_tea_ = make_linear("kd.proj_tea", Component::projection, cfg_.teacher_dim, cfg_.kd_dim,
                              cfg_.identity_projection_init);
      proj_stu_ = make_linear("kd.proj_stu", Component::projection, ds, cfg_.kd_dim,
                              cfg_.identity_projection_init);
    } else if (cfg_.kd_head == EncKind::mse) {
      proj_stu_ = make_linear("kd.proj_stu", Component::projection, ds, cfg_.teacher_dim,
                              cfg_.identity_projection_init);
    }
  }

  ModelConfig cfg_;
  std::unique_ptr<ParamStore<S>> store_;
  std::uint64_t seed_ = 0;
  std::vector<ConvLayer<S>> conv_;
  Parameter<S>* tok_emb_ = nullptr;
  Parameter<S>* pos_emb_ = nullptr;
  std::vector<DecoderLayer<S>> layers_;
  NormLayer<S> ln_final_;
  LinearLayer<S> out_;
  LinearLayer<S> proj_tea_, proj_stu_;
};

// ---------------------------------------------------------------------------
// Single-clip convenience API.

template <class S>
using EmbeddingSequence = Tensor<S>;

template <class S>
EmbeddingSequence<S> encode(const CaptionerModel<S>& model, const Tensor<float>& features) {
  Graph<S> g(false);
  return model.encode(g, {&features}).value();
}

// Per-frame projection the decoder consumes. Identity for models without an
// MSE head; `warned` reports a call on a contrastive model, whose projection
// is training-only.
template <class S>
EmbeddingSequence<S> apply_inference_projection(const CaptionerModel<S>& model,
                                                const EmbeddingSequence<S>& emb,
                                                bool* warned = nullptr) {
  if (warned) *warned = model.config().kd_head != EncKind::mse;
  if (model.config().kd_head != EncKind::mse) return emb;
  Graph<S> g(false);
  return model.proj_stu()(g, g.constant(emb)).value();
}

// Rows are next-token distributions for each prefix of `tokens`.
template <class S>
Tensor<S> teacher_forcing_probs(const CaptionerModel<S>& model, const EmbeddingSequence<S>& memory,
                                const TokenSequence& tokens) {
  Graph<S> g(false);
  auto tb = make_token_batch({&tokens}, static_cast<std::size_t>(model.config().decoder.max_len + 1));
  auto lp = model.decode_log_probs(g, g.constant(memory), memory.rows(), tb);
  Tensor<S> p = lp.value();
  for (auto& v : p.data) v = std::exp(v);
  return p;
}

template <class S>
void set_frozen(CaptionerModel<S>& model, Component component, bool frozen) {
  model.set_frozen(component, frozen);
}

// ---------------------------------------------------------------------------
// Incremental (KV-cached) decoding for inference. Mirrors decode_log_probs
// position by position without building a graph.

template <class S>
class StepDecoder {
 public:
  using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

  struct State {
    int position = 0;  // tokens consumed so far
    std::vector<RowMat<S>> keys, values;  // per layer, one row per position
    std::vector<double> log_probs;  // next-token distribution
  };

  // `memory` is the decoder memory for one clip: [T' x memory_dim].
  StepDecoder(const CaptionerModel<S>& model, const Tensor<S>& memory) : m_(model) {
    const auto& dc = m_.config().decoder;
    d_ = dc.dim;
    heads_ = dc.heads;
    dh_ = d_ / heads_;
    for (const auto& l : m_.decoder_layers()) {
      cross_k_.push_back(project(memory.mat(), l.cross_k));
      cross_v_.push_back(project(memory.mat(), l.cross_v));
    }
  }

  int vocab_size() const { return m_.config().decoder.vocab_size; }
  int max_positions() const { return m_.config().decoder.max_len + 1; }

  State start() const {
    State s;
    s.keys.assign(m_.decoder_layers().size(), RowMat<S>(0, d_));
    s.values.assign(m_.decoder_layers().size(), RowMat<S>(0, d_));
    return extend(s, kBos);
  }

  const std::vector<double>& log_probs(const State& s) const { return s.log_probs; }

  State extend(const State& prev, int token) const {
    if (prev.position >= max_positions())
      throw DimensionError("decode: exceeded maximum positions");
    State s = prev;
    const auto& tok = m_.token_embedding().value;
    const auto& pos = m_.position_embedding().value;
    Vec x(d_);
    for (int j = 0; j < d_; ++j) x(j) = tok(token, j) + pos(s.position, j);
    const auto& layers = m_.decoder_layers();
    for (std::size_t li = 0; li < layers.size(); ++li) {
      const auto& l = layers[li];
      Vec h = norm(x, l.ln_self);
      Vec q = apply(l.self_q, h), k = apply(l.self_k, h), v = apply(l.self_v, h);
      auto& K = s.keys[li];
      auto& V = s.values[li];
      K.conservativeResize(K.rows() + 1, Eigen::NoChange);
      V.conservativeResize(V.rows() + 1, Eigen::NoChange);
      K.row(K.rows() - 1) = k.transpose();
      V.row(V.rows() - 1) = v.transpose();
      x += apply(l.self_o, attend(q, K, V));
      h = norm(x, l.ln_cross);
      q = apply(l.cross_q, h);
      x += apply(l.cross_o, attend(q, cross_k_[li], cross_v_[li]));
      h = norm(x, l.ln_ff);
      Vec f = apply(l.ff1, h).cwiseMax(S(0));
      x += apply(l.ff2, f);
    }
    Vec logits = apply(m_.output_layer(), norm(x, m_.final_norm()));
    S mx = logits.maxCoeff();
    S z = (logits.array() - mx).exp().sum();
    S lz = mx + std::log(z);
    s.log_probs.resize(logits.size());
    for (int i = 0; i < logits.size(); ++i) s.log_probs[i] = static_cast<double>(logits(i) - lz);
    s.position += 1;
    return s;
  }

 private:
  static RowMat<S> project(const ConstMatMap<S>& x, const LinearLayer<S>& l) {
    RowMat<S> out = x * l.w->value.mat().transpose();
    out.rowwise() += detail::row_vec(l.b->value);
    return out;
  }
  static Vec apply(const LinearLayer<S>& l, const Vec& x) {
    Vec y = l.w->value.mat() * x;
    for (int i = 0; i < y.size(); ++i) y(i) += l.b->value.data[i];
    return y;
  }
  static Vec norm(const Vec& x, const NormLayer<S>& n) {
    S mean = x.mean();
    S var = (x.array() - mean).square().mean();
    S is = S(1) / std::sqrt(var + S(1e-5));
    Vec y(x.size());
    for (int i = 0; i < x.size(); ++i)
      y(i) = (x(i) - mean) * is * n.gamma->value.data[i] + n.beta->value.data[i];
    return y;
  }
  Vec attend(const Vec& q, const RowMat<S>& K, const RowMat<S>& V) const {
    Vec out(d_);
    const S sc = S(1) / std::sqrt(S(dh_));
    const auto n = K.rows();
    Vec w(n);
    for (int h = 0; h < heads_; ++h) {
      auto qh = q.segment(h * dh_, dh_);
      w = (K.middleCols(h * dh_, dh_) * qh) * sc;
      S mx = w.maxCoeff();
      w = (w.array() - mx).exp();
      w /= w.sum();
      out.segment(h * dh_, dh_) = V.middleCols(h * dh_, dh_).transpose() * w;
    }
    return out;
  }

  const CaptionerModel<S>& m_;
  int d_ = 0, heads_ = 0, dh_ = 0;
  std::vector<RowMat<S>> cross_k_, cross_v_;
};

// ---------------------------------------------------------------------------
// Checkpoints: [u64 LE manifest length][manifest JSON][LE payload].
// The manifest holds the config and a tensor table {name, shape, dtype,
// offset}. Model checkpoints are always f32; training snapshots of a 64-bit
// run store f64 so a resumed run continues bit-exactly. Loading and
// re-saving reproduces the bytes exactly.

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<double> data;  // values representable in `dtype`
  bool f64 = false;
};

inline std::string pack_tensors(const nlohmann::json& meta, const std::vector<NamedTensor>& tensors) {
  nlohmann::json manifest;
  manifest["format"] = "kdcap-checkpoint";
  manifest["version"] = 1;
  manifest["meta"] = meta;
  nlohmann::json table = nlohmann::json::array();
  std::string payload;
  for (const auto& t : tensors) {
    table.push_back({{"name", t.name}, {"shape", t.shape}, {"dtype", t.f64 ? "f64" : "f32"}, {"offset", payload.size()}});
    for (double v : t.data) {
      if (t.f64) append_le_f64(payload, v);
      else append_le_f32(payload, static_cast<float>(v));
    }
  }
  manifest["tensors"] = table;
  std::string header = manifest.dump();
  std::string out;
  append_le_u64(out, header.size());
  out += header;
  out += payload;
  return out;
}

inline std::pair<nlohmann::json, std::vector<NamedTensor>> unpack_tensors(const std::string& bytes) {
  if (bytes.size() < 8) throw MissingArtifact("checkpoint truncated");
  std::uint64_t hl = read_le_u64(bytes.data());
  if (8 + hl > bytes.size()) throw MissingArtifact("checkpoint header truncated");
  auto manifest = nlohmann::json::parse(bytes.substr(8, hl));
  if (manifest.value("format", "") != "kdcap-checkpoint") throw MissingArtifact("not a kdcap checkpoint");
  const char* payload = bytes.data() + 8 + hl;
  const std::size_t psize = bytes.size() - 8 - hl;
  std::vector<NamedTensor> out;
  for (const auto& e : manifest.at("tensors")) {
    NamedTensor t;
    t.name = e.at("name").get<std::string>();
    t.shape = e.at("shape").get<Shape>();
    std::size_t off = e.at("offset").get<std::size_t>();
    std::size_t n = shape_size(t.shape);
    const std::string dtype = e.value("dtype", "f32");
    if (dtype != "f32" && dtype != "f64") throw MissingArtifact("unsupported dtype " + dtype + " at " + t.name);
    t.f64 = dtype == "f64";
    const std::size_t width = t.f64 ? 8 : 4;
    if (off + width * n > psize) throw MissingArtifact("checkpoint payload truncated at " + t.name);
    t.data.resize(n);
    for (std::size_t i = 0; i < n; ++i)
      t.data[i] = t.f64 ? read_le_f64(payload + off + 8 * i) : read_le_f32(payload + off + 4 * i);
    out.push_back(std::move(t));
  }
  return {manifest.at("meta"), std::move(out)};
}

template <class S>
std::string save_checkpoint(const CaptionerModel<S>& model) {
  std::vector<NamedTensor> ts;
  for (const auto& p : model.params()) {
    NamedTensor t{p.name, p.value.shape, {}};
    for (S v : p.value.data) t.data.push_back(static_cast<float>(v));
    ts.push_back(std::move(t));
  }
  return pack_tensors({{"config", model.config()}}, ts);
}

template <class S>
void load_parameters(CaptionerModel<S>& model, const std::vector<NamedTensor>& tensors) {
  for (const auto& t : tensors) {
    auto* p = model.params().find(t.name);
    if (!p) throw MissingArtifact("checkpoint tensor " + t.name + " not in model");
    if (p->value.shape != t.shape) throw DimensionError("checkpoint shape mismatch for " + t.name);
    for (std::size_t i = 0; i < t.data.size(); ++i) p->value.data[i] = static_cast<S>(t.data[i]);
  }
}

template <class S>
CaptionerModel<S> load_checkpoint(const std::string& bytes) {
  auto [meta, tensors] = unpack_tensors(bytes);
  CaptionerModel<S> model(meta.at("config").get<ModelConfig>(), 0);
  if (tensors.size() != model.params().size())
    throw MissingArtifact("checkpoint tensor count does not match its config");
  load_parameters(model, tensors);
  return model;
}

template <class S>
std::string checkpoint_hash(const CaptionerModel<S>& model) {
  return hex64(fnv1a64(save_checkpoint(model)));
}

// Copies every same-named, same-shaped parameter from `src` into `dst`.
template <class S>
void copy_matching(const CaptionerModel<S>& src, CaptionerModel<S>& dst, Component only) {
  for (const auto& p : src.params()) {
    if (p.component != only) continue;
    auto* q = dst.params().find(p.name);
    if (!q || q->value.shape != p.value.shape)
      throw DimensionError("copy_matching: no compatible parameter " + p.name);
    q->value = p.value;
  }
}

}  // namespace kdcap
