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

// Training loops.
//
// train_supervised is the plain captioning path (teacher training and the
// scratch baseline). distill_student is the three-level recipe: each
// iteration takes a paired minibatch (L_sup + L_seq + L_enc) and, with
// augmentation, an audio-only minibatch (L_seq + L_enc); the objective is the
// sum of the two. Both loops share the epoch driver: data order, caption
// choice and learning rate depend only on (seed, epoch, step), never on which
// loss terms are active.

#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "kdcap/json.hpp"

#include "kdcap/losses.hpp"
#include "kdcap/metrics.hpp"
#include "kdcap/optim.hpp"
#include "kdcap/stats.hpp"

namespace kdcap {

struct TrainConfig {
  int epochs = 25;
  int batch_size = 32;
  int paired_per_batch = 16;  // used when augment is on
  int audio_per_batch = 16;
  bool augment = false;
  double peak_lr = 5e-4;
  double floor_lr = 5e-7;
  double warmup_epochs = 5;
  double alpha = 0.1;
  EncKind enc_kind = EncKind::none;
  double tau = 0.07;
  LossWeights weights;
  AdamWConfig optimizer;
  int val_beam = 3;
  int eval_beam = 3;
  int pseudo_beam = 3;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (augment && (paired_per_batch < 1 || audio_per_batch < 1 || paired_per_batch + audio_per_batch != batch_size))
      throw ConfigError("paired + audio-only per batch must equal batch_size");
    if (!(tau > 0)) throw ConfigError("tau must be positive");
    if (val_beam < 1 || eval_beam < 1 || pseudo_beam < 1) throw ConfigError("beam sizes must be >= 1");
    SmoothingConfig{alpha}.validate();
    if (epochs > 0) schedule().validate();
  }
  LRSchedule schedule() const { return {peak_lr, floor_lr, warmup_epochs, static_cast<double>(epochs)}; }
  int paired_batch() const { return augment ? paired_per_batch : batch_size; }
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, epochs, batch_size, paired_per_batch, audio_per_batch,
                                                augment, peak_lr, floor_lr, warmup_epochs, alpha, enc_kind, tau,
                                                weights, optimizer, val_beam, eval_beam, pseudo_beam, seed)

// Mean of the logged breakdowns of one mode over an epoch.
struct LossAggregate {
  int iterations = 0;
  double l_sup = 0, l_seq = 0, l_enc = 0, total = 0;
  bool has_sup = false, has_enc = false;

  void add(const LossBreakdown& b) {
    ++iterations;
    l_seq += b.l_seq;
    total += b.total;
    if (b.l_sup) { l_sup += *b.l_sup; has_sup = true; }
    if (b.l_enc) { l_enc += *b.l_enc; has_enc = true; }
  }
  void finish() {
    if (iterations == 0) return;
    const double n = iterations;
    l_sup /= n; l_seq /= n; l_enc /= n; total /= n;
  }
};

inline void to_json(nlohmann::json& j, const LossAggregate& a) {
  j = {{"iterations", a.iterations}, {"l_seq", a.l_seq}, {"total", a.total}};
  j["l_sup"] = a.has_sup ? nlohmann::json(a.l_sup) : nlohmann::json(nullptr);
  j["l_enc"] = a.has_enc ? nlohmann::json(a.l_enc) : nlohmann::json(nullptr);
}
inline void from_json(const nlohmann::json& j, LossAggregate& a) {
  a.iterations = j.at("iterations").get<int>();
  a.l_seq = j.at("l_seq").get<double>();
  a.total = j.at("total").get<double>();
  a.has_sup = !j.at("l_sup").is_null();
  a.has_enc = !j.at("l_enc").is_null();
  a.l_sup = a.has_sup ? j.at("l_sup").get<double>() : 0.0;
  a.l_enc = a.has_enc ? j.at("l_enc").get<double>() : 0.0;
}

struct EpochLog {
  int epoch = 0;  // 1-based
  double lr = 0;  // at the last step of the epoch
  int steps = 0;
  LossAggregate paired, audio_only;
  double val_bleu4 = 0, val_rouge_l = 0, val_cider = 0, val_event_accuracy = 0;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(EpochLog, epoch, lr, steps, paired, audio_only, val_bleu4, val_rouge_l, val_cider,
                                   val_event_accuracy)

struct RunResult {
  std::uint64_t seed = 0;
  std::vector<EpochLog> epochs;
  int best_epoch = 0;  // 0 = the untrained initialization
  double best_val_cider = 0;
  MetricReport test;
  std::string final_hash, best_hash;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(RunResult, seed, epochs, best_epoch, best_val_cider, test, final_hash, best_hash)

template <class S>
CaptionerModel<S> clone_model(const CaptionerModel<S>& m) {
  CaptionerModel<S> out(m.config(), 0);
  auto it = out.params().begin();
  for (const auto& p : m.params()) {
    it->value = p.value;
    it->frozen = p.frozen;
    ++it;
  }
  return out;
}

// Parameter copies at working precision.
template <class S>
std::vector<NamedTensor> snapshot_params(const CaptionerModel<S>& m) {
  std::vector<NamedTensor> out;
  for (const auto& p : m.params())
    out.push_back({p.name, p.value.shape, {p.value.data.begin(), p.value.data.end()}, std::is_same_v<S, double>});
  return out;
}

// Everything needed to continue a run after an interruption.
template <class S>
struct TrainSnapshot {
  int epoch = 0;  // completed epochs
  std::vector<NamedTensor> params, best_params;
  std::uint64_t opt_steps = 0;
  std::vector<NamedTensor> opt_m, opt_v;
  std::vector<EpochLog> log;
  int best_epoch = 0;
  double best_val_cider = -1;
};

template <class S>
std::string save_snapshot(const TrainSnapshot<S>& s) {
  std::vector<NamedTensor> all;
  for (const auto& t : s.params) all.push_back({"param/" + t.name, t.shape, t.data, t.f64});
  for (const auto& t : s.best_params) all.push_back({"best/" + t.name, t.shape, t.data, t.f64});
  for (const auto& t : s.opt_m) all.push_back({"m/" + t.name, t.shape, t.data, t.f64});
  for (const auto& t : s.opt_v) all.push_back({"v/" + t.name, t.shape, t.data, t.f64});
  nlohmann::json meta = {{"epoch", s.epoch}, {"opt_steps", s.opt_steps}, {"log", s.log},
                         {"best_epoch", s.best_epoch}, {"best_val_cider", s.best_val_cider}};
  return pack_tensors(meta, all);
}

template <class S>
TrainSnapshot<S> load_snapshot(const std::string& bytes) {
  auto [meta, tensors] = unpack_tensors(bytes);
  TrainSnapshot<S> s;
  s.epoch = meta.at("epoch").get<int>();
  s.opt_steps = meta.at("opt_steps").get<std::uint64_t>();
  s.log = meta.at("log").get<std::vector<EpochLog>>();
  s.best_epoch = meta.at("best_epoch").get<int>();
  s.best_val_cider = meta.at("best_val_cider").get<double>();
  for (auto& t : tensors) {
    auto slash = t.name.find('/');
    std::string kind = t.name.substr(0, slash);
    t.name = t.name.substr(slash + 1);
    if (kind == "param") s.params.push_back(std::move(t));
    else if (kind == "best") s.best_params.push_back(std::move(t));
    else if (kind == "m") s.opt_m.push_back(std::move(t));
    else if (kind == "v") s.opt_v.push_back(std::move(t));
  }
  return s;
}

template <class S>
struct TrainHooks {
  std::function<void(const LossBreakdown&)> on_iteration;
  std::function<void(const EpochLog&)> on_epoch;
  std::function<void(const TrainSnapshot<S>&)> on_snapshot;
  std::optional<TrainSnapshot<S>> resume;
};

template <class S>
struct TrainOutput {
  CaptionerModel<S> best;
  CaptionerModel<S> final;
  RunResult result;
};

// ---------------------------------------------------------------------------
// Data order.

// Fisher-Yates driven by raw engine output, so the order is the same on
// every standard library.
inline std::vector<std::size_t> permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng() % i]);
  return p;
}

struct EpochPlan {
  std::vector<std::size_t> order;        // paired clip indices
  std::vector<std::size_t> reference;    // caption choice per paired clip
  std::vector<std::size_t> audio_order;  // audio-only pool indices
};

inline EpochPlan plan_epoch(std::uint64_t seed, int epoch, const std::vector<PairedClip>& train, std::size_t n_audio) {
  EpochPlan p;
  Rng order_rng(derive_seed(seed, "batch-order", static_cast<std::uint64_t>(epoch)));
  p.order = permutation(train.size(), order_rng);
  Rng cap_rng(derive_seed(seed, "caption-choice", static_cast<std::uint64_t>(epoch)));
  for (const auto& pc : train) p.reference.push_back(cap_rng() % pc.captions.references.size());
  Rng audio_rng(derive_seed(seed, "audio-order", static_cast<std::uint64_t>(epoch)));
  p.audio_order = permutation(n_audio, audio_rng);
  return p;
}

inline std::size_t steps_per_epoch(std::size_t n_paired, int per_batch) {
  return (n_paired + static_cast<std::size_t>(per_batch) - 1) / static_cast<std::size_t>(per_batch);
}

namespace detail {

template <class S>
bool all_frozen(const CaptionerModel<S>& m, Component c) {
  bool any = false;
  for (const auto& p : m.params())
    if (p.component == c) {
      any = true;
      if (!p.frozen) return false;
    }
  return any;
}

// Encoder frames for a batch; served from a per-clip cache when the encoder is
// frozen (its output is then a fixed function of the clip).
template <class S>
class FrameSource {
 public:
  explicit FrameSource(const CaptionerModel<S>& m) : model_(m), frozen_(all_frozen(m, Component::encoder)) {}

  Var<S> frames(Graph<S>& g, const std::vector<const SynthClip*>& clips) {
    std::vector<const Tensor<float>*> feats;
    for (const auto* c : clips) feats.push_back(&c->features);
    if (!frozen_) return model_.encode(g, feats);
    const std::size_t t = model_.encoded_frames(clips.front()->features.rows());
    const std::size_t d = static_cast<std::size_t>(model_.config().encoder.d_enc());
    Tensor<S> out({clips.size() * t, d});
    for (std::size_t b = 0; b < clips.size(); ++b) {
      auto it = cache_.find(clips[b]);
      if (it == cache_.end()) {
        Graph<S> ng(false);
        it = cache_.emplace(clips[b], model_.encode(ng, {feats[b]}).value()).first;
      }
      std::copy(it->second.data.begin(), it->second.data.end(), out.data.begin() + static_cast<long>(b * t * d));
    }
    return g.constant(std::move(out));
  }

 private:
  const CaptionerModel<S>& model_;
  bool frozen_;
  std::map<const SynthClip*, Tensor<S>> cache_;
};

template <class S>
void check_finite_loss(Var<S> loss, const char* what) {
  if (!std::isfinite(static_cast<double>(loss.item())))
    throw NumericError(std::string("training diverged: non-finite ") + what + " loss");
}

// Runs the epoch loop. `step(plan, step_index, lr)` performs one optimizer
// step and logs its breakdowns.
template <class S, class StepFn>
TrainOutput<S> drive(CaptionerModel<S>& model, const TrainConfig& cfg, const DatasetSplit& ds, TrainHooks<S>& hooks,
                     AdamW<S>& opt, StepFn&& step) {
  cfg.validate();
  RunResult rr;
  rr.seed = cfg.seed;
  const DecodeConfig val_dc{cfg.val_beam, model.config().decoder.max_len, 0, true};
  const std::size_t steps = steps_per_epoch(ds.train.size(), cfg.paired_batch());
  const auto sched = cfg.schedule();

  std::vector<NamedTensor> best = snapshot_params(model);
  double best_cider = -1;
  int best_epoch = 0;
  int start_epoch = 0;
  if (hooks.resume) {
    const auto& s = *hooks.resume;
    load_parameters(model, s.params);
    best = s.best_params;
    best_cider = s.best_val_cider;
    best_epoch = s.best_epoch;
    start_epoch = s.epoch;
    rr.epochs = s.log;
    std::unordered_map<std::string, typename AdamW<S>::Moments> st;
    for (std::size_t i = 0; i < s.opt_m.size(); ++i)
      st[s.opt_m[i].name] = {{s.opt_m[i].data.begin(), s.opt_m[i].data.end()},
                             {s.opt_v[i].data.begin(), s.opt_v[i].data.end()}};
    opt.restore(s.opt_steps, std::move(st));
  }

  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    if (ds.train.empty()) throw MissingArtifact("no paired training data");
    EpochPlan plan = plan_epoch(cfg.seed, epoch, ds.train, ds.audio_only.size());
    EpochLog log;
    log.epoch = epoch + 1;
    log.steps = static_cast<int>(steps);
    for (std::size_t s = 0; s < steps; ++s) {
      double lr = sched.lr_at(epoch + static_cast<double>(s + 1) / static_cast<double>(steps));
      step(plan, s, lr, log);
      log.lr = lr;
    }
    log.paired.finish();
    log.audio_only.finish();
    MetricReport val = evaluate_corpus(model, ds.val, val_dc);
    log.val_bleu4 = val.bleu4;
    log.val_rouge_l = val.rouge_l;
    log.val_cider = val.cider;
    log.val_event_accuracy = val.event_accuracy;
    if (val.cider > best_cider) {
      best_cider = val.cider;
      best_epoch = epoch + 1;
      best = snapshot_params(model);
    }
    rr.epochs.push_back(log);
    if (hooks.on_epoch) hooks.on_epoch(log);
    if (hooks.on_snapshot) {
      TrainSnapshot<S> snap;
      snap.epoch = epoch + 1;
      snap.params = snapshot_params(model);
      snap.best_params = best;
      snap.opt_steps = opt.steps();
      for (const auto& p : model.params()) {
        auto it = opt.state().find(p.name);
        if (it == opt.state().end()) continue;
        constexpr bool f64 = std::is_same_v<S, double>;
        snap.opt_m.push_back({p.name, p.value.shape, {it->second.m.begin(), it->second.m.end()}, f64});
        snap.opt_v.push_back({p.name, p.value.shape, {it->second.v.begin(), it->second.v.end()}, f64});
      }
      snap.log = rr.epochs;
      snap.best_epoch = best_epoch;
      snap.best_val_cider = best_cider;
      hooks.on_snapshot(snap);
    }
  }

  CaptionerModel<S> best_model = clone_model(model);
  load_parameters(best_model, best);
  rr.best_epoch = best_epoch;
  rr.best_val_cider = std::max(best_cider, 0.0);
  const DecodeConfig test_dc{cfg.eval_beam, model.config().decoder.max_len, 0, true};
  rr.test = evaluate_corpus(best_model, ds.test, test_dc);
  rr.final_hash = checkpoint_hash(model);
  rr.best_hash = checkpoint_hash(best_model);
  return {std::move(best_model), std::move(model), std::move(rr)};
}

template <class S>
std::vector<const SynthClip*> batch_clips(const std::vector<PairedClip>& train, const EpochPlan& plan, std::size_t begin,
                                          std::size_t end) {
  std::vector<const SynthClip*> out;
  for (std::size_t i = begin; i < end; ++i) out.push_back(&train[plan.order[i]].clip);
  return out;
}

inline std::size_t max_positions(const ModelConfig& c) { return static_cast<std::size_t>(c.decoder.max_len + 1); }

}  // namespace detail

// Seeds of the model initializations, one stream per role.
template <class S>
CaptionerModel<S> init_model(const ModelConfig& mc, std::uint64_t seed, const std::string& role) {
  return CaptionerModel<S>(mc, derive_seed(seed, "init/" + role));
}

// Plain supervised captioning on the paired split: L_sup only.
template <class S>
TrainOutput<S> train_supervised(CaptionerModel<S> model, const TrainConfig& cfg, const DatasetSplit& ds,
                                TrainHooks<S> hooks = {}) {
  AdamW<S> opt(cfg.optimizer);
  const SmoothingConfig sm{cfg.alpha};
  const std::size_t per = static_cast<std::size_t>(cfg.batch_size);
  detail::FrameSource<S> source(model);
  auto step = [&](const EpochPlan& plan, std::size_t s, double lr, EpochLog& log) {
    const std::size_t b0 = s * per, b1 = std::min(ds.train.size(), b0 + per);
    auto clips = detail::batch_clips<S>(ds.train, plan, b0, b1);
    std::vector<const TokenSequence*> caps;
    for (std::size_t i = b0; i < b1; ++i) caps.push_back(&ds.train[plan.order[i]].captions.references[plan.reference[plan.order[i]]]);
    model.params().zero_grad();
    Graph<S> g;
    Var<S> frames = source.frames(g, clips);
    Var<S> mem = model.decoder_memory(g, frames);
    TokenBatch tb = make_token_batch(caps, detail::max_positions(model.config()));
    Var<S> loss = token_loss(model.decode_log_probs(g, mem, frames.rows() / clips.size(), tb), tb, sm);
    detail::check_finite_loss(loss, "supervised");
    g.backward(loss);
    opt.step(model.params(), lr);
    LossBreakdown b = total_loss(static_cast<double>(loss.item()), 0.0, std::nullopt, LossMode::paired, EncKind::none,
                                 {1.0, 0.0, 0.0});
    log.paired.add(b);
    if (hooks.on_iteration) hooks.on_iteration(b);
  };
  return detail::drive(model, cfg, ds, hooks, opt, step);
}

template <class S>
TrainOutput<S> train_teacher(const TrainConfig& cfg, const DatasetSplit& ds, const ModelConfig& mc = teacher_config(),
                             TrainHooks<S> hooks = {}) {
  return train_supervised(init_model<S>(mc, cfg.seed, "teacher"), cfg, ds, std::move(hooks));
}

struct DistillOptions {
  std::filesystem::path pseudo_label_cache;  // empty = no disk cache
};

// Mean-pooled teacher encoder embeddings, keyed by clip.
template <class S>
std::map<const SynthClip*, std::vector<S>> teacher_pooled(const CaptionerModel<S>& teacher,
                                                         const std::vector<const SynthClip*>& clips) {
  std::map<const SynthClip*, std::vector<S>> out;
  for (const auto* c : clips) {
    Graph<S> g(false);
    Var<S> f = teacher.encode(g, {&c->features});
    Var<S> p = mean_pool(f, 1, f.rows());
    out[c] = p.value().data;
  }
  return out;
}

// Student distillation. The teacher is only read: its pooled embeddings and
// beam-search captions are computed up front.
template <class S>
TrainOutput<S> distill_student(CaptionerModel<S> student, const TrainConfig& cfg, const CaptionerModel<S>& teacher,
                               const DatasetSplit& ds, const DistillOptions& opts = {}, TrainHooks<S> hooks = {}) {
  cfg.validate();
  const EncKind kind = cfg.enc_kind;
  if (kind != EncKind::none && !student.has_head(kind))
    throw ConfigError(std::string("enc_kind ") + enc_kind_name(kind) + " needs a student with that projection head");
  const bool use_sup = cfg.weights.sup != 0.0;
  const bool use_seq = cfg.weights.seq != 0.0;
  const bool use_enc = kind != EncKind::none && cfg.weights.enc != 0.0;
  const bool use_audio = cfg.augment && (use_seq || use_enc) && !ds.audio_only.empty();

  std::vector<const SynthClip*> paired_clips, audio_clips;
  for (const auto& pc : ds.train) paired_clips.push_back(&pc.clip);
  for (const auto& c : ds.audio_only) audio_clips.push_back(&c);

  std::map<const SynthClip*, TokenSequence> teacher_caption;
  if (use_seq) {
    std::vector<const SynthClip*> need = paired_clips;
    if (use_audio) need.insert(need.end(), audio_clips.begin(), audio_clips.end());
    auto labels = pseudo_label(teacher, need, cfg.pseudo_beam, opts.pseudo_label_cache);
    for (std::size_t i = 0; i < need.size(); ++i) teacher_caption[need[i]] = std::move(labels[i]);
  }
  std::map<const SynthClip*, std::vector<S>> tea_emb;
  if (use_enc) {
    std::vector<const SynthClip*> need = paired_clips;
    if (use_audio) need.insert(need.end(), audio_clips.begin(), audio_clips.end());
    tea_emb = teacher_pooled(teacher, need);
  }

  AdamW<S> opt(cfg.optimizer);
  const SmoothingConfig sm{cfg.alpha};
  const S tau = static_cast<S>(cfg.tau);
  const std::size_t per = static_cast<std::size_t>(cfg.paired_batch());
  const std::size_t per_audio = static_cast<std::size_t>(cfg.audio_per_batch);
  const std::size_t maxpos = detail::max_positions(student.config());
  detail::FrameSource<S> source(student);

  // Loss terms shared by both halves of an iteration.
  auto kd_terms = [&](Graph<S>& g, Var<S> frames, Var<S> mem, std::size_t t, const std::vector<const SynthClip*>& clips,
                      LossTerms<S>& terms) {
    if (use_seq) {
      std::vector<const TokenSequence*> caps;
      for (const auto* c : clips) caps.push_back(&teacher_caption.at(c));
      TokenBatch tb = make_token_batch(caps, maxpos);
      terms.seq = token_loss(student.decode_log_probs(g, mem, t, tb), tb, sm);
    }
    if (use_enc) {
      const std::size_t dt = tea_emb.at(clips.front()).size();
      Tensor<S> tp({clips.size(), dt});
      for (std::size_t i = 0; i < clips.size(); ++i) {
        const auto& e = tea_emb.at(clips[i]);
        std::copy(e.begin(), e.end(), tp.data.begin() + static_cast<long>(i * dt));
      }
      Var<S> pooled_t = g.constant(std::move(tp));
      Var<S> pooled_s = mean_pool(frames, clips.size(), t);
      terms.enc = kind == EncKind::contrastive
                      ? contrastive_kd_loss(g, pooled_t, pooled_s, student.proj_tea(), student.proj_stu(), tau)
                      : mse_kd_loss(g, pooled_t, pooled_s, student.proj_stu());
    }
  };

  auto step = [&](const EpochPlan& plan, std::size_t s, double lr, EpochLog& log) {
    const std::size_t b0 = s * per, b1 = std::min(ds.train.size(), b0 + per);
    student.params().zero_grad();
    Graph<S> g;

    auto clips = detail::batch_clips<S>(ds.train, plan, b0, b1);
    Var<S> frames = source.frames(g, clips);
    Var<S> mem = student.decoder_memory(g, frames);
    const std::size_t t = frames.rows() / clips.size();
    LossTerms<S> paired;
    if (use_sup) {
      std::vector<const TokenSequence*> caps;
      for (std::size_t i = b0; i < b1; ++i)
        caps.push_back(&ds.train[plan.order[i]].captions.references[plan.reference[plan.order[i]]]);
      TokenBatch tb = make_token_batch(caps, maxpos);
      paired.sup = token_loss(student.decode_log_probs(g, mem, t, tb), tb, sm);
    }
    kd_terms(g, frames, mem, t, clips, paired);
    Var<S> objective = combine_losses(paired, LossMode::paired, kind, cfg.weights);
    detail::check_finite_loss(objective, "paired");
    LossBreakdown pb = breakdown_of(paired, LossMode::paired, kind, cfg.weights);

    std::optional<LossBreakdown> ab;
    if (use_audio) {
      std::vector<const SynthClip*> aclips;
      for (std::size_t i = 0; i < per_audio; ++i)
        aclips.push_back(audio_clips[plan.audio_order[(s * per_audio + i) % audio_clips.size()]]);
      Var<S> af = source.frames(g, aclips);
      Var<S> am = student.decoder_memory(g, af);
      LossTerms<S> audio;
      kd_terms(g, af, am, af.rows() / aclips.size(), aclips, audio);
      Var<S> audio_total = combine_losses(audio, LossMode::audio_only, kind, cfg.weights);
      detail::check_finite_loss(audio_total, "audio-only");
      ab = breakdown_of(audio, LossMode::audio_only, kind, cfg.weights);
      objective = add(objective, audio_total);
    }

    g.backward(objective);
    opt.step(student.params(), lr);
    log.paired.add(pb);
    if (hooks.on_iteration) hooks.on_iteration(pb);
    if (ab) {
      log.audio_only.add(*ab);
      if (hooks.on_iteration) hooks.on_iteration(*ab);
    }
  };
  return detail::drive(student, cfg, ds, hooks, opt, step);
}

// ---------------------------------------------------------------------------
// Bottleneck analysis: (a) the teacher; (b) frozen teacher encoder + fresh
// small decoder; (c) frozen decoder from (b) + fresh small encoder whose
// output width matches the teacher's.

inline ModelConfig bottleneck_decoder_config(const ModelConfig& teacher, const ModelConfig& student) {
  ModelConfig c;
  c.encoder = teacher.encoder;
  c.decoder = student.decoder;
  c.kd_head = EncKind::none;
  c.teacher_dim = teacher.encoder.d_enc();
  return c;
}

inline ModelConfig bottleneck_encoder_config(const ModelConfig& teacher, const ModelConfig& student) {
  ModelConfig c;
  c.encoder = student.encoder;
  c.encoder.blocks.back().channels = teacher.encoder.d_enc();
  c.decoder = student.decoder;
  c.kd_head = EncKind::none;
  c.teacher_dim = teacher.encoder.d_enc();
  return c;
}

struct BottleneckResult {
  std::uint64_t seed = 0;
  MetricReport teacher, small_decoder, small_encoder;
  bool decoder_row_encoder_unchanged = false;
  bool encoder_row_decoder_unchanged = false;
};

inline void to_json(nlohmann::json& j, const BottleneckResult& r) {
  auto brief = [](const MetricReport& m) {
    return nlohmann::json{{"bleu4", m.bleu4}, {"rouge_l", m.rouge_l}, {"cider", m.cider},
                          {"event_accuracy", m.event_accuracy}, {"checkpoint_hash", m.checkpoint_hash}};
  };
  j = {{"seed", r.seed},
       {"a_teacher", brief(r.teacher)},
       {"b_frozen_encoder_small_decoder", brief(r.small_decoder)},
       {"c_small_encoder_frozen_decoder", brief(r.small_encoder)},
       {"b_encoder_unchanged", r.decoder_row_encoder_unchanged},
       {"c_decoder_unchanged", r.encoder_row_decoder_unchanged}};
}

template <class S>
bool component_equal(const CaptionerModel<S>& a, const CaptionerModel<S>& b, Component c) {
  for (const auto& p : a.params()) {
    if (p.component != c) continue;
    const auto* q = b.params().find(p.name);
    if (!q || q->value.data != p.value.data) return false;
  }
  return true;
}

// Rows (b) and (c) train with the distillation objective without encoder KD
// (L_sup + L_seq on the paired split).
template <class S>
BottleneckResult run_bottleneck_analysis(const TrainConfig& cfg, const CaptionerModel<S>& teacher, const DatasetSplit& ds,
                                         const ModelConfig& student_cfg = student_config(), const DistillOptions& opts = {}) {
  BottleneckResult r;
  r.seed = cfg.seed;
  TrainConfig tc = cfg;
  tc.enc_kind = EncKind::none;
  tc.augment = false;
  r.teacher = evaluate_corpus(teacher, ds.test, DecodeConfig{cfg.eval_beam, teacher.config().decoder.max_len, 0, true});

  auto b_model = init_model<S>(bottleneck_decoder_config(teacher.config(), student_cfg), cfg.seed, "bottleneck-decoder");
  copy_matching(teacher, b_model, Component::encoder);
  b_model.set_frozen(Component::encoder, true);
  auto b_before = clone_model(b_model);
  auto b = distill_student(std::move(b_model), tc, teacher, ds, opts);
  r.small_decoder = b.result.test;
  r.decoder_row_encoder_unchanged = component_equal(b_before, b.best, Component::encoder) &&
                                    component_equal(b_before, b.final, Component::encoder);

  auto c_model = init_model<S>(bottleneck_encoder_config(teacher.config(), student_cfg), cfg.seed, "bottleneck-encoder");
  copy_matching(b.best, c_model, Component::decoder);
  c_model.set_frozen(Component::decoder, true);
  auto c_before = clone_model(c_model);
  auto c = distill_student(std::move(c_model), tc, teacher, ds, opts);
  r.small_encoder = c.result.test;
  r.encoder_row_decoder_unchanged = component_equal(c_before, c.best, Component::decoder) &&
                                    component_equal(c_before, c.final, Component::decoder);
  return r;
}

// ---------------------------------------------------------------------------
// Multi-seed aggregation.

struct MeanStd {
  double mean = 0, std = 0;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(MeanStd, mean, std)

inline std::map<std::string, double> headline_metrics(const MetricReport& m) {
  return {{"bleu4", m.bleu4}, {"rouge_l", m.rouge_l}, {"cider", m.cider}, {"event_accuracy", m.event_accuracy}};
}

struct SeedAggregate {
  std::vector<std::uint64_t> seeds;
  std::map<std::string, std::vector<double>> per_seed;
  std::map<std::string, MeanStd> summary;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(SeedAggregate, seeds, per_seed, summary)

inline SeedAggregate aggregate_runs(const std::vector<RunResult>& runs) {
  if (runs.empty()) throw DomainError("aggregate_runs: no runs");
  SeedAggregate a;
  for (const auto& r : runs) {
    a.seeds.push_back(r.seed);
    for (const auto& [k, v] : headline_metrics(r.test)) a.per_seed[k].push_back(v);
  }
  for (const auto& [k, v] : a.per_seed) a.summary[k] = {mean_of(v), std_of(v)};
  return a;
}

// Runs `run(seed)` for each seed and aggregates the test metrics.
inline SeedAggregate run_seeds(const std::vector<std::uint64_t>& seeds, const std::function<RunResult(std::uint64_t)>& run) {
  if (seeds.empty()) throw DomainError("run_seeds: need at least one seed");
  std::vector<RunResult> rs;
  for (auto s : seeds) rs.push_back(run(s));
  return aggregate_runs(rs);
}

}  // namespace kdcap
