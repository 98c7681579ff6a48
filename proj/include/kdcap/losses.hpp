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

// Distillation losses.
//
//   supervised / sequence KD   smoothed cross-entropy, summed over positions
//                              and averaged over the batch
//   contrastive KD             symmetric InfoNCE over cosine similarities of
//                              projected, mean-pooled embeddings
//   MSE KD                     squared distance between the pooled teacher
//                              embedding and the projected pooled student one
//
// Sequence KD uses hard teacher captions only; it has the same functional
// form as the supervised term with a different target.

#pragma once

#include <optional>
#include <vector>

#include "kdcap/json.hpp"

#include "kdcap/model.hpp"

namespace kdcap {

struct SmoothingConfig {
  double alpha = 0.1;
  void validate() const {
    if (!(alpha >= 0.0 && alpha < 1.0)) throw ConfigError("smoothing alpha must lie in [0, 1)");
  }
};

inline constexpr double kProbFloor = 1e-12;

// Cross-entropy of probability rows `p` [N x V] against the smoothed target
// distribution of `target` (BOS-prefixed; row n scores token n+1). Positions
// past EOS and PAD targets are masked. `clamped` reports a floored log.
template <class S>
Var<S> smoothed_ce_from_probs(Var<S> p, const TokenSequence& target, SmoothingConfig sm,
                              bool* clamped = nullptr) {
  sm.validate();
  const std::size_t n = p.rows();
  if (target.size() < 2 || n != target.size() - 1)
    throw DimensionError("loss: " + std::to_string(n) + " rows for " +
                         std::to_string(target.size()) + " target tokens");
  std::vector<int> tgt(n);
  std::vector<S> w(n, S(0));
  bool after_eos = false;
  for (std::size_t i = 0; i < n; ++i) {
    tgt[i] = target[i + 1];
    if (!after_eos && tgt[i] != kPad) w[i] = S(1);
    if (tgt[i] == kEos) after_eos = true;
  }
  return smoothed_nll(log_clamped(p, static_cast<S>(kProbFloor), clamped), std::move(tgt),
                      std::move(w), static_cast<S>(sm.alpha));
}

template <class S>
Var<S> supervised_loss(Var<S> p, const TokenSequence& gt, SmoothingConfig sm, bool* clamped = nullptr) {
  return smoothed_ce_from_probs(p, gt, sm, clamped);
}

template <class S>
Var<S> sequence_kd_loss(Var<S> p, const TokenSequence& teacher_caption, SmoothingConfig sm,
                        bool* clamped = nullptr) {
  return smoothed_ce_from_probs(p, teacher_caption, sm, clamped);
}

// Batched token loss on log-probabilities [B*L x V] laid out by `tb`: sum
// over positions, mean over the batch.
template <class S>
Var<S> token_loss(Var<S> logp, const TokenBatch& tb, SmoothingConfig sm) {
  sm.validate();
  std::vector<S> w(tb.mask.size());
  const S inv_b = S(1) / static_cast<S>(tb.batch);
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = tb.mask[i] ? inv_b : S(0);
  return smoothed_nll(logp, tb.targets, std::move(w), static_cast<S>(sm.alpha));
}

// Symmetric InfoNCE on already-projected rows a (teacher) and b (student),
// both [B x d_kd]. s(i,j) = cos(a_i, b_j); the loss is
//   -(1/B) * sum_i [log softmax_j s(i,j)/tau at j=i + log softmax_j s(j,i)/tau at j=i].
template <class S>
Var<S> contrastive_from_projected(Var<S> a, Var<S> b, S tau) {
  if (!(tau > S(0))) throw DomainError("contrastive loss: tau must be positive");
  if (a.rows() != b.rows()) throw DimensionError("contrastive loss: batch sizes differ");
  if (a.cols() != b.cols()) throw DimensionError("contrastive loss: projected dims differ");
  const S batch = static_cast<S>(a.rows());
  Var<S> sim = scale(matmul(l2_normalize_rows(a), l2_normalize_rows(b), true), S(1) / tau);
  Var<S> both = add(trace(log_softmax_rows(sim)), trace(log_softmax_rows(transpose(sim))));
  return scale(both, S(-1) / batch);
}

template <class S>
Var<S> contrastive_kd_loss(Graph<S>& g, Var<S> tea_pooled, Var<S> stu_pooled,
                           const LinearLayer<S>& proj_tea, const LinearLayer<S>& proj_stu, S tau) {
  return contrastive_from_projected(proj_tea(g, tea_pooled), proj_stu(g, stu_pooled), tau);
}

// Squared L2 distance between teacher rows and projected student rows,
// summed over dimensions and averaged over the batch.
template <class S>
Var<S> mse_from_projected(Var<S> tea, Var<S> stu_projected) {
  if (tea.rows() != stu_projected.rows()) throw DimensionError("mse loss: batch sizes differ");
  if (tea.cols() != stu_projected.cols())
    throw DimensionError("mse loss: projected student dim " + std::to_string(stu_projected.cols()) +
                         " != teacher dim " + std::to_string(tea.cols()));
  return scale(square_sum(sub(tea, stu_projected)), S(1) / static_cast<S>(tea.rows()));
}

template <class S>
Var<S> mse_kd_loss(Graph<S>& g, Var<S> tea_pooled, Var<S> stu_pooled, const LinearLayer<S>& proj_stu) {
  if (stu_pooled.cols() != static_cast<std::size_t>(proj_stu.in_dim()))
    throw DimensionError("mse loss: student dim does not match projection input");
  return mse_from_projected(tea_pooled, proj_stu(g, stu_pooled));
}

enum class LossMode { paired, audio_only };

NLOHMANN_JSON_SERIALIZE_ENUM(LossMode, {{LossMode::paired, "paired"}, {LossMode::audio_only, "audio_only"}})

struct LossWeights {
  double sup = 1.0;
  double seq = 1.0;
  double enc = 1.0;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(LossWeights, sup, seq, enc)

struct LossBreakdown {
  std::optional<double> l_sup;
  double l_seq = 0.0;
  std::optional<double> l_enc;
  double total = 0.0;
  LossMode mode = LossMode::paired;
  EncKind enc_kind = EncKind::none;
};

inline void to_json(nlohmann::json& j, const LossBreakdown& b) {
  j = {{"mode", b.mode}, {"enc_kind", b.enc_kind}, {"l_seq", b.l_seq}, {"total", b.total}};
  j["l_sup"] = b.l_sup ? nlohmann::json(*b.l_sup) : nlohmann::json(nullptr);
  j["l_enc"] = b.l_enc ? nlohmann::json(*b.l_enc) : nlohmann::json(nullptr);
}

// Combines component values. Audio-only drops L_sup; enc_kind none drops
// L_enc.
inline LossBreakdown total_loss(std::optional<double> l_sup, double l_seq, std::optional<double> l_enc,
                                LossMode mode, EncKind enc_kind, LossWeights w = {}) {
  LossBreakdown b;
  b.mode = mode;
  b.enc_kind = enc_kind;
  b.l_seq = l_seq;
  if (mode == LossMode::paired) b.l_sup = l_sup;
  if (enc_kind != EncKind::none) b.l_enc = l_enc;
  b.total = w.seq * b.l_seq;
  if (b.l_sup) b.total += w.sup * *b.l_sup;
  if (b.l_enc) b.total += w.enc * *b.l_enc;
  return b;
}

// Graph-side counterpart: the same bookkeeping over differentiable terms.
template <class S>
struct LossTerms {
  Var<S> sup, seq, enc;  // invalid when absent
};

template <class S>
Var<S> combine_losses(const LossTerms<S>& t, LossMode mode, EncKind enc_kind, LossWeights w = {}) {
  Var<S> total;
  auto acc = [&](Var<S> v, double weight) {
    if (!v.valid() || weight == 0.0) return;
    Var<S> term = weight == 1.0 ? v : scale(v, static_cast<S>(weight));
    total = total.valid() ? add(total, term) : term;
  };
  if (mode == LossMode::paired) acc(t.sup, w.sup);
  acc(t.seq, w.seq);
  if (enc_kind != EncKind::none) acc(t.enc, w.enc);
  if (!total.valid()) throw DomainError("combine_losses: no loss terms present");
  return total;
}

template <class S>
LossBreakdown breakdown_of(const LossTerms<S>& t, LossMode mode, EncKind enc_kind, LossWeights w = {}) {
  std::optional<double> sup, enc;
  if (t.sup.valid()) sup = static_cast<double>(t.sup.item());
  if (t.enc.valid()) enc = static_cast<double>(t.enc.item());
  double seq = t.seq.valid() ? static_cast<double>(t.seq.item()) : 0.0;
  return total_loss(sup, seq, enc, mode, enc_kind, w);
}

}  // namespace kdcap
