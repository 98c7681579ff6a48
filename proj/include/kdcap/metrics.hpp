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

// Caption metrics over whitespace-tokenized text.
//
// BLEU-4: corpus-level clipped n-gram precisions, closest-reference length
// (ties to the shorter), brevity penalty exp(1 - r/c) when c <= r. A zero
// precision is replaced by 1e-9 so the geometric mean stays defined.
// ROUGE-L: LCS F-measure with beta = 1.2, best reference per clip, mean
// over clips.
// CIDEr-D: TF-IDF n-gram vectors (n = 1..4) with document frequencies from
// the references, hypothesis weights clipped by the reference weights,
// Gaussian length penalty (sigma = 6) on token counts, averaged over
// references and n, times 10.

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "kdcap/json.hpp"

#include "kdcap/decode.hpp"

namespace kdcap {

using Words = std::vector<std::string>;
using NGram = std::vector<std::string>;
using NGramCounts = std::map<NGram, int>;

inline Words split_words(const std::string& text) {
  Words out;
  std::istringstream in(text);
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

inline NGramCounts ngram_counts(const Words& w, int n) {
  NGramCounts c;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= w.size(); ++i)
    ++c[NGram(w.begin() + static_cast<long>(i), w.begin() + static_cast<long>(i) + n)];
  return c;
}

namespace detail {

inline void check_corpus(const std::vector<Words>& hyps, const std::vector<std::vector<Words>>& refs) {
  if (hyps.size() != refs.size()) throw DimensionError("metrics: hypothesis and reference counts differ");
  for (const auto& r : refs)
    if (r.empty()) throw DomainError("metrics: every clip needs at least one reference");
}

}  // namespace detail

struct BleuStats {
  double matched[4] = {0, 0, 0, 0};
  double total[4] = {0, 0, 0, 0};
  double hyp_len = 0;
  double ref_len = 0;
};

inline BleuStats bleu_stats(const Words& hyp, const std::vector<Words>& refs) {
  BleuStats s;
  s.hyp_len = static_cast<double>(hyp.size());
  std::size_t best = refs.front().size();
  for (const auto& r : refs) {
    auto d = [&](std::size_t l) { return l > hyp.size() ? l - hyp.size() : hyp.size() - l; };
    if (d(r.size()) < d(best) || (d(r.size()) == d(best) && r.size() < best)) best = r.size();
  }
  s.ref_len = static_cast<double>(best);
  for (int n = 1; n <= 4; ++n) {
    auto hc = ngram_counts(hyp, n);
    std::map<NGram, int> maxref;
    for (const auto& r : refs)
      for (const auto& [g, c] : ngram_counts(r, n)) maxref[g] = std::max(maxref[g], c);
    for (const auto& [g, c] : hc) {
      auto it = maxref.find(g);
      s.matched[n - 1] += std::min(c, it == maxref.end() ? 0 : it->second);
      s.total[n - 1] += c;
    }
  }
  return s;
}

inline double bleu_from_stats(const BleuStats& s) {
  if (s.hyp_len == 0) return 0.0;
  double log_p = 0;
  for (int n = 0; n < 4; ++n) {
    double p = s.total[n] > 0 ? s.matched[n] / s.total[n] : 0.0;
    if (p == 0) p = 1e-9;
    log_p += 0.25 * std::log(p);
  }
  double bp = s.hyp_len > s.ref_len ? 1.0 : std::exp(1.0 - s.ref_len / s.hyp_len);
  return bp * std::exp(log_p);
}

inline double bleu4(const std::vector<Words>& hyps, const std::vector<std::vector<Words>>& refs,
                    std::vector<double>* per_clip = nullptr) {
  detail::check_corpus(hyps, refs);
  BleuStats total;
  if (per_clip) per_clip->clear();
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    auto s = bleu_stats(hyps[i], refs[i]);
    if (per_clip) per_clip->push_back(bleu_from_stats(s));
    for (int n = 0; n < 4; ++n) {
      total.matched[n] += s.matched[n];
      total.total[n] += s.total[n];
    }
    total.hyp_len += s.hyp_len;
    total.ref_len += s.ref_len;
  }
  return bleu_from_stats(total);
}

inline std::size_t lcs_length(const Words& a, const Words& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline double rouge_l_clip(const Words& hyp, const std::vector<Words>& refs, double beta = 1.2) {
  double best = 0.0;
  for (const auto& r : refs) {
    if (hyp.empty() || r.empty()) continue;
    double lcs = static_cast<double>(lcs_length(hyp, r));
    if (lcs == 0) continue;
    double p = lcs / static_cast<double>(hyp.size());
    double rc = lcs / static_cast<double>(r.size());
    double b2 = beta * beta;
    best = std::max(best, (1 + b2) * p * rc / (rc + b2 * p));
  }
  return best;
}

inline double rouge_l(const std::vector<Words>& hyps, const std::vector<std::vector<Words>>& refs,
                      std::vector<double>* per_clip = nullptr) {
  detail::check_corpus(hyps, refs);
  if (hyps.empty()) return 0.0;
  double sum = 0.0;
  if (per_clip) per_clip->clear();
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    double s = rouge_l_clip(hyps[i], refs[i]);
    if (per_clip) per_clip->push_back(s);
    sum += s;
  }
  return sum / static_cast<double>(hyps.size());
}

// Document-frequency table over the reference corpus.
struct NGramStats {
  std::map<NGram, int> df;
  std::size_t corpus_size = 0;
};

inline NGramStats reference_ngram_stats(const std::vector<std::vector<Words>>& refs) {
  NGramStats st;
  st.corpus_size = refs.size();
  for (const auto& clip : refs) {
    std::set<NGram> seen;
    for (const auto& r : clip)
      for (int n = 1; n <= 4; ++n)
        for (const auto& [g, c] : ngram_counts(r, n)) seen.insert(g);
    for (const auto& g : seen) ++st.df[g];
  }
  return st;
}

namespace detail {

struct TfIdf {
  std::map<NGram, double> vec[4];
  double norm[4] = {0, 0, 0, 0};
  double length = 0;
};

inline TfIdf tfidf(const Words& w, const NGramStats& st) {
  TfIdf t;
  const double log_n = std::log(static_cast<double>(st.corpus_size));
  for (int n = 1; n <= 4; ++n) {
    for (const auto& [g, c] : ngram_counts(w, n)) {
      auto it = st.df.find(g);
      double df = it == st.df.end() ? 0.0 : it->second;
      double v = c * (log_n - std::log(std::max(1.0, df)));
      t.vec[n - 1][g] = v;
      t.norm[n - 1] += v * v;
    }
    t.norm[n - 1] = std::sqrt(t.norm[n - 1]);
  }
  t.length = static_cast<double>(w.size());
  return t;
}

}  // namespace detail

inline double cider_d_clip(const Words& hyp, const std::vector<Words>& refs, const NGramStats& st,
                           double sigma = 6.0) {
  auto h = detail::tfidf(hyp, st);
  double total = 0.0;
  for (const auto& r : refs) {
    auto rv = detail::tfidf(r, st);
    double delta = h.length - rv.length;
    double pen = std::exp(-(delta * delta) / (2 * sigma * sigma));
    for (int n = 0; n < 4; ++n) {
      double dot = 0.0;
      for (const auto& [g, v] : h.vec[n]) {
        auto it = rv.vec[n].find(g);
        if (it != rv.vec[n].end()) dot += std::min(v, it->second) * it->second;
      }
      if (h.norm[n] != 0 && rv.norm[n] != 0) dot /= h.norm[n] * rv.norm[n];
      total += dot * pen;
    }
  }
  return total / 4.0 / static_cast<double>(refs.size()) * 10.0;
}

inline double cider(const std::vector<Words>& hyps, const std::vector<std::vector<Words>>& refs,
                    std::vector<double>* per_clip = nullptr) {
  detail::check_corpus(hyps, refs);
  if (hyps.size() < 2) throw DomainError("cider: a corpus of at least two clips is required for IDF");
  auto st = reference_ngram_stats(refs);
  double sum = 0.0;
  if (per_clip) per_clip->clear();
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    double s = cider_d_clip(hyps[i], refs[i], st);
    if (per_clip) per_clip->push_back(s);
    sum += s;
  }
  return sum / static_cast<double>(hyps.size());
}

// ---------------------------------------------------------------------------

struct ClipScore {
  std::uint64_t seed = 0;
  std::string hypothesis;
  std::vector<std::string> references;
  double bleu4 = 0, rouge_l = 0, cider = 0;
  bool event_set_match = false;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ClipScore, seed, hypothesis, references, bleu4, rouge_l, cider, event_set_match)

struct MetricReport {
  double bleu4 = 0, rouge_l = 0, cider = 0, event_accuracy = 0;
  std::vector<ClipScore> clips;
  DecodeConfig decode;
  std::string checkpoint_hash;
};

inline void to_json(nlohmann::json& j, const MetricReport& r) {
  j = {{"bleu4", r.bleu4}, {"rouge_l", r.rouge_l}, {"cider", r.cider}, {"event_accuracy", r.event_accuracy},
       {"decode", r.decode}, {"checkpoint_hash", r.checkpoint_hash}, {"clips", r.clips}};
}
inline void from_json(const nlohmann::json& j, MetricReport& r) {
  j.at("bleu4").get_to(r.bleu4);
  j.at("rouge_l").get_to(r.rouge_l);
  j.at("cider").get_to(r.cider);
  j.at("event_accuracy").get_to(r.event_accuracy);
  j.at("decode").get_to(r.decode);
  j.at("checkpoint_hash").get_to(r.checkpoint_hash);
  j.at("clips").get_to(r.clips);
}

// Scores decoded token sequences against a paired split.
inline MetricReport score_captions(const std::vector<TokenSequence>& hyps, const std::vector<PairedClip>& split) {
  if (hyps.size() != split.size()) throw DimensionError("score_captions: count mismatch");
  const auto& tok = vocab();
  MetricReport r;
  std::vector<Words> hw;
  std::vector<std::vector<Words>> rw;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    ClipScore c;
    c.seed = split[i].clip.seed;
    c.hypothesis = tok.detokenize(hyps[i]);
    hw.push_back(split_words(c.hypothesis));
    rw.emplace_back();
    for (const auto& ref : split[i].captions.references) {
      c.references.push_back(tok.detokenize(ref));
      rw.back().push_back(split_words(c.references.back()));
    }
    c.event_set_match = caption_event_set(hyps[i]) == clip_event_set(split[i].clip);
    correct += c.event_set_match;
    r.clips.push_back(std::move(c));
  }
  std::vector<double> b, rl, cd;
  r.bleu4 = bleu4(hw, rw, &b);
  r.rouge_l = rouge_l(hw, rw, &rl);
  r.cider = hw.size() >= 2 ? cider(hw, rw, &cd) : 0.0;
  for (std::size_t i = 0; i < r.clips.size(); ++i) {
    r.clips[i].bleu4 = b[i];
    r.clips[i].rouge_l = rl[i];
    r.clips[i].cider = cd.empty() ? 0.0 : cd[i];
  }
  r.event_accuracy = hyps.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(hyps.size());
  return r;
}

template <class S>
MetricReport evaluate_corpus(const CaptionerModel<S>& model, const std::vector<PairedClip>& split,
                             const DecodeConfig& cfg) {
  std::vector<TokenSequence> hyps;
  hyps.reserve(split.size());
  for (const auto& pc : split) hyps.push_back(decode_clip(model, pc.clip.features, cfg).tokens);
  MetricReport r = score_captions(hyps, split);
  r.decode = cfg;
  r.checkpoint_hash = checkpoint_hash(model);
  return r;
}

}  // namespace kdcap
