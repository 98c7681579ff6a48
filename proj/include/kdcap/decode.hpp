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

// Greedy and beam-search decoding, and cached teacher pseudo-labelling.
//
// Decoders work against any StepScorer: something that yields a start state
// (BOS already consumed), the next-token log-probabilities of a state, and
// the state after appending a token. Scores are raw summed log-probabilities
// with no length normalization. Equal scores are resolved by comparing token
// sequences lexicographically, so the smaller token id wins and a proper
// prefix beats its extensions.

#pragma once

#include <algorithm>
#include <concepts>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "kdcap/json.hpp"

#include "kdcap/model.hpp"

namespace kdcap {

template <class M>
concept StepScorer = requires(const M& m, const typename M::State& s, int tok) {
  { m.start() } -> std::convertible_to<typename M::State>;
  { m.log_probs(s) } -> std::convertible_to<const std::vector<double>&>;
  { m.extend(s, tok) } -> std::convertible_to<typename M::State>;
  { m.vocab_size() } -> std::convertible_to<int>;
};

struct Hypothesis {
  TokenSequence tokens{kBos};
  double log_prob = 0.0;
  bool finished = false;
};

struct DecodeConfig {
  int beam_size = 3;
  int max_len = 20;   // generated tokens, EOS included
  int min_len = 0;    // EOS is banned until this many tokens exist
  bool mask_special = true;  // never emit BOS or PAD
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DecodeConfig, beam_size, max_len, min_len, mask_special)

namespace detail {

inline bool token_allowed(const DecodeConfig& cfg, int tok, int generated) {
  if (cfg.mask_special && (tok == kBos || tok == kPad)) return false;
  if (tok == kEos && generated < cfg.min_len) return false;
  return true;
}

// Strict "a ranks before b": higher score, then lexicographically smaller.
inline bool ranks_before(double sa, const TokenSequence& ta, double sb, const TokenSequence& tb) {
  if (sa != sb) return sa > sb;
  return std::lexicographical_compare(ta.begin(), ta.end(), tb.begin(), tb.end());
}

}  // namespace detail

template <StepScorer M>
Hypothesis greedy_decode(const M& scorer, const DecodeConfig& cfg) {
  if (cfg.max_len < 1) throw DomainError("greedy_decode: max_len must be >= 1");
  Hypothesis h;
  auto state = scorer.start();
  for (int step = 0; step < cfg.max_len; ++step) {
    const auto& lp = scorer.log_probs(state);
    int best = -1;
    for (int v = 0; v < static_cast<int>(lp.size()); ++v) {
      if (!detail::token_allowed(cfg, v, step)) continue;
      if (best < 0 || lp[v] > lp[best]) best = v;
    }
    if (best < 0) throw DomainError("greedy_decode: every token is masked");
    h.tokens.push_back(best);
    h.log_prob += lp[best];
    if (best == kEos) {
      h.finished = true;
      break;
    }
    if (step + 1 < cfg.max_len) state = scorer.extend(state, best);
  }
  return h;
}

template <StepScorer M>
Hypothesis beam_search(const M& scorer, const DecodeConfig& cfg) {
  if (cfg.beam_size < 1) throw DomainError("beam_search: beam_size must be >= 1");
  if (cfg.max_len < 1) throw DomainError("beam_search: max_len must be >= 1");
  using State = typename M::State;
  struct Live {
    Hypothesis hyp;
    State state;
  };
  struct Cand {
    std::size_t parent;
    int tok;
    double score;
    TokenSequence tokens;
  };

  std::vector<Live> alive;
  alive.push_back({Hypothesis{}, scorer.start()});
  std::vector<Hypothesis> done;  // finished, plus unfinished survivors at max_len

  auto best_done = [&]() -> const Hypothesis* {
    const Hypothesis* b = nullptr;
    for (const auto& h : done)
      if (h.finished && (!b || detail::ranks_before(h.log_prob, h.tokens, b->log_prob, b->tokens))) b = &h;
    return b;
  };

  for (int step = 0; step < cfg.max_len && !alive.empty(); ++step) {
    const int width = cfg.beam_size - static_cast<int>(done.size());
    if (width <= 0) break;
    std::vector<Cand> cands;
    for (std::size_t i = 0; i < alive.size(); ++i) {
      const auto& lp = scorer.log_probs(alive[i].state);
      for (int v = 0; v < static_cast<int>(lp.size()); ++v) {
        if (!detail::token_allowed(cfg, v, step)) continue;
        Cand c{i, v, alive[i].hyp.log_prob + lp[v], alive[i].hyp.tokens};
        c.tokens.push_back(v);
        cands.push_back(std::move(c));
      }
    }
    const std::size_t keep = std::min<std::size_t>(cands.size(), static_cast<std::size_t>(width));
    std::partial_sort(cands.begin(), cands.begin() + static_cast<long>(keep), cands.end(),
                      [](const Cand& a, const Cand& b) { return detail::ranks_before(a.score, a.tokens, b.score, b.tokens); });
    cands.resize(keep);

    std::vector<Live> next;
    const bool last = step + 1 == cfg.max_len;
    for (auto& c : cands) {
      Hypothesis h{std::move(c.tokens), c.score, c.tok == kEos};
      if (h.finished || last) {
        done.push_back(std::move(h));
      } else {
        next.push_back({std::move(h), scorer.extend(alive[c.parent].state, c.tok)});
      }
    }
    // Scores only fall as tokens are appended, so a hypothesis already below
    // the best finished one can never overtake it.
    if (const Hypothesis* b = best_done()) {
      std::erase_if(next, [&](const Live& l) { return l.hyp.log_prob < b->log_prob; });
    }
    alive = std::move(next);
  }

  if (done.empty()) throw DomainError("beam_search: every token is masked");
  auto it = std::min_element(done.begin(), done.end(), [](const Hypothesis& a, const Hypothesis& b) {
    return detail::ranks_before(a.log_prob, a.tokens, b.log_prob, b.tokens);
  });
  return *it;
}

// Decodes one clip with a captioner: encode, decoder memory, beam search.
template <class S>
Hypothesis decode_clip(const CaptionerModel<S>& model, const Tensor<float>& features, const DecodeConfig& cfg) {
  Graph<S> g(false);
  Tensor<S> memory = model.decoder_memory(g, model.encode(g, {&features})).value();
  StepDecoder<S> dec(model, memory);
  if (cfg.beam_size == 1) return greedy_decode(dec, cfg);
  return beam_search(dec, cfg);
}

// ---------------------------------------------------------------------------
// Pseudo labels. Cache records are JSON lines
//   {"clip_seed", "teacher_hash", "token_ids", "log_prob"}.

struct PseudoLabelStats {
  std::size_t hits = 0;
  std::size_t generated = 0;
  std::vector<std::string> warnings;
};

template <class S>
std::vector<TokenSequence> pseudo_label(const CaptionerModel<S>& teacher, const std::vector<const SynthClip*>& clips,
                                        int beam_size = 3, const std::filesystem::path& cache_path = {},
                                        PseudoLabelStats* stats = nullptr) {
  PseudoLabelStats local;
  PseudoLabelStats& st = stats ? *stats : local;
  if (clips.empty()) return {};
  const std::string hash = checkpoint_hash(teacher);

  std::map<std::uint64_t, Hypothesis> cached;
  std::vector<std::string> kept_lines;
  bool dirty = false;
  if (!cache_path.empty() && std::filesystem::exists(cache_path)) {
    std::istringstream in(read_file(cache_path));
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      try {
        auto j = nlohmann::json::parse(line);
        Hypothesis h;
        h.tokens = j.at("token_ids").get<TokenSequence>();
        h.log_prob = j.at("log_prob").get<double>();
        if (h.tokens.empty() || h.tokens.front() != kBos) throw std::runtime_error("bad tokens");
        for (int t : h.tokens)
          if (t < 0 || t >= teacher.config().decoder.vocab_size) throw std::runtime_error("bad token id");
        h.finished = h.tokens.back() == kEos;
        kept_lines.push_back(line);
        if (j.at("teacher_hash").get<std::string>() == hash) cached[j.at("clip_seed").get<std::uint64_t>()] = h;
      } catch (const std::exception&) {
        st.warnings.push_back("pseudo-label cache line " + std::to_string(lineno) + " is corrupt; regenerating");
        dirty = true;
      }
    }
  }

  DecodeConfig dc;
  dc.beam_size = beam_size;
  dc.max_len = teacher.config().decoder.max_len;
  std::vector<TokenSequence> out;
  out.reserve(clips.size());
  for (const auto* c : clips) {
    if (auto it = cached.find(c->seed); it != cached.end()) {
      ++st.hits;
      out.push_back(it->second.tokens);
      continue;
    }
    Hypothesis h = decode_clip(teacher, c->features, dc);
    if (!h.finished) h.tokens.push_back(kEos);  // hard labels must be EOS-terminated
    ++st.generated;
    nlohmann::json rec = {{"clip_seed", c->seed}, {"teacher_hash", hash}, {"token_ids", h.tokens}, {"log_prob", h.log_prob}};
    kept_lines.push_back(rec.dump());
    cached[c->seed] = h;
    dirty = true;
    out.push_back(h.tokens);
  }
  if (!cache_path.empty() && dirty) {
    std::string body;
    for (const auto& l : kept_lines) body += l + "\n";
    write_file_atomic(cache_path, body);
  }
  return out;
}

}  // namespace kdcap
