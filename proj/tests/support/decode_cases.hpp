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

// Decoding fixtures: a prefix-keyed table scorer, tiny random captioners,
// and an exhaustive search over every admissible output sequence.

#pragma once

#include <cmath>
#include <map>
#include <random>

#include "kdcap/decode.hpp"

namespace kdcap::testing {

// Next-token log-probabilities drawn afresh (but reproducibly) for every
// prefix, so nothing about the search structure is shared with a model.
class TableScorer {
 public:
  using State = TokenSequence;

  TableScorer(int vocab, std::uint64_t seed, double spread = 2.0) : vocab_(vocab), seed_(seed), spread_(spread) {}

  State start() const { return {kBos}; }
  int vocab_size() const { return vocab_; }
  State extend(const State& s, int tok) const {
    State n = s;
    n.push_back(tok);
    return n;
  }
  const std::vector<double>& log_probs(const State& s) const {
    auto it = cache_.find(s);
    if (it != cache_.end()) return it->second;
    std::uint64_t h = seed_;
    for (int t : s) h = derive_seed(h, "prefix", static_cast<std::uint64_t>(t));
    Rng rng(h);
    std::normal_distribution<double> d(0.0, spread_);
    std::vector<double> lp(static_cast<std::size_t>(vocab_));
    double mx = -1e300;
    for (auto& v : lp) mx = std::max(mx, v = d(rng));
    double z = 0;
    for (double v : lp) z += std::exp(v - mx);
    for (auto& v : lp) v -= mx + std::log(z);
    return cache_[s] = lp;
  }

  // Explicit overrides for hand-traced examples.
  void set(const State& prefix, std::vector<double> lp) { cache_[prefix] = std::move(lp); }

 private:
  int vocab_;
  std::uint64_t seed_;
  double spread_;
  mutable std::map<State, std::vector<double>> cache_;
};

// Best admissible sequence by exhaustive enumeration: every sequence that
// ends in EOS within max_len tokens, or runs to max_len without one. Ties go
// to the lexicographically smaller sequence.
template <StepScorer M>
Hypothesis brute_force_decode(const M& scorer, const DecodeConfig& cfg) {
  Hypothesis best;
  bool have = false;
  auto consider = [&](const TokenSequence& t, double score, bool finished) {
    bool better = !have || score > best.log_prob ||
                  (score == best.log_prob && std::lexicographical_compare(t.begin(), t.end(), best.tokens.begin(),
                                                                          best.tokens.end()));
    if (better) best = {t, score, finished};
    have = true;
  };
  auto rec = [&](auto&& self, const typename M::State& state, TokenSequence& tokens, double score) -> void {
    const int generated = static_cast<int>(tokens.size()) - 1;
    const auto lp = scorer.log_probs(state);
    for (int v = 0; v < scorer.vocab_size(); ++v) {
      if (cfg.mask_special && (v == kBos || v == kPad)) continue;
      if (v == kEos && generated < cfg.min_len) continue;
      tokens.push_back(v);
      const double s = score + lp[static_cast<std::size_t>(v)];
      if (v == kEos) consider(tokens, s, true);
      else if (generated + 1 == cfg.max_len) consider(tokens, s, false);
      else self(self, scorer.extend(state, v), tokens, s);
      tokens.pop_back();
    }
  };
  TokenSequence tokens{kBos};
  rec(rec, scorer.start(), tokens, 0.0);
  return best;
}

inline ModelConfig tiny_decoder_config(int vocab, int max_len) {
  ModelConfig c;
  c.encoder.input_dim = 4;
  c.encoder.time_channels = 2;
  c.encoder.blocks = {{6, 3, 2, 1}};
  c.decoder = {1, 8, 2, 12, vocab, max_len};
  return c;
}

// A randomly initialized tiny captioner with its decoder memory for one
// random clip. Output layer weights are scaled up so the next-token
// distributions are far from uniform.
struct TinyCaptioner {
  CaptionerModel<double> model;
  Tensor<double> memory;

  TinyCaptioner(int vocab, int max_len, std::uint64_t seed)
      : model(tiny_decoder_config(vocab, max_len), seed) {
    Rng rng(derive_seed(seed, "tiny-clip"));
    std::normal_distribution<float> d(0.0f, 1.0f);
    Tensor<float> clip({12, 4});
    for (auto& v : clip.data) v = d(rng);
    for (auto& v : model.output_layer().w->value.data) v *= 6.0;
    Graph<double> g(false);
    memory = model.decoder_memory(g, model.encode(g, {&clip})).value();
  }
  StepDecoder<double> scorer() const { return StepDecoder<double>(model, memory); }
};

}  // namespace kdcap::testing
