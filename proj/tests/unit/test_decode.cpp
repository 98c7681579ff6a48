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

#include <cmath>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "decode_cases.hpp"
#include "kdcap/decode.hpp"
#include "kdcap/synthworld.hpp"

namespace kdcap {
namespace {

using testing::TableScorer;

DecodeConfig cfg(int beam, int max_len) {
  DecodeConfig c;
  c.beam_size = beam;
  c.max_len = max_len;
  return c;
}

double rescore(const TableScorer& s, const TokenSequence& t) {
  double total = 0;
  auto st = s.start();
  for (std::size_t i = 1; i < t.size(); ++i) {
    total += s.log_probs(st)[static_cast<std::size_t>(t[i])];
    st = s.extend(st, t[i]);
  }
  return total;
}

TEST(Greedy, EosFirstStopsImmediately) {
  TableScorer s(5, 0);
  s.set({kBos}, {std::log(0.05), std::log(0.8), std::log(0.05), std::log(0.05), std::log(0.05)});
  auto h = greedy_decode(s, cfg(1, 10));
  EXPECT_EQ(h.tokens, (TokenSequence{kBos, kEos}));
  EXPECT_TRUE(h.finished);
  EXPECT_DOUBLE_EQ(h.log_prob, std::log(0.8));
}

TEST(Greedy, MaxLenOneEmitsOneToken) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto h = greedy_decode(TableScorer(6, seed), cfg(1, 1));
    EXPECT_EQ(h.tokens.size(), 2u);
    EXPECT_EQ(h.finished, h.tokens.back() == kEos);
  }
  EXPECT_THROW(greedy_decode(TableScorer(6, 0), cfg(1, 0)), DomainError);
}

TEST(Greedy, HandTracedTable) {
  // Tokens 0..2 are specials; 3, 4, 5 are words. The argmax path is 4, 3, EOS
  // even though a beam of two finds 5, EOS.
  TableScorer s(6, 0);
  const double lo = std::log(0.01);
  s.set({kBos}, {lo, std::log(0.05), lo, std::log(0.2), std::log(0.4), std::log(0.33)});
  s.set({kBos, 4}, {lo, std::log(0.1), lo, std::log(0.5), std::log(0.2), std::log(0.18)});
  s.set({kBos, 4, 3}, {lo, std::log(0.9), lo, std::log(0.03), std::log(0.03), std::log(0.02)});
  s.set({kBos, 5}, {lo, std::log(0.97), lo, lo, lo, lo});
  auto g = greedy_decode(s, cfg(1, 5));
  EXPECT_EQ(g.tokens, (TokenSequence{kBos, 4, 3, kEos}));
  EXPECT_NEAR(g.log_prob, std::log(0.4 * 0.5 * 0.9), 1e-12);
  auto b = beam_search(s, cfg(2, 5));
  EXPECT_EQ(b.tokens, (TokenSequence{kBos, 5, kEos}));
  EXPECT_NEAR(b.log_prob, std::log(0.33 * 0.97), 1e-12);
}

TEST(Beam, ExhaustiveWidthMatchesBruteForceOnTables) {
  for (std::uint64_t seed = 0; seed < 60; ++seed) {
    const int vocab = 4 + static_cast<int>(seed % 2), max_len = 1 + static_cast<int>(seed % 4);
    TableScorer s(vocab, seed);
    const int width = static_cast<int>(std::pow(vocab, max_len));
    auto b = beam_search(s, cfg(width, max_len));
    auto o = testing::brute_force_decode(s, cfg(width, max_len));
    EXPECT_EQ(b.tokens, o.tokens) << "seed " << seed;
    EXPECT_EQ(b.log_prob, o.log_prob);
    EXPECT_EQ(b.finished, o.finished);
  }
}

TEST(Beam, TieBreaksTowardSmallerIdsAndShorterSequences) {
  TableScorer s(5, 0);
  const double h = std::log(0.5), z = std::log(1e-9);
  s.set({kBos}, {z, z, z, h, h});
  s.set({kBos, 3}, {z, std::log(1 - 4e-9), z, z, z});
  s.set({kBos, 4}, {z, std::log(1 - 4e-9), z, z, z});
  auto b = beam_search(s, cfg(4, 3));
  EXPECT_EQ(b.tokens, (TokenSequence{kBos, 3, kEos}));
}

TEST(Beam, LogProbIsSumOfSteps) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    TableScorer s(8, seed);
    auto b = beam_search(s, cfg(3, 6));
    EXPECT_NEAR(b.log_prob, rescore(s, b.tokens), 1e-12);
    EXPECT_LE(b.log_prob, 0.0);
    EXPECT_EQ(b.finished, b.tokens.back() == kEos);
  }
}

TEST(Beam, MinLenBansEarlyEos) {
  TableScorer s(5, 1);
  s.set({kBos}, {0, std::log(0.9), 0, std::log(0.05), std::log(0.05)});
  DecodeConfig c = cfg(3, 5);
  c.min_len = 2;
  auto b = beam_search(s, c);
  EXPECT_GE(b.tokens.size(), 3u);
  EXPECT_NE(b.tokens[1], kEos);
  EXPECT_THROW(beam_search(s, cfg(0, 5)), DomainError);
}

TEST(Beam, ExhaustiveWidthMatchesBruteForceOnModels) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const int vocab = 4 + static_cast<int>(seed % 2), max_len = 2 + static_cast<int>(seed % 3);
    testing::TinyCaptioner m(vocab, max_len, seed);
    auto dec = m.scorer();
    const int width = static_cast<int>(std::pow(vocab, max_len));
    auto b = beam_search(dec, cfg(width, max_len));
    auto o = testing::brute_force_decode(dec, cfg(width, max_len));
    EXPECT_EQ(b.tokens, o.tokens) << "seed " << seed;
    EXPECT_EQ(b.log_prob, o.log_prob);
  }
}

TEST(Beam, WidthOneIsGreedyOnModels) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    testing::TinyCaptioner m(vocab().size(), 20, seed);
    auto dec = m.scorer();
    auto g = greedy_decode(dec, cfg(1, 20));
    auto b = beam_search(dec, cfg(1, 20));
    EXPECT_EQ(g.tokens, b.tokens) << "seed " << seed;
    EXPECT_EQ(g.log_prob, b.log_prob);
    EXPECT_EQ(g.finished, b.finished);
  }
}

// Not guaranteed for pruned beam search; this records how often a wider beam
// loses to a narrower one on random models.
TEST(Beam, WiderBeamRarelyLoses) {
  int losses = 0, trials = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    testing::TinyCaptioner m(vocab().size(), 8, seed + 1000);
    auto dec = m.scorer();
    auto g = greedy_decode(dec, cfg(1, 8));
    auto b3 = beam_search(dec, cfg(3, 8));
    auto b5 = beam_search(dec, cfg(5, 8));
    trials += 2;
    losses += (b3.log_prob < g.log_prob) + (b5.log_prob < b3.log_prob);
  }
  RecordProperty("beam_losses", losses);
  EXPECT_LE(losses, trials / 10);
}

TEST(PseudoLabel, CachedAndDeterministic) {
  WorldConfig w;
  w.n_train = 4;
  w.n_val = 2;
  w.n_test = 2;
  w.n_audio_only = 6;
  auto ds = generate_dataset(w);
  std::vector<const SynthClip*> clips;
  for (const auto& c : ds.audio_only) clips.push_back(&c);
  CaptionerModel<float> teacher(student_config(), 5);
  auto dir = std::filesystem::temp_directory_path() / "kdcap_pl_test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  auto cache = dir / "labels.jsonl";

  PseudoLabelStats s1, s2;
  auto a = pseudo_label(teacher, clips, 3, cache, &s1);
  auto b = pseudo_label(teacher, clips, 3, cache, &s2);
  EXPECT_EQ(a, b);
  EXPECT_EQ(s1.generated, 6u);
  EXPECT_EQ(s2.hits, 6u);
  EXPECT_EQ(s2.generated, 0u);
  for (const auto& t : a) {
    EXPECT_EQ(t.front(), kBos);
    EXPECT_EQ(t.back(), kEos);
  }
  EXPECT_EQ(pseudo_label(teacher, clips, 3), a);
  EXPECT_TRUE(pseudo_label(teacher, {}, 3, cache).empty());

  // A corrupt line is dropped with a warning and its clip regenerated.
  std::string body = read_file(cache);
  std::ofstream(cache, std::ios::binary) << "{not json\n" << body.substr(body.find('\n') + 1);
  PseudoLabelStats s3;
  auto c = pseudo_label(teacher, clips, 3, cache, &s3);
  EXPECT_EQ(c, a);
  EXPECT_EQ(s3.warnings.size(), 1u);
  EXPECT_EQ(s3.generated, 1u);

  // A different teacher misses the cache.
  CaptionerModel<float> other(student_config(), 6);
  PseudoLabelStats s4;
  pseudo_label(other, clips, 3, cache, &s4);
  EXPECT_EQ(s4.hits, 0u);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace kdcap
