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
#include <random>

#include <gtest/gtest.h>

#include "kdcap/gradcheck.hpp"
#include "kdcap/losses.hpp"
#include "kdcap/model.hpp"
#include "kdcap/optim.hpp"

namespace kdcap {
namespace {

Tensor<float> random_clip(std::size_t t, std::size_t f, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<float> d(0.0f, 1.0f);
  Tensor<float> x({t, f});
  for (auto& v : x.data) v = d(rng);
  return x;
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.encoder.input_dim = 3;
  c.encoder.time_channels = 2;
  c.encoder.blocks = {{4, 3, 2, 1}, {4, 3, 1, 1}};
  c.decoder = {1, 4, 2, 6, 6, 5};
  return c;
}

TokenSequence random_tokens(Rng& rng, int vocab, int len) {
  std::uniform_int_distribution<int> d(3, vocab - 1);
  TokenSequence s{kBos};
  for (int i = 0; i < len; ++i) s.push_back(d(rng));
  s.push_back(kEos);
  return s;
}

TEST(Encode, TemporalResolutions) {
  auto clip = random_clip(100, 16, 1);
  CaptionerModel<float> teacher(teacher_config(), 1);
  CaptionerModel<float> student(student_config(), 1);
  auto e1 = encode(teacher, clip);
  auto e2 = encode(student, clip);
  EXPECT_EQ(e1.rows(), 25u);
  EXPECT_EQ(e1.cols(), 128u);
  EXPECT_EQ(e2.rows(), 20u);
  EXPECT_EQ(e2.cols(), 64u);
  for (float v : e1.data) EXPECT_TRUE(std::isfinite(v));
  EXPECT_EQ(encode(teacher, clip).data, e1.data);
}

TEST(Encode, ZeroFinalBlockGivesConstantRows) {
  CaptionerModel<double> m(student_config(), 3);
  auto& last = m.conv_layers().back();
  std::fill(last.w->value.data.begin(), last.w->value.data.end(), 0.0);
  std::fill(last.b->value.data.begin(), last.b->value.data.end(), 0.0);
  auto e = encode(m, random_clip(100, 16, 2));
  for (std::size_t i = 1; i < e.rows(); ++i)
    for (std::size_t j = 0; j < e.cols(); ++j) EXPECT_EQ(e(i, j), e(0, j));
}

TEST(Encode, ShapeMismatch) {
  CaptionerModel<float> m(student_config(), 0);
  EXPECT_THROW(encode(m, random_clip(100, 15, 0)), DimensionError);
}

TEST(Config, InvalidConfigsRejected) {
  auto c = student_config();
  c.decoder.heads = 3;
  EXPECT_THROW(CaptionerModel<float>(c, 0), ConfigError);
  c = student_config();
  c.encoder.blocks = {{8, 5, 40, 0}};
  EXPECT_THROW(c.validate(100), ConfigError);
  EXPECT_THROW(parse_enc_kind("kl"), ConfigError);
}

TEST(TeacherForcing, RowsAreDistributions) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    CaptionerModel<double> m(student_config(), seed);
    auto mem = encode(m, random_clip(100, 16, seed + 10));
    Rng rng(seed);
    auto tokens = random_tokens(rng, vocab().size(), 6);
    auto p = teacher_forcing_probs(m, mem, tokens);
    ASSERT_EQ(p.rows(), tokens.size() - 1);
    for (std::size_t i = 0; i < p.rows(); ++i) {
      double s = 0;
      for (std::size_t j = 0; j < p.cols(); ++j) s += p(i, j);
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(TeacherForcing, TokenOutOfVocabulary) {
  CaptionerModel<float> m(student_config(), 0);
  auto mem = encode(m, random_clip(100, 16, 0));
  EXPECT_THROW(teacher_forcing_probs(m, mem, {kBos, vocab().size(), kEos}), VocabularyError);
}

TEST(TeacherForcing, CausalMaskIsExact) {
  CaptionerModel<double> m(student_config(), 4);
  auto mem = encode(m, random_clip(100, 16, 5));
  Rng rng(6);
  auto tokens = random_tokens(rng, vocab().size(), 8);
  auto base = teacher_forcing_probs(m, mem, tokens);
  for (std::size_t n = 1; n + 1 < tokens.size(); ++n) {
    auto perturbed = tokens;
    perturbed[n] = perturbed[n] == 5 ? 6 : 5;
    auto p = teacher_forcing_probs(m, mem, perturbed);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < p.cols(); ++j) ASSERT_EQ(p(r, j), base(r, j)) << "row " << r << " pos " << n;
  }
}

TEST(TeacherForcing, FramePermutationInvariance) {
  CaptionerModel<double> m(student_config(), 7);
  auto mem = encode(m, random_clip(100, 16, 8));
  Tensor<double> rev(mem.shape);
  for (std::size_t i = 0; i < mem.rows(); ++i)
    for (std::size_t j = 0; j < mem.cols(); ++j) rev(i, j) = mem(mem.rows() - 1 - i, j);
  Rng rng(9);
  auto tokens = random_tokens(rng, vocab().size(), 5);
  auto a = teacher_forcing_probs(m, mem, tokens);
  auto b = teacher_forcing_probs(m, rev, tokens);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.data[i], b.data[i], 1e-12);
}

TEST(StepDecoder, MatchesFullRecompute) {
  CaptionerModel<double> m(student_config(EncKind::mse), 11);
  auto mem = apply_inference_projection(m, encode(m, random_clip(100, 16, 12)));
  Rng rng(13);
  auto tokens = random_tokens(rng, vocab().size(), 7);
  auto full = teacher_forcing_probs(m, mem, tokens);
  StepDecoder<double> dec(m, mem);
  auto st = dec.start();
  for (std::size_t r = 0; r < full.rows(); ++r) {
    if (r > 0) st = dec.extend(st, tokens[r]);
    for (std::size_t j = 0; j < full.cols(); ++j) EXPECT_NEAR(std::exp(dec.log_probs(st)[j]), full(r, j), 1e-12);
  }
}

TEST(Projection, ContrastiveIsPassThroughWithWarning) {
  CaptionerModel<float> m(student_config(EncKind::contrastive), 0);
  auto e = encode(m, random_clip(100, 16, 1));
  bool warned = false;
  auto out = apply_inference_projection(m, e, &warned);
  EXPECT_TRUE(warned);
  EXPECT_EQ(out.data, e.data);
  EXPECT_EQ(m.config().memory_dim(), 64);
}

TEST(Projection, IdentityInitSquareMse) {
  auto c = student_config(EncKind::mse);
  c.teacher_dim = 64;
  c.identity_projection_init = true;
  CaptionerModel<double> m(c, 0);
  auto e = encode(m, random_clip(100, 16, 1));
  bool warned = true;
  auto out = apply_inference_projection(m, e, &warned);
  EXPECT_FALSE(warned);
  EXPECT_EQ(out.data, e.data);
}

TEST(Projection, MseProjectsToTeacherDim) {
  CaptionerModel<float> m(student_config(EncKind::mse), 0);
  auto out = apply_inference_projection(m, encode(m, random_clip(100, 16, 1)));
  EXPECT_EQ(out.rows(), 20u);
  EXPECT_EQ(out.cols(), 128u);
  EXPECT_TRUE(m.has_head(EncKind::mse));
  EXPECT_FALSE(m.has_head(EncKind::contrastive));
}

// One supervised AdamW step; returns a snapshot of every parameter before it.
std::vector<std::vector<double>> one_step(CaptionerModel<double>& m) {
  std::vector<std::vector<double>> before;
  for (const auto& p : m.params()) before.push_back(p.value.data);
  auto clip = random_clip(100, 16, 21);
  TokenSequence gt = vocab().tokenize("a dog followed by a siren");
  m.params().zero_grad();
  Graph<double> g;
  auto frames = m.encode(g, {&clip});
  auto lp = m.decode_log_probs(g, m.decoder_memory(g, frames), frames.rows(),
                               make_token_batch({&gt}, 21));
  auto loss = token_loss(lp, make_token_batch({&gt}, 21), SmoothingConfig{});
  g.backward(loss);
  AdamW<double> opt;
  opt.step(m.params(), 1e-3);
  return before;
}

std::pair<bool, bool> changed(const CaptionerModel<double>& m, const std::vector<std::vector<double>>& before) {
  bool enc = false, dec = false;
  std::size_t i = 0;
  for (const auto& p : m.params()) {
    bool diff = p.value.data != before[i++];
    if (p.component == Component::encoder) enc = enc || diff;
    if (p.component == Component::decoder) dec = dec || diff;
  }
  return {enc, dec};
}

TEST(Freeze, EncoderFrozen) {
  CaptionerModel<double> m(student_config(), 1);
  set_frozen(m, Component::encoder, true);
  auto before = one_step(m);
  std::size_t i = 0;
  for (const auto& p : m.params()) {
    if (p.component == Component::encoder) EXPECT_EQ(p.value.data, before[i]) << p.name;
    ++i;
  }
  EXPECT_EQ(changed(m, before), std::make_pair(false, true));
}

TEST(Freeze, DecoderFrozenAndUnfreeze) {
  CaptionerModel<double> m(student_config(), 2);
  set_frozen(m, Component::decoder, true);
  auto before = one_step(m);
  EXPECT_EQ(changed(m, before), std::make_pair(true, false));
  set_frozen(m, Component::decoder, false);
  before = one_step(m);
  EXPECT_EQ(changed(m, before), std::make_pair(true, true));
}

TEST(Model, StudentUnderFifthOfTeacher) {
  CaptionerModel<float> t(teacher_config(), 0);
  CaptionerModel<float> s(student_config(EncKind::contrastive), 0);
  double ratio = static_cast<double>(s.params().scalar_count()) / t.params().scalar_count();
  EXPECT_LT(ratio, 0.20);
}

TEST(Model, GradientReachesEncoderThroughCrossAttention) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    CaptionerModel<double> m(tiny_config(), seed);
    auto clip = random_clip(8, 3, seed + 100);
    Rng rng(seed);
    auto gt = random_tokens(rng, 6, 3);
    auto tb = make_token_batch({&gt}, 6);
    std::vector<Parameter<double>*> enc;
    for (auto& p : m.params())
      if (p.component == Component::encoder) enc.push_back(&p);
    auto r = grad_check<double>(
        [&](Graph<double>& g) {
          auto frames = m.encode(g, {&clip});
          return token_loss(m.decode_log_probs(g, frames, frames.rows(), tb), tb, SmoothingConfig{});
        },
        enc, 1e-5, 1e-5);
    EXPECT_TRUE(r.pass) << "seed " << seed << " worst " << r.worst << " " << r.diagnostic;
    double norm = 0;
    for (auto* p : enc)
      for (double v : p->grad.data) norm += v * v;
    EXPECT_GT(norm, 0.0);
  }
}

TEST(Checkpoint, RoundTripIsByteIdentical) {
  CaptionerModel<float> m(student_config(EncKind::mse), 42);
  auto bytes = save_checkpoint(m);
  auto back = load_checkpoint<float>(bytes);
  EXPECT_EQ(save_checkpoint(back), bytes);
  EXPECT_EQ(checkpoint_hash(back), checkpoint_hash(m));
  EXPECT_EQ(back.config().kd_head, EncKind::mse);
  CaptionerModel<float> other(student_config(EncKind::mse), 43);
  EXPECT_NE(checkpoint_hash(other), checkpoint_hash(m));
}

TEST(Checkpoint, CopyMatchingMovesOneComponent) {
  CaptionerModel<float> a(student_config(), 1), b(student_config(), 2);
  copy_matching(a, b, Component::decoder);
  for (const auto& p : a.params()) {
    const auto* q = b.params().find(p.name);
    if (p.component == Component::decoder) EXPECT_EQ(p.value.data, q->value.data);
    else if (p.name.ends_with(".w")) EXPECT_NE(p.value.data, q->value.data);
  }
  CaptionerModel<float> t(teacher_config(), 0);
  EXPECT_THROW(copy_matching(t, b, Component::decoder), DimensionError);
}

}  // namespace
}  // namespace kdcap
