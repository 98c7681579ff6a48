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

#include <gtest/gtest.h>

#include "kdcap/distill.hpp"
#include "kdcap/stats.hpp"

namespace kdcap {
namespace {

const DatasetSplit& small_data() {
  static const DatasetSplit ds = [] {
    WorldConfig w;
    w.n_train = 24;
    w.n_val = 6;
    w.n_test = 6;
    w.n_audio_only = 16;
    return generate_dataset(w);
  }();
  return ds;
}

// A randomly initialized teacher is enough to exercise the plumbing.
const CaptionerModel<double>& teacher() {
  static const CaptionerModel<double> t = init_model<double>(teacher_config(), 99, "teacher");
  return t;
}

TrainConfig small_cfg(EncKind kind = EncKind::none, bool augment = false) {
  TrainConfig c;
  c.epochs = 2;
  c.warmup_epochs = 1;
  c.batch_size = 8;
  c.paired_per_batch = 4;
  c.audio_per_batch = 4;
  c.peak_lr = 1e-3;
  c.enc_kind = kind;
  c.augment = augment;
  c.seed = 5;
  return c;
}

TEST(Schedule, Examples) {
  LRSchedule s;
  EXPECT_DOUBLE_EQ(s.lr_at(0.0), 0.0);
  EXPECT_DOUBLE_EQ(s.lr_at(5.0), 5e-4);
  EXPECT_NEAR(s.lr_at(25.0), 5e-7, 5e-7 * 1e-9);
  EXPECT_THROW(s.lr_at(-0.1), DomainError);
  EXPECT_THROW(s.lr_at(25.5), DomainError);
}

TEST(Schedule, ContinuousAndStrictlyMonotone) {
  LRSchedule s;
  const double h = 1e-9;
  EXPECT_NEAR(s.lr_at(5.0 - h), s.lr_at(5.0 + h), 1e-10);
  double prev = s.lr_at(0.0);
  for (int i = 1; i <= 500; ++i) {
    const double e = 5.0 * i / 500.0;
    EXPECT_GT(s.lr_at(e), prev);
    prev = s.lr_at(e);
  }
  for (int i = 1; i <= 2000; ++i) {
    const double e = 5.0 + 20.0 * i / 2000.0;
    EXPECT_LT(s.lr_at(e), prev);
    prev = s.lr_at(e);
  }
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  c.augment = true;
  c.paired_per_batch = 10;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.warmup_epochs = 25;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.tau = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_NO_THROW(TrainConfig{}.validate());
}

TEST(Distill, DegeneratesToScratchBitForBit) {
  const auto& ds = small_data();
  auto cfg = small_cfg();
  auto scratch = train_supervised(init_model<double>(student_config(), cfg.seed, "student"), cfg, ds);
  cfg.weights.seq = 0.0;
  auto kd = distill_student(init_model<double>(student_config(), cfg.seed, "student"), cfg, teacher(), ds);
  EXPECT_EQ(kd.result.final_hash, scratch.result.final_hash);
  EXPECT_EQ(save_checkpoint(kd.final), save_checkpoint(scratch.final));
  ASSERT_EQ(kd.result.epochs.size(), scratch.result.epochs.size());
  for (std::size_t e = 0; e < kd.result.epochs.size(); ++e) {
    EXPECT_EQ(kd.result.epochs[e].paired.l_sup, scratch.result.epochs[e].paired.l_sup);
    EXPECT_EQ(kd.result.epochs[e].val_cider, scratch.result.epochs[e].val_cider);
  }
}

TEST(Distill, TeacherUntouchedAndLossModes) {
  const auto& ds = small_data();
  const std::string before = checkpoint_hash(teacher());
  std::vector<LossBreakdown> seen;
  TrainHooks<double> hooks;
  hooks.on_iteration = [&](const LossBreakdown& b) { seen.push_back(b); };
  auto cfg = small_cfg(EncKind::contrastive, true);
  auto out = distill_student(init_model<double>(student_config(EncKind::contrastive), 1, "student"), cfg, teacher(), ds,
                             {}, hooks);
  EXPECT_EQ(checkpoint_hash(teacher()), before);
  int paired = 0, audio = 0;
  for (const auto& b : seen) {
    if (b.mode == LossMode::audio_only) {
      ++audio;
      EXPECT_FALSE(b.l_sup.has_value());
      EXPECT_TRUE(b.l_enc.has_value());
      EXPECT_NEAR(b.total, b.l_seq + *b.l_enc, 1e-6);
    } else {
      ++paired;
      ASSERT_TRUE(b.l_sup && b.l_enc);
      EXPECT_NEAR(b.total, *b.l_sup + b.l_seq + *b.l_enc, 1e-6);
    }
  }
  // 24 paired clips at 4 per batch, 2 epochs.
  EXPECT_EQ(paired, 12);
  EXPECT_EQ(audio, 12);
  EXPECT_EQ(out.result.epochs.back().audio_only.iterations, 6);
}

TEST(Distill, AudioOnlyTermsTrainTheDecoder) {
  const auto& ds = small_data();
  // Paired terms off: only the audio-only half moves the student.
  auto cfg = small_cfg(EncKind::mse, true);
  cfg.epochs = 1;
  cfg.warmup_epochs = 0;
  cfg.weights.sup = 0.0;
  DatasetSplit audio_only = ds;
  auto init = init_model<double>(student_config(EncKind::mse), 2, "student");
  auto before = clone_model(init);
  auto out = distill_student(std::move(init), cfg, teacher(), audio_only);
  EXPECT_FALSE(component_equal(before, out.final, Component::decoder));
  EXPECT_FALSE(component_equal(before, out.final, Component::projection));
}

TEST(Distill, MseWithoutHeadIsConfigError) {
  auto cfg = small_cfg(EncKind::mse);
  EXPECT_THROW(distill_student(init_model<double>(student_config(), 1, "student"), cfg, teacher(), small_data()),
               ConfigError);
}

TEST(Distill, ZeroEpochsReturnsInitialization) {
  auto cfg = small_cfg();
  cfg.epochs = 0;
  auto init = init_model<double>(student_config(), 3, "student");
  const std::string h = checkpoint_hash(init);
  auto out = train_supervised(std::move(init), cfg, small_data());
  EXPECT_EQ(out.result.final_hash, h);
  EXPECT_EQ(out.result.best_hash, h);
  EXPECT_EQ(out.result.best_epoch, 0);
  EXPECT_TRUE(out.result.epochs.empty());
}

TEST(Distill, DeterministicAndResumable) {
  const auto& ds = small_data();
  auto cfg = small_cfg(EncKind::contrastive, false);
  cfg.epochs = 3;
  std::optional<TrainSnapshot<double>> first;
  TrainHooks<double> hooks;
  hooks.on_snapshot = [&](const TrainSnapshot<double>& s) {
    if (s.epoch == 1) first = load_snapshot<double>(save_snapshot(s));
  };
  auto make = [] { return init_model<double>(student_config(EncKind::contrastive), 4, "student"); };
  auto a = distill_student(make(), cfg, teacher(), ds, {}, hooks);
  auto b = distill_student(make(), cfg, teacher(), ds);
  EXPECT_EQ(a.result.final_hash, b.result.final_hash);
  EXPECT_EQ(a.result.best_hash, b.result.best_hash);
  ASSERT_TRUE(first.has_value());
  TrainHooks<double> resume;
  resume.resume = first;
  auto c = distill_student(make(), cfg, teacher(), ds, {}, resume);
  EXPECT_EQ(c.result.final_hash, a.result.final_hash);
  EXPECT_EQ(nlohmann::json(c.result).dump(), nlohmann::json(a.result).dump());
}

TEST(Distill, EpochPlanIgnoresObjective) {
  const auto& ds = small_data();
  auto p = plan_epoch(7, 3, ds.train, ds.audio_only.size());
  auto q = plan_epoch(7, 3, ds.train, ds.audio_only.size());
  EXPECT_EQ(p.order, q.order);
  EXPECT_EQ(p.audio_order, q.audio_order);
  EXPECT_NE(plan_epoch(7, 4, ds.train, ds.audio_only.size()).order, p.order);
  auto sorted = p.order;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) EXPECT_EQ(sorted[i], i);
  EXPECT_EQ(steps_per_epoch(200, 32), 7u);
  EXPECT_EQ(steps_per_epoch(2000, 16), 125u);
}

TEST(Bottleneck, FreezeContractsHold) {
  const auto& ds = small_data();
  auto cfg = small_cfg();
  cfg.epochs = 1;
  cfg.warmup_epochs = 0;
  auto r = run_bottleneck_analysis(cfg, teacher(), ds);
  EXPECT_TRUE(r.decoder_row_encoder_unchanged);
  EXPECT_TRUE(r.encoder_row_decoder_unchanged);
  auto direct = evaluate_corpus(teacher(), ds.test, DecodeConfig{3, 20, 0, true});
  EXPECT_EQ(r.teacher.cider, direct.cider);
  EXPECT_EQ(r.teacher.checkpoint_hash, direct.checkpoint_hash);
  EXPECT_EQ(bottleneck_encoder_config(teacher_config(), student_config()).encoder.d_enc(), 128);
  EXPECT_EQ(bottleneck_decoder_config(teacher_config(), student_config()).decoder.dim, 64);
}

RunResult fake_run(std::uint64_t seed, double cider) {
  RunResult r;
  r.seed = seed;
  r.test.cider = cider;
  r.test.bleu4 = cider / 10;
  return r;
}

TEST(Aggregate, MeanStdAndDeterminism) {
  auto one = aggregate_runs({fake_run(0, 3.0)});
  EXPECT_EQ(one.summary.at("cider").std, 0.0);
  std::vector<double> v = {3.1, 2.7, 3.6, 3.3, 2.9};
  auto run = [&](std::uint64_t s) { return fake_run(s, v[s]); };
  auto a = run_seeds({0, 1, 2, 3, 4}, run);
  auto b = run_seeds({0, 1, 2, 3, 4}, run);
  EXPECT_EQ(nlohmann::json(a).dump(), nlohmann::json(b).dump());
  double m = 0, s = 0;
  for (double x : v) m += x;
  m /= 5;
  for (double x : v) s += (x - m) * (x - m);
  EXPECT_NEAR(a.summary.at("cider").mean, m, 1e-15);
  EXPECT_NEAR(a.summary.at("cider").std, std::sqrt(s / 4), 1e-15);
  EXPECT_EQ(a.per_seed.at("cider"), v);
  EXPECT_THROW(run_seeds({}, run), DomainError);
}

TEST(Aggregate, WelchTTest) {
  auto t = welch_t_test({1, 2, 3, 4, 5}, {2, 4, 6, 8, 10});
  EXPECT_NEAR(t.t, -1.8973665961010275, 1e-12);
  EXPECT_NEAR(t.df, 5.882352941176471, 1e-12);
  EXPECT_NEAR(t.p, 0.10753119493062718, 1e-9);
  EXPECT_THROW(welch_t_test({1}, {1, 2}), DomainError);
  EXPECT_EQ(welch_t_test({1, 1}, {1, 1}).p, 1.0);
}

}  // namespace
}  // namespace kdcap
