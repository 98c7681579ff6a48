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

#include <gtest/gtest.h>

#include "kdcap/profile.hpp"

namespace kdcap {
namespace {

// Encoder: one conv block 4 -> 3 channels, k=3, stride 1, pad 1.
// Decoder: 2 layers, dim 4, ff 8, vocabulary 5.
ModelConfig toy_config() {
  ModelConfig c;
  c.encoder.input_dim = 2;
  c.encoder.time_channels = 2;
  c.encoder.blocks = {{3, 3, 1, 1}};
  c.decoder = {2, 4, 2, 8, 5, 3};
  return c;
}

TEST(Params, HandCounts) {
  ParamStore<float> store;
  store.add("w", Component::decoder, Tensor<float>({3, 4}));
  store.add("b", Component::decoder, Tensor<float>({3}));
  EXPECT_EQ(count_params(store).total, 15u);
  EXPECT_EQ(count_params(ParamStore<float>{}).total, 0u);
}

TEST(Params, ComponentsPartitionTotal) {
  for (auto kind : {EncKind::none, EncKind::contrastive, EncKind::mse}) {
    CaptionerModel<float> m(student_config(kind), 0);
    auto c = count_params(m);
    EXPECT_EQ(c.total, c.encoder + c.decoder + c.projection);
    EXPECT_EQ(c.total, m.params().scalar_count());
    EXPECT_EQ(c.projection > 0, kind != EncKind::none);
  }
  // Frozen parameters still count.
  CaptionerModel<float> m(student_config(), 0);
  auto before = count_params(m).total;
  m.set_frozen(Component::encoder, true);
  EXPECT_EQ(count_params(m).total, before);
}

TEST(Flops, SingleLayerExamples) {
  EXPECT_EQ(layer_flops({LayerKind::conv1d, "conv", 10, 2, 3, 3, 0, true}), 360u);
  EXPECT_EQ(layer_flops({LayerKind::linear, "fc", 1, 4, 3, 1, 0, false}), 24u);
  EXPECT_EQ(layer_flops({LayerKind::norm, "ln", 7, 4, 4, 1, 0, false}), 0u);
  EXPECT_THROW(layer_flops({LayerKind::recurrent, "gru", 1, 4, 4, 1, 0, false}), UnsupportedLayer);
  EXPECT_THROW(count_flops(std::vector<LayerOp>{{LayerKind::recurrent, "gru", 1, 4, 4, 1, 0, false}}),
               UnsupportedLayer);
}

TEST(Flops, ToyModelHandTotal) {
  CaptionerModel<float> m(toy_config(), 0);
  // T_in = 10 -> T' = 10.  Conv: 2*10*3*4*3 = 720.
  // Decoder step with prefix length l, per layer:
  //   self q,k,v,o   4 * 2*l*4*4        = 128 l
  //   self attention 2 * 2*l*l*4        = 16 l^2
  //   cross q,o      2 * 2*l*4*4        = 64 l
  //   cross k,v      2 * 2*10*3*4       = 480
  //   cross attention 2 * 2*l*10*4      = 160 l
  //   ff1, ff2       2 * 2*l*4*8        = 128 l
  // Two layers plus the output layer 2*l*4*5 = 40 l:
  //   960 + 1000 l + 32 l^2  ->  l=1: 1992, l=2: 3088.
  auto f = count_flops(m, 10, 2);
  EXPECT_EQ(f.encoder, 720u);
  EXPECT_EQ(f.decoder, 1992u + 3088u);
  EXPECT_EQ(f.total, 5800u);
}

TEST(Flops, EncoderLinearInTime) {
  CaptionerModel<float> m(student_config(), 0);
  EXPECT_EQ(count_flops(m, 200, 1).encoder, 2 * count_flops(m, 100, 1).encoder);
  EXPECT_THROW(count_flops(m, 0, 1), DomainError);
  EXPECT_THROW(count_flops(m, 100, 0), DomainError);
}

TEST(Flops, DefaultRatios) {
  CaptionerModel<float> t(teacher_config(), 0);
  CaptionerModel<float> s(student_config(EncKind::contrastive), 0);
  const double params = static_cast<double>(count_params(s).total) / static_cast<double>(count_params(t).total);
  const double flops = static_cast<double>(count_flops(s, 100, 20).total) / static_cast<double>(count_flops(t, 100, 20).total);
  EXPECT_LT(params, 0.20);
  EXPECT_LT(flops, 0.25);
}

TEST(Latency, MeanOfSamples) {
  CaptionerModel<float> s(student_config(), 0);
  auto one = bench_latency(s, 100, 5, 1);
  ASSERT_EQ(one.latency_samples.size(), 1u);
  EXPECT_EQ(one.latency_mean, one.latency_samples[0]);
  auto r = bench_latency(s, 100, 5, 4);
  ASSERT_EQ(r.latency_samples.size(), 4u);
  double sum = 0;
  for (double x : r.latency_samples) sum += x;
  EXPECT_EQ(r.latency_mean, sum / 4.0);
  EXPECT_GT(r.flops.total, 0u);
  nlohmann::json j = r;
  EXPECT_EQ(j.at("latency_samples").size(), 4u);
  EXPECT_THROW(bench_latency(s, 100, 5, 0), DomainError);
  EXPECT_THROW(bench_latency(s, 100, 21, 1), DomainError);
}

TEST(Latency, StudentFasterThanTeacher) {
  CaptionerModel<float> t(teacher_config(), 0);
  CaptionerModel<float> s(student_config(), 0);
  EXPECT_LT(bench_latency(s, 100, 20, 3).latency_mean, bench_latency(t, 100, 20, 3).latency_mean);
}

}  // namespace
}  // namespace kdcap
