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

#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "kdcap/json.hpp"

#include "kdcap/autograd.hpp"

namespace kdcap {

// Linear warmup from 0 to `peak` over `warmup` epochs, then exponential decay
// reaching `floor` at `epochs`. The epoch argument is real-valued so the rate
// can be interpolated per optimizer step.
struct LRSchedule {
  double peak = 5e-4;
  double floor = 5e-7;
  double warmup = 5;
  double epochs = 25;

  void validate() const {
    if (!(peak > 0) || !(floor > 0) || floor > peak) throw ConfigError("lr: need 0 < floor <= peak");
    if (warmup < 0 || epochs < 0) throw ConfigError("lr: epochs must be non-negative");
    if (epochs > 0 && !(warmup < epochs)) throw ConfigError("lr: warmup epochs must be < epochs");
  }

  double lr_at(double epoch) const {
    if (!(epoch >= 0.0 && epoch <= epochs)) throw DomainError("lr_at: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(epochs) + "]");
    if (epoch <= warmup) return warmup > 0 ? peak * (epoch / warmup) : peak;
    return peak * std::pow(floor / peak, (epoch - warmup) / (epochs - warmup));
  }
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(LRSchedule, peak, floor, warmup, epochs)

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-6;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AdamWConfig, beta1, beta2, eps, weight_decay)

// Adam with decoupled weight decay. Frozen parameters are skipped entirely:
// no update, no moment bookkeeping.
template <class S>
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  void step(ParamStore<S>& params, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& p : params) {
      if (p.frozen) continue;
      if (p.grad.shape != p.value.shape) p.zero_grad();
      auto& st = state_[p.name];
      if (st.m.size() != p.value.size()) {
        st.m.assign(p.value.size(), S(0));
        st.v.assign(p.value.size(), S(0));
      }
      const S b1 = static_cast<S>(cfg_.beta1), b2 = static_cast<S>(cfg_.beta2);
      const S slr = static_cast<S>(lr), wd = static_cast<S>(cfg_.weight_decay), eps = static_cast<S>(cfg_.eps);
      const S ic1 = static_cast<S>(1.0 / c1), ic2 = static_cast<S>(1.0 / c2);
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const S g = p.grad.data[i];
        st.m[i] = b1 * st.m[i] + (S(1) - b1) * g;
        st.v[i] = b2 * st.v[i] + (S(1) - b2) * g * g;
        const S mh = st.m[i] * ic1, vh = st.v[i] * ic2;
        p.value.data[i] -= slr * (mh / (std::sqrt(vh) + eps) + wd * p.value.data[i]);
      }
    }
  }

  std::uint64_t steps() const { return t_; }

  struct Moments {
    std::vector<S> m, v;
  };
  const std::unordered_map<std::string, Moments>& state() const { return state_; }
  void restore(std::uint64_t t, std::unordered_map<std::string, Moments> st) {
    t_ = t;
    state_ = std::move(st);
  }

 private:
  AdamWConfig cfg_;
  std::uint64_t t_ = 0;
  std::unordered_map<std::string, Moments> state_;
};

}  // namespace kdcap
