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
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "kdcap/common.hpp"

namespace kdcap {

inline double mean_of(const std::vector<double>& x) {
  if (x.empty()) throw DomainError("mean of an empty sample");
  double s = 0;
  for (double v : x) s += v;
  return s / static_cast<double>(x.size());
}

// Sample standard deviation (n - 1 denominator); 0 for a single sample.
inline double std_of(const std::vector<double>& x) {
  if (x.empty()) throw DomainError("std of an empty sample");
  if (x.size() == 1) return 0.0;
  double m = mean_of(x), s = 0;
  for (double v : x) s += (v - m) * (v - m);
  return std::sqrt(s / static_cast<double>(x.size() - 1));
}

struct TTest {
  double t = 0;
  double df = 0;
  double p = 1;  // two-sided
};

// Welch's unequal-variance two-sample t-test.
inline TTest welch_t_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() < 2 || b.size() < 2) throw DomainError("t-test needs at least two samples per group");
  const double ma = mean_of(a), mb = mean_of(b);
  const double va = std::pow(std_of(a), 2) / static_cast<double>(a.size());
  const double vb = std::pow(std_of(b), 2) / static_cast<double>(b.size());
  TTest r;
  if (va + vb == 0) {
    r.t = ma == mb ? 0.0 : (ma > mb ? INFINITY : -INFINITY);
    r.df = static_cast<double>(a.size() + b.size() - 2);
    r.p = ma == mb ? 1.0 : 0.0;
    return r;
  }
  r.t = (ma - mb) / std::sqrt(va + vb);
  r.df = (va + vb) * (va + vb) /
         (va * va / static_cast<double>(a.size() - 1) + vb * vb / static_cast<double>(b.size() - 1));
  boost::math::students_t dist(r.df);
  r.p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t)));
  return r;
}

}  // namespace kdcap
