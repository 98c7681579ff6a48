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

// Slow, literal reimplementations of the caption metrics used as test
// oracles. n-grams are joined strings, LCS is a memoized recursion, and
// nothing is shared with the library beyond the word type.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

namespace kdcap::oracle {

using Sentence = std::vector<std::string>;

struct Corpus {
  std::vector<Sentence> hyps;
  std::vector<std::vector<Sentence>> refs;
};

inline Corpus random_corpus(std::mt19937_64& rng, int max_clips = 6) {
  static const std::vector<std::string> words = {"a", "dog", "then", "siren", "bell", "the"};
  std::uniform_int_distribution<int> clips(2, max_clips), len(0, 8), nref(1, 3), w(0, 5);
  auto sentence = [&](int min_len) {
    Sentence s;
    int n = std::max(min_len, len(rng));
    for (int i = 0; i < n; ++i) s.push_back(words[w(rng)]);
    return s;
  };
  Corpus c;
  int n = clips(rng);
  for (int i = 0; i < n; ++i) {
    c.hyps.push_back(sentence(0));
    std::vector<Sentence> r;
    int k = nref(rng);
    for (int j = 0; j < k; ++j) r.push_back(sentence(1));
    c.refs.push_back(r);
  }
  return c;
}

inline std::vector<std::string> grams(const Sentence& s, int n) {
  std::vector<std::string> out;
  for (int i = 0; i + n <= static_cast<int>(s.size()); ++i) {
    std::string g;
    for (int k = 0; k < n; ++k) g += (k ? " " : "") + s[i + k];
    out.push_back(g);
  }
  return out;
}

inline int count_of(const std::vector<std::string>& v, const std::string& g) {
  return static_cast<int>(std::count(v.begin(), v.end(), g));
}

inline double bleu4(const std::vector<Sentence>& hyps, const std::vector<std::vector<Sentence>>& refs) {
  double match[4] = {0, 0, 0, 0}, total[4] = {0, 0, 0, 0}, c = 0, r = 0;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    const auto& h = hyps[i];
    c += static_cast<double>(h.size());
    // Closest reference length, shorter on ties.
    double best = 1e18, best_len = 0;
    for (const auto& ref : refs[i]) {
      double d = std::fabs(static_cast<double>(ref.size()) - static_cast<double>(h.size()));
      if (d < best || (d == best && static_cast<double>(ref.size()) < best_len)) {
        best = d;
        best_len = static_cast<double>(ref.size());
      }
    }
    r += best_len;
    for (int n = 1; n <= 4; ++n) {
      auto hg = grams(h, n);
      std::set<std::string> uniq(hg.begin(), hg.end());
      for (const auto& g : uniq) {
        int max_ref = 0;
        for (const auto& ref : refs[i]) max_ref = std::max(max_ref, count_of(grams(ref, n), g));
        match[n - 1] += std::min(count_of(hg, g), max_ref);
      }
      total[n - 1] += static_cast<double>(hg.size());
    }
  }
  if (c == 0) return 0.0;
  double prod = 1.0;
  for (int n = 0; n < 4; ++n) {
    double p = total[n] > 0 ? match[n] / total[n] : 0.0;
    prod *= p > 0 ? p : 1e-9;
  }
  double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::pow(prod, 0.25);
}

inline int lcs(const Sentence& a, const Sentence& b) {
  std::unordered_map<long, int> memo;
  std::function<int(int, int)> go = [&](int i, int j) -> int {
    if (i == static_cast<int>(a.size()) || j == static_cast<int>(b.size())) return 0;
    long key = static_cast<long>(i) * 1000 + j;
    if (auto it = memo.find(key); it != memo.end()) return it->second;
    int v = a[i] == b[j] ? 1 + go(i + 1, j + 1) : std::max(go(i + 1, j), go(i, j + 1));
    return memo[key] = v;
  };
  return go(0, 0);
}

inline double rouge_l(const std::vector<Sentence>& hyps, const std::vector<std::vector<Sentence>>& refs) {
  const double beta = 1.2;
  double sum = 0;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    double best = 0;
    for (const auto& ref : refs[i]) {
      int l = lcs(hyps[i], ref);
      if (l == 0) continue;
      double p = static_cast<double>(l) / hyps[i].size(), r = static_cast<double>(l) / ref.size();
      best = std::max(best, (1 + beta * beta) * p * r / (r + beta * beta * p));
    }
    sum += best;
  }
  return sum / hyps.size();
}

inline double cider_d(const std::vector<Sentence>& hyps, const std::vector<std::vector<Sentence>>& refs) {
  const double sigma = 6.0;
  const double n_docs = static_cast<double>(refs.size());
  std::unordered_map<std::string, double> df;
  for (const auto& clip : refs) {
    std::set<std::string> seen;
    for (const auto& r : clip)
      for (int n = 1; n <= 4; ++n)
        for (const auto& g : grams(r, n)) seen.insert(g);
    for (const auto& g : seen) df[g] += 1;
  }
  auto weight = [&](const Sentence& s, int n) {
    std::unordered_map<std::string, double> v;
    for (const auto& g : grams(s, n)) v[g] += 1;
    for (auto& [g, x] : v) x *= std::log(n_docs) - std::log(std::max(1.0, df.count(g) ? df[g] : 0.0));
    return v;
  };
  auto norm = [](const std::unordered_map<std::string, double>& v) {
    double s = 0;
    for (const auto& [g, x] : v) s += x * x;
    return std::sqrt(s);
  };
  double corpus = 0;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    double clip = 0;
    for (const auto& ref : refs[i]) {
      double delta = static_cast<double>(hyps[i].size()) - static_cast<double>(ref.size());
      double pen = std::exp(-delta * delta / (2 * sigma * sigma));
      for (int n = 1; n <= 4; ++n) {
        auto hv = weight(hyps[i], n), rv = weight(ref, n);
        double dot = 0;
        for (const auto& [g, x] : hv)
          if (rv.count(g)) dot += std::min(x, rv[g]) * rv[g];
        double nh = norm(hv), nr = norm(rv);
        double sim = (nh != 0 && nr != 0) ? dot / (nh * nr) : dot;
        clip += sim * pen / 4.0;
      }
    }
    corpus += clip / refs[i].size() * 10.0;
  }
  return corpus / hyps.size();
}

}  // namespace kdcap::oracle
