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

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "kdcap/autograd.hpp"

namespace kdcap {

struct GradCheckReport {
  std::vector<std::string> names;
  std::vector<double> max_rel_error;  // one per parameter
  double worst = 0.0;
  double eps = 0.0;
  double tolerance = 0.0;
  bool pass = false;
  std::string diagnostic;
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

// Compares reverse-mode gradients of `loss_fn` against central finite
// differences, element by element, over every listed parameter.
template <class S>
GradCheckReport grad_check(const std::function<Var<S>(Graph<S>&)>& loss_fn,
                           const std::vector<Parameter<S>*>& params, double eps,
                           double tolerance = 1e-5) {
  if (!(eps > 0)) throw DomainError("grad_check: eps must be positive");
  GradCheckReport report;
  report.eps = eps;
  report.tolerance = tolerance;

  for (auto* p : params) p->zero_grad();
  {
    Graph<S> g;
    Var<S> loss = loss_fn(g);
    if (loss.value().size() != 1) throw DimensionError("grad_check: loss must be scalar");
    if (!std::isfinite(static_cast<double>(loss.item()))) {
      report.diagnostic = "non-finite loss at the unperturbed point";
      return report;
    }
    g.backward(loss);
  }

  auto eval = [&]() -> double {
    Graph<S> g(false);
    return static_cast<double>(loss_fn(g).item());
  };

  bool ok = true;
  for (auto* p : params) {
    double worst = 0.0;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const S orig = p->value.data[i];
      p->value.data[i] = orig + static_cast<S>(eps);
      double fp = eval();
      p->value.data[i] = orig - static_cast<S>(eps);
      double fm = eval();
      p->value.data[i] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        report.diagnostic = "non-finite loss when perturbing " + p->name + "[" +
                            std::to_string(i) + "]";
        ok = false;
        worst = std::numeric_limits<double>::infinity();
        break;
      }
      double numeric = (fp - fm) / (2.0 * eps);
      double analytic = p->grad.empty() ? 0.0 : static_cast<double>(p->grad.data[i]);
      worst = std::max(worst, relative_error(analytic, numeric));
    }
    report.names.push_back(p->name);
    report.max_rel_error.push_back(worst);
    report.worst = std::max(report.worst, worst);
  }
  report.pass = ok && report.worst <= tolerance;
  return report;
}

}  // namespace kdcap
