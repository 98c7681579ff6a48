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

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "kdcap/common.hpp"

namespace kdcap {

template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MatMap = Eigen::Map<RowMat<S>>;
template <class S>
using ConstMatMap = Eigen::Map<const RowMat<S>>;

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

// Dense row-major array. Every op in the engine views a tensor as a matrix
// with rows = shape[0] and cols = product of the remaining extents.
template <class S>
struct Tensor {
  Shape shape;
  std::vector<S> data;

  Tensor() = default;
  explicit Tensor(Shape s, S fill = S(0)) : shape(std::move(s)), data(shape_size(shape), fill) {
    for (auto d : shape)
      if (d == 0) throw DimensionError("tensor extents must be positive: " + shape_str(shape));
  }
  Tensor(Shape s, std::vector<S> values) : shape(std::move(s)), data(std::move(values)) {
    if (shape_size(shape) != data.size())
      throw DimensionError("shape " + shape_str(shape) + " does not match " +
                           std::to_string(data.size()) + " values");
  }

  std::size_t size() const { return data.size(); }
  std::size_t rows() const { return shape.empty() ? 1 : shape[0]; }
  std::size_t cols() const { return rows() ? size() / rows() : 0; }
  bool empty() const { return data.empty(); }

  S& operator()(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  S operator()(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }
  S& operator[](std::size_t i) { return data[i]; }
  S operator[](std::size_t i) const { return data[i]; }

  MatMap<S> mat() { return MatMap<S>(data.data(), rows(), cols()); }
  ConstMatMap<S> mat() const { return ConstMatMap<S>(data.data(), rows(), cols()); }

  template <class T>
  Tensor<T> cast() const {
    Tensor<T> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    return out;
  }

  bool all_finite() const {
    for (S v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

template <class S>
Tensor<S> scalar_tensor(S v) {
  return Tensor<S>({1}, std::vector<S>{v});
}

}  // namespace kdcap
