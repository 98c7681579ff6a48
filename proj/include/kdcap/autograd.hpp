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

// Tape-based reverse-mode differentiation over 2-D tensors.
//
// A Graph records every op applied during one forward pass. Nodes are
// appended in evaluation order, so walking the tape backwards is a valid
// topological order for gradient propagation. Parameters enter a graph as
// leaves; after backward() their gradients are accumulated into
// Parameter::grad unless the parameter is frozen, in which case the leaf does
// not require a gradient at all and the subgraph feeding only from frozen
// leaves is skipped.

#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "kdcap/tensor.hpp"

namespace kdcap {

enum class Component { encoder, decoder, projection };

inline const char* component_name(Component c) {
  switch (c) {
    case Component::encoder: return "encoder";
    case Component::decoder: return "decoder";
    case Component::projection: return "projection";
  }
  return "?";
}

template <class S>
struct Parameter {
  std::string name;
  Component component = Component::encoder;
  Tensor<S> value;
  Tensor<S> grad;
  bool frozen = false;

  void zero_grad() {
    if (grad.shape != value.shape) grad = Tensor<S>(value.shape);
    else std::fill(grad.data.begin(), grad.data.end(), S(0));
  }
};

// Owns parameters with stable addresses; layers hold raw pointers into it.
template <class S>
class ParamStore {
 public:
  Parameter<S>& add(std::string name, Component c, Tensor<S> init) {
    if (index_.count(name)) throw std::logic_error("duplicate parameter " + name);
    auto& p = params_.emplace_back();
    p.name = std::move(name);
    p.component = c;
    p.value = std::move(init);
    index_[p.name] = params_.size() - 1;
    return p;
  }

  Parameter<S>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }
  const Parameter<S>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  std::size_t size() const { return params_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  std::deque<Parameter<S>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <class S>
class Graph;

template <class S>
class Var {
 public:
  Var() = default;
  Var(Graph<S>* g, int id) : g_(g), id_(id) {}

  bool valid() const { return g_ != nullptr; }
  int id() const { return id_; }
  Graph<S>& graph() const { return *g_; }
  const Tensor<S>& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  // Convenience for scalar nodes.
  S item() const { return value().data.at(0); }

 private:
  Graph<S>* g_ = nullptr;
  int id_ = -1;
};

template <class S>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, int)>;

  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var<S> constant(Tensor<S> t) {
    auto& n = nodes_.emplace_back();
    n.own = std::move(t);
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  Var<S> param(Parameter<S>& p) {
    if (auto it = param_ids_.find(&p); it != param_ids_.end()) return {this, it->second};
    auto& n = nodes_.emplace_back();
    n.ref = &p.value;
    n.param = &p;
    n.needs_grad = grad_enabled_ && !p.frozen;
    int id = static_cast<int>(nodes_.size()) - 1;
    param_ids_[&p] = id;
    return {this, id};
  }

  // Records an op result. The backward closure is dropped when no parent
  // needs a gradient.
  Var<S> make(Tensor<S> value, std::initializer_list<Var<S>> parents, BackwardFn fn) {
    bool needs = false;
    if (grad_enabled_)
      for (const auto& p : parents) needs = needs || (p.valid() && nodes_[p.id()].needs_grad);
    auto& n = nodes_.emplace_back();
    n.own = std::move(value);
    n.needs_grad = needs;
    if (needs) n.fn = std::move(fn);
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  const Tensor<S>& value(int id) const {
    const auto& n = nodes_[id];
    return n.ref ? *n.ref : n.own;
  }
  bool needs_grad(int id) const { return id >= 0 && nodes_[id].needs_grad; }
  const Tensor<S>& grad(int id) const { return nodes_[id].grad; }
  Tensor<S>& grad_acc(int id) {
    auto& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor<S>(value(id).shape);
    return n.grad;
  }

  void backward(Var<S> loss) {
    if (loss.value().size() != 1) throw DimensionError("backward() needs a scalar loss");
    if (!nodes_[loss.id()].needs_grad) return;
    grad_acc(loss.id()).data[0] = S(1);
    for (int id = loss.id(); id >= 0; --id) {
      auto& n = nodes_[id];
      if (!n.needs_grad || n.grad.empty()) continue;
      if (n.fn) n.fn(*this, id);
    }
    for (auto& n : nodes_) {
      if (!n.param || n.grad.empty() || n.param->frozen) continue;
      auto& pg = n.param->grad;
      if (pg.shape != n.grad.shape) pg = Tensor<S>(n.grad.shape);
      for (std::size_t i = 0; i < pg.size(); ++i) pg.data[i] += n.grad.data[i];
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<S> own;
    const Tensor<S>* ref = nullptr;
    Tensor<S> grad;
    bool needs_grad = false;
    Parameter<S>* param = nullptr;
    BackwardFn fn;
  };
  std::deque<Node> nodes_;
  std::unordered_map<const Parameter<S>*, int> param_ids_;
  bool grad_enabled_;
};

template <class S>
const Tensor<S>& Var<S>::value() const {
  return g_->value(id_);
}

namespace detail {

template <class S>
auto row_vec(Tensor<S>& t) {
  return Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>>(t.data.data(), t.size());
}
template <class S>
auto row_vec(const Tensor<S>& t) {
  return Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(t.data.data(), t.size());
}

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw DimensionError(msg);
}

template <class S>
void require_finite(const Tensor<S>& t, const char* op) {
  if (!t.all_finite()) throw NumericError(std::string(op) + ": non-finite input");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reduction ops.

template <class S>
Var<S> add(Var<S> a, Var<S> b) {
  detail::require(a.value().shape == b.value().shape, "add: shape mismatch " +
                  shape_str(a.value().shape) + " vs " + shape_str(b.value().shape));
  Tensor<S> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b.value().data[i];
  int ai = a.id(), bi = b.id();
  return a.graph().make(std::move(out), {a, b}, [ai, bi](Graph<S>& g, int self) {
    const auto& gy = g.grad(self);
    for (int id : {ai, bi}) {
      if (!g.needs_grad(id)) continue;
      auto& ga = g.grad_acc(id);
      for (std::size_t i = 0; i < gy.size(); ++i) ga.data[i] += gy.data[i];
    }
  });
}

template <class S>
Var<S> sub(Var<S> a, Var<S> b) {
  detail::require(a.value().shape == b.value().shape, "sub: shape mismatch");
  Tensor<S> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= b.value().data[i];
  int ai = a.id(), bi = b.id();
  return a.graph().make(std::move(out), {a, b}, [ai, bi](Graph<S>& g, int self) {
    const auto& gy = g.grad(self);
    if (g.needs_grad(ai)) {
      auto& ga = g.grad_acc(ai);
      for (std::size_t i = 0; i < gy.size(); ++i) ga.data[i] += gy.data[i];
    }
    if (g.needs_grad(bi)) {
      auto& gb = g.grad_acc(bi);
      for (std::size_t i = 0; i < gy.size(); ++i) gb.data[i] -= gy.data[i];
    }
  });
}

template <class S>
Var<S> mul(Var<S> a, Var<S> b) {
  detail::require(a.value().shape == b.value().shape, "mul: shape mismatch");
  Tensor<S> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= b.value().data[i];
  int ai = a.id(), bi = b.id();
  return a.graph().make(std::move(out), {a, b}, [ai, bi](Graph<S>& g, int self) {
    const auto& gy = g.grad(self);
    const auto& av = g.value(ai);
    const auto& bv = g.value(bi);
    if (g.needs_grad(ai)) {
      auto& ga = g.grad_acc(ai);
      for (std::size_t i = 0; i < gy.size(); ++i) ga.data[i] += gy.data[i] * bv.data[i];
    }
    if (g.needs_grad(bi)) {
      auto& gb = g.grad_acc(bi);
      for (std::size_t i = 0; i < gy.size(); ++i) gb.data[i] += gy.data[i] * av.data[i];
    }
  });
}

template <class S>
Var<S> scale(Var<S> a, S c) {
  Tensor<S> out = a.value();
  for (auto& v : out.data) v *= c;
  int ai = a.id();
  return a.graph().make(std::move(out), {a}, [ai, c](Graph<S>& g, int self) {
    const auto& gy = g.grad(self);
    auto& ga = g.grad_acc(ai);
    for (std::size_t i = 0; i < gy.size(); ++i) ga.data[i] += c * gy.data[i];
  });
}

template <class S>
Var<S> relu(Var<S> a) {
  Tensor<S> out = a.value();
  for (auto& v : out.data) v = v > S(0) ? v : S(0);
  int ai = a.id();
  return a.graph().make(std::move(out), {a}, [ai](Graph<S>& g, int self) {
    const auto& gy = g.grad(self);
    const auto& y = g.value(self);
    auto& ga = g.grad_acc(ai);
    for (std::size_t i = 0; i < gy.size(); ++i)
      if (y.data[i] > S(0)) ga.data[i] += gy.data[i];
  });
}

template <class S>
Var<S> exp(Var<S> a) {
  Tensor<S> out = a.value();
  for (auto& v : out.data) v = std::exp(v);
  int ai = a.id();
  return a.graph().make(std::move(out), {a}, [ai](Graph<S>& g, int self) {
    const auto& gy = g.grad(self);
    const auto& y = g.value(self);
    auto& ga = g.grad_acc(ai);
    for (std::size_t i = 0; i < gy.size(); ++i) ga.data[i] += gy.data[i] * y.data[i];
  });
}

// log(max(p, floor)); the clamped entries get zero gradient. `clamped` is
// set when any entry hit the floor.
template <class S>
Var<S> log_clamped(Var<S> a, S floor, bool* clamped = nullptr) {
  Tensor<S> out = a.value();
  bool hit = false;
  for (auto& v : out.data) {
    if (!(v > floor)) {
      hit = true;
      v = std::log(floor);
    } else {
      v = std::log(v);
    }
  }
  if (clamped) *clamped = hit;
  int ai = a.id();
  return a.graph().make(std::move(out), {a}, [ai, floor](Graph<S>& g, int self) {
    const auto& gy = g.grad(self);
    const auto& x = g.value(ai);
    auto& ga = g.grad_acc(ai);
    for (std::size_t i = 0; i < gy.size(); ++i)
      if (x.data[i] > floor) ga.data[i] += gy.data[i] / x.data[i];
  });
}

template <class S>
Var<S> sum(Var<S> a) {
  S s = 0;
  for (S v : a.value().data) s += v;
  int ai = a.id();
  return a.graph().make(scalar_tensor(s), {a}, [ai](Graph<S>& g, int self) {
    S gy = g.grad(self).data[0];
    auto& ga = g.grad_acc(ai);
    for (auto& v : ga.data) v += gy;
  });
}

template <class S>
Var<S> square_sum(Var<S> a) {
  S s = 0;
  for (S v : a.value().data) s += v * v;
  int ai = a.id();
  return a.graph().make(scalar_tensor(s), {a}, [ai](Graph<S>& g, int self) {
    S gy = g.grad(self).data[0];
    const auto& x = g.value(ai);
    auto& ga = g.grad_acc(ai);
    for (std::size_t i = 0; i < x.size(); ++i) ga.data[i] += S(2) * gy * x.data[i];
  });
}

// Sum of the main diagonal of a square matrix.
template <class S>
Var<S> trace(Var<S> a) {
  const auto& x = a.value();
  detail::require(x.rows() == x.cols(), "trace: matrix must be square");
  S s = 0;
  for (std::size_t i = 0; i < x.rows(); ++i) s += x(i, i);
  int ai = a.id();
  return a.graph().make(scalar_tensor(s), {a}, [ai](Graph<S>& g, int self) {
    S gy = g.grad(self).data[0];
    auto& ga = g.grad_acc(ai);
    for (std::size_t i = 0; i < ga.rows(); ++i) ga(i, i) += gy;
  });
}

template <class S>
Var<S> transpose(Var<S> a) {
  const auto& x = a.value();
  Tensor<S> out({x.cols(), x.rows()});
  out.mat() = x.mat().transpose();
  int ai = a.id();
  return a.graph().make(std::move(out), {a}, [ai](Graph<S>& g, int self) {
    g.grad_acc(ai).mat() += g.grad(self).mat().transpose();
  });
}

// ---------------------------------------------------------------------------
// Linear algebra.

// x[n x in] * w[out x in]^T + b[out]. `b` may be an invalid Var (no bias).
template <class S>
Var<S> linear(Var<S> x, Var<S> w, Var<S> b = {}) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  std::size_t out_dim = wv.rows();
  detail::require(wv.cols() == xv.cols(), "linear: input dim " + std::to_string(xv.cols()) +
                  " vs weight " + shape_str(wv.shape));
  if (b.valid()) detail::require(b.value().size() == out_dim, "linear: bias size mismatch");
  Tensor<S> out({xv.rows(), out_dim});
  out.mat().noalias() = xv.mat() * wv.mat().transpose();
  if (b.valid()) out.mat().rowwise() += detail::row_vec(b.value());
  int xi = x.id(), wi = w.id(), bi = b.valid() ? b.id() : -1;
  auto& g = x.graph();
  auto fn = [xi, wi, bi](Graph<S>& g, int self) {
    const auto& gy = g.grad(self);
    if (g.needs_grad(xi)) g.grad_acc(xi).mat().noalias() += gy.mat() * g.value(wi).mat();
    if (g.needs_grad(wi))
      g.grad_acc(wi).mat().noalias() += gy.mat().transpose() * g.value(xi).mat();
    if (bi >= 0 && g.needs_grad(bi)) detail::row_vec(g.grad_acc(bi)) += gy.mat().colwise().sum();
  };
  if (b.valid()) return g.make(std::move(out), {x, w, b}, fn);
  return g.make(std::move(out), {x, w}, fn);
}

// a * b, or a * b^T when trans_b.
template <class S>
Var<S> matmul(Var<S> a, Var<S> b, bool trans_b = false) {
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor<S> out;
  if (trans_b) {
    detail::require(av.cols() == bv.cols(), "matmul: inner dim mismatch");
    out = Tensor<S>({av.rows(), bv.rows()});
    out.mat().noalias() = av.mat() * bv.mat().transpose();
  } else {
    detail::require(av.cols() == bv.rows(), "matmul: inner dim mismatch");
    out = Tensor<S>({av.rows(), bv.cols()});
    out.mat().noalias() = av.mat() * bv.mat();
  }
  int ai = a.id(), bi = b.id();
  return a.graph().make(std::move(out), {a, b}, [ai, bi, trans_b](Graph<S>& g, int self) {
    const auto& gy = g.grad(self);
    const auto& av = g.value(ai);
    const auto& bv = g.value(bi);
    if (trans_b) {
      if (g.needs_grad(ai)) g.grad_acc(ai).mat().noalias() += gy.mat() * bv.mat();
      if (g.needs_grad(bi)) g.grad_acc(bi).mat().noalias() += gy.mat().transpose() * av.mat();
    } else {
      if (g.needs_grad(ai)) g.grad_acc(ai).mat().noalias() += gy.mat() * bv.mat().transpose();
      if (g.needs_grad(bi)) g.grad_acc(bi).mat().noalias() += av.mat().transpose() * gy.mat();
    }
  });
}

// ---------------------------------------------------------------------------
// Row-wise normalizations.

template <class S>
Var<S> log_softmax_rows(Var<S> a) {
  const auto& x = a.value();
  detail::require_finite(x, "log_softmax");
  Tensor<S> out(x.shape);
  const std::size_t r = x.rows(), c = x.cols();
  for (std::size_t i = 0; i < r; ++i) {
    const S* xi = &x.data[i * c];
    S m = *std::max_element(xi, xi + c);
    S z = 0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(xi[j] - m);
    S lz = m + std::log(z);
    for (std::size_t j = 0; j < c; ++j) out.data[i * c + j] = xi[j] - lz;
  }
  int ai = a.id();
  return a.graph().make(std::move(out), {a}, [ai](Graph<S>& g, int self) {
    const auto& gy = g.grad(self);
    const auto& y = g.value(self);
    auto& ga = g.grad_acc(ai);
    const std::size_t r = y.rows(), c = y.cols();
    for (std::size_t i = 0; i < r; ++i) {
      S s = 0;
      for (std::size_t j = 0; j < c; ++j) s += gy.data[i * c + j];
      for (std::size_t j = 0; j < c; ++j)
        ga.data[i * c + j] += gy.data[i * c + j] - std::exp(y.data[i * c + j]) * s;
    }
  });
}

template <class S>
Var<S> softmax_rows(Var<S> a) {
  const auto& x = a.value();
  detail::require_finite(x, "softmax");
  Tensor<S> out(x.shape);
  const std::size_t r = x.rows(), c = x.cols();
  for (std::size_t i = 0; i < r; ++i) {
    const S* xi = &x.data[i * c];
    S m = *std::max_element(xi, xi + c);
    S z = 0;
    for (std::size_t j = 0; j < c; ++j) z += (out.data[i * c + j] = std::exp(xi[j] - m));
    for (std::size_t j = 0; j < c; ++j) out.data[i * c + j] /= z;
  }
  int ai = a.id();
  return a.graph().make(std::move(out), {a}, [ai](Graph<S>& g, int self) {
    const auto& gy = g.grad(self);
    const auto& y = g.value(self);
    auto& ga = g.grad_acc(ai);
    const std::size_t r = y.rows(), c = y.cols();
    for (std::size_t i = 0; i < r; ++i) {
      S s = 0;
      for (std::size_t j = 0; j < c; ++j) s += gy.data[i * c + j] * y.data[i * c + j];
      for (std::size_t j = 0; j < c; ++j)
        ga.data[i * c + j] += y.data[i * c + j] * (gy.data[i * c + j] - s);
    }
  });
}

template <class S>
Var<S> layer_norm(Var<S> x, Var<S> gamma, Var<S> beta, S eps = S(1e-5)) {
  const auto& xv = x.value();
  const std::size_t r = xv.rows(), c = xv.cols();
  detail::require(gamma.value().size() == c && beta.value().size() == c,
                  "layer_norm: affine size mismatch");
  Tensor<S> out(xv.shape);
  auto xhat = std::make_shared<std::vector<S>>(xv.size());
  auto inv_std = std::make_shared<std::vector<S>>(r);
  const auto& gv = gamma.value().data;
  const auto& bv = beta.value().data;
  for (std::size_t i = 0; i < r; ++i) {
    const S* xi = &xv.data[i * c];
    S mean = 0;
    for (std::size_t j = 0; j < c; ++j) mean += xi[j];
    mean /= S(c);
    S var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (xi[j] - mean) * (xi[j] - mean);
    var /= S(c);
    S is = S(1) / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < c; ++j) {
      S h = (xi[j] - mean) * is;
      (*xhat)[i * c + j] = h;
      out.data[i * c + j] = h * gv[j] + bv[j];
    }
  }
  int xi = x.id(), gi = gamma.id(), bi = beta.id();
  return x.graph().make(std::move(out), {x, gamma, beta},
                        [xi, gi, bi, xhat, inv_std](Graph<S>& g, int self) {
    const auto& gy = g.grad(self);
    const std::size_t r = gy.rows(), c = gy.cols();
    const auto& gam = g.value(gi).data;
    if (g.needs_grad(gi) || g.needs_grad(bi)) {
      auto* gg = g.needs_grad(gi) ? &g.grad_acc(gi) : nullptr;
      auto* gb = g.needs_grad(bi) ? &g.grad_acc(bi) : nullptr;
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) {
          S d = gy.data[i * c + j];
          if (gg) gg->data[j] += d * (*xhat)[i * c + j];
          if (gb) gb->data[j] += d;
        }
    }
    if (!g.needs_grad(xi)) return;
    auto& gx = g.grad_acc(xi);
    std::vector<S> dh(c);
    for (std::size_t i = 0; i < r; ++i) {
      S m1 = 0, m2 = 0;
      for (std::size_t j = 0; j < c; ++j) {
        dh[j] = gy.data[i * c + j] * gam[j];
        m1 += dh[j];
        m2 += dh[j] * (*xhat)[i * c + j];
      }
      m1 /= S(c);
      m2 /= S(c);
      for (std::size_t j = 0; j < c; ++j)
        gx.data[i * c + j] += (*inv_std)[i] * (dh[j] - m1 - (*xhat)[i * c + j] * m2);
    }
  });
}

// x_i / max(||x_i||, floor) per row.
template <class S>
Var<S> l2_normalize_rows(Var<S> a, S floor = S(1e-8)) {
  const auto& x = a.value();
  const std::size_t r = x.rows(), c = x.cols();
  Tensor<S> out(x.shape);
  auto norms = std::make_shared<std::vector<S>>(r);
  for (std::size_t i = 0; i < r; ++i) {
    S n = 0;
    for (std::size_t j = 0; j < c; ++j) n += x.data[i * c + j] * x.data[i * c + j];
    n = std::sqrt(n);
    (*norms)[i] = n;
    S d = std::max(n, floor);
    for (std::size_t j = 0; j < c; ++j) out.data[i * c + j] = x.data[i * c + j] / d;
  }
  int ai = a.id();
  return a.graph().make(std::move(out), {a}, [ai, norms, floor](Graph<S>& g, int self) {
    const auto& gy = g.grad(self);
    const auto& y = g.value(self);
    auto& ga = g.grad_acc(ai);
    const std::size_t r = y.rows(), c = y.cols();
    for (std::size_t i = 0; i < r; ++i) {
      S n = (*norms)[i];
      if (n > floor) {
        S dot = 0;
        for (std::size_t j = 0; j < c; ++j) dot += y.data[i * c + j] * gy.data[i * c + j];
        for (std::size_t j = 0; j < c; ++j)
          ga.data[i * c + j] += (gy.data[i * c + j] - y.data[i * c + j] * dot) / n;
      } else {
        for (std::size_t j = 0; j < c; ++j) ga.data[i * c + j] += gy.data[i * c + j] / floor;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Sequence ops.

// Gathers rows of `table` [V x d] by id.
template <class S>
Var<S> embedding(Var<S> table, std::vector<int> ids) {
  const auto& t = table.value();
  const std::size_t d = t.cols();
  Tensor<S> out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= t.rows())
      throw VocabularyError("embedding id " + std::to_string(ids[i]) + " outside table of " +
                            std::to_string(t.rows()));
    std::copy_n(&t.data[ids[i] * d], d, &out.data[i * d]);
  }
  int ti = table.id();
  return table.graph().make(std::move(out), {table},
                            [ti, ids = std::move(ids), d](Graph<S>& g, int self) {
    const auto& gy = g.grad(self);
    auto& gt = g.grad_acc(ti);
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) gt.data[ids[i] * d + j] += gy.data[i * d + j];
  });
}

// [B*T x d] -> [B x d], averaging each block of T consecutive rows.
template <class S>
Var<S> mean_pool(Var<S> a, std::size_t batch, std::size_t frames) {
  const auto& x = a.value();
  detail::require(x.rows() == batch * frames, "mean_pool: rows " + std::to_string(x.rows()) +
                  " != batch*frames");
  const std::size_t d = x.cols();
  Tensor<S> out({batch, d});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < frames; ++t)
      for (std::size_t j = 0; j < d; ++j) out.data[b * d + j] += x.data[(b * frames + t) * d + j];
  for (auto& v : out.data) v /= S(frames);
  int ai = a.id();
  return a.graph().make(std::move(out), {a}, [ai, batch, frames, d](Graph<S>& g, int self) {
    const auto& gy = g.grad(self);
    auto& ga = g.grad_acc(ai);
    S inv = S(1) / S(frames);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t t = 0; t < frames; ++t)
        for (std::size_t j = 0; j < d; ++j)
          ga.data[(b * frames + t) * d + j] += gy.data[b * d + j] * inv;
  });
}

inline std::size_t conv_output_length(std::size_t t_in, std::size_t kernel, std::size_t stride,
                                      std::size_t padding) {
  if (kernel > t_in + 2 * padding)
    throw DimensionError("conv1d: kernel " + std::to_string(kernel) + " exceeds padded length " +
                         std::to_string(t_in + 2 * padding));
  if (stride == 0) throw DimensionError("conv1d: stride must be positive");
  return (t_in + 2 * padding - kernel) / stride + 1;
}

// Batched 1-D convolution over time. x is [B*T x Cin] (B clips stacked),
// w is [Cout x Cin x k], b is [Cout]. Returns [B*T' x Cout].
template <class S>
Var<S> conv1d(Var<S> x, Var<S> w, Var<S> b, std::size_t batch, std::size_t t_in,
              std::size_t stride, std::size_t padding) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  detail::require(wv.shape.size() == 3, "conv1d: kernel must be [Cout x Cin x k]");
  const std::size_t cout = wv.shape[0], cin = wv.shape[1], k = wv.shape[2];
  detail::require(xv.cols() == cin, "conv1d: input channels " + std::to_string(xv.cols()) +
                  " vs kernel " + shape_str(wv.shape));
  detail::require(xv.rows() == batch * t_in, "conv1d: rows != batch*T");
  if (b.valid()) detail::require(b.value().size() == cout, "conv1d: bias size mismatch");
  const std::size_t t_out = conv_output_length(t_in, k, stride, padding);
  const std::size_t ck = cin * k;
  auto cols = std::make_shared<Tensor<S>>(Shape{batch * t_out, ck});
  for (std::size_t bb = 0; bb < batch; ++bb)
    for (std::size_t t = 0; t < t_out; ++t) {
      S* row = &cols->data[(bb * t_out + t) * ck];
      for (std::size_t j = 0; j < k; ++j) {
        long src = static_cast<long>(t * stride + j) - static_cast<long>(padding);
        if (src < 0 || src >= static_cast<long>(t_in)) continue;
        const S* xr = &xv.data[(bb * t_in + static_cast<std::size_t>(src)) * cin];
        for (std::size_t ci = 0; ci < cin; ++ci) row[ci * k + j] = xr[ci];
      }
    }
  ConstMatMap<S> wmat(wv.data.data(), cout, ck);
  Tensor<S> out({batch * t_out, cout});
  out.mat().noalias() = cols->mat() * wmat.transpose();
  if (b.valid()) out.mat().rowwise() += detail::row_vec(b.value());
  int xi = x.id(), wi = w.id(), bi = b.valid() ? b.id() : -1;
  auto fn = [=](Graph<S>& g, int self) {
    const auto& gy = g.grad(self);
    const auto& wv = g.value(wi);
    ConstMatMap<S> wmat(wv.data.data(), cout, ck);
    if (g.needs_grad(wi)) {
      auto& gw = g.grad_acc(wi);
      MatMap<S>(gw.data.data(), cout, ck).noalias() += gy.mat().transpose() * cols->mat();
    }
    if (bi >= 0 && g.needs_grad(bi)) detail::row_vec(g.grad_acc(bi)) += gy.mat().colwise().sum();
    if (!g.needs_grad(xi)) return;
    RowMat<S> dcols = gy.mat() * wmat;
    auto& gx = g.grad_acc(xi);
    for (std::size_t bb = 0; bb < batch; ++bb)
      for (std::size_t t = 0; t < t_out; ++t) {
        const S* row = dcols.data() + (bb * t_out + t) * ck;
        for (std::size_t j = 0; j < k; ++j) {
          long src = static_cast<long>(t * stride + j) - static_cast<long>(padding);
          if (src < 0 || src >= static_cast<long>(t_in)) continue;
          S* xr = &gx.data[(bb * t_in + static_cast<std::size_t>(src)) * cin];
          for (std::size_t ci = 0; ci < cin; ++ci) xr[ci] += row[ci * k + j];
        }
      }
  };
  auto& g = x.graph();
  if (b.valid()) return g.make(std::move(out), {x, w, b}, fn);
  return g.make(std::move(out), {x, w}, fn);
}

// Multi-head scaled dot-product attention core (projections excluded).
// q is [B*Lq x d], k and v are [B*Lk x d]; heads split d evenly. With
// `causal`, query i only sees keys j <= i (requires Lq == Lk).
template <class S>
Var<S> attention(Var<S> q, Var<S> k, Var<S> v, std::size_t batch, std::size_t lq,
                 std::size_t lk, std::size_t heads, bool causal) {
  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();
  const std::size_t d = qv.cols();
  detail::require(heads > 0 && d % heads == 0, "attention: dim not divisible by heads");
  detail::require(kv.cols() == d && vv.cols() == d, "attention: q/k/v dims differ");
  detail::require(qv.rows() == batch * lq && kv.rows() == batch * lk && vv.rows() == batch * lk,
                  "attention: row counts do not match batch layout");
  detail::require(!causal || lq == lk, "attention: causal mask needs Lq == Lk");
  const std::size_t dh = d / heads;
  const S sc = S(1) / std::sqrt(S(dh));
  auto probs = std::make_shared<std::vector<S>>(batch * heads * lq * lk, S(0));
  Tensor<S> out({batch * lq, d});
  auto qm = qv.mat();
  auto km = kv.mat();
  auto vm = vv.mat();
  auto om = out.mat();
  RowMat<S> scores(lq, lk);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h) {
      scores.noalias() = qm.block(b * lq, h * dh, lq, dh) * km.block(b * lk, h * dh, lk, dh).transpose();
      Eigen::Map<RowMat<S>> p(probs->data() + (b * heads + h) * lq * lk, lq, lk);
      for (std::size_t i = 0; i < lq; ++i) {
        std::size_t lim = causal ? i + 1 : lk;
        S m = -std::numeric_limits<S>::infinity();
        for (std::size_t j = 0; j < lim; ++j) m = std::max(m, scores(i, j) * sc);
        S z = 0;
        for (std::size_t j = 0; j < lim; ++j) z += (p(i, j) = std::exp(scores(i, j) * sc - m));
        for (std::size_t j = 0; j < lim; ++j) p(i, j) /= z;
      }
      om.block(b * lq, h * dh, lq, dh).noalias() = p * vm.block(b * lk, h * dh, lk, dh);
    }
  int qi = q.id(), ki = k.id(), vi = v.id();
  return q.graph().make(std::move(out), {q, k, v}, [=](Graph<S>& g, int self) {
    auto gom = g.grad(self).mat();
    auto qm = g.value(qi).mat();
    auto km = g.value(ki).mat();
    auto vm = g.value(vi).mat();
    bool nq = g.needs_grad(qi), nk = g.needs_grad(ki), nv = g.needs_grad(vi);
    Tensor<S>* gq = nq ? &g.grad_acc(qi) : nullptr;
    Tensor<S>* gk = nk ? &g.grad_acc(ki) : nullptr;
    Tensor<S>* gv = nv ? &g.grad_acc(vi) : nullptr;
    RowMat<S> dp(lq, lk), ds(lq, lk);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t h = 0; h < heads; ++h) {
        Eigen::Map<const RowMat<S>> p(probs->data() + (b * heads + h) * lq * lk, lq, lk);
        auto go = gom.block(b * lq, h * dh, lq, dh);
        if (gv) gv->mat().block(b * lk, h * dh, lk, dh).noalias() += p.transpose() * go;
        if (!gq && !gk) continue;
        dp.noalias() = go * vm.block(b * lk, h * dh, lk, dh).transpose();
        for (std::size_t i = 0; i < lq; ++i) {
          S s = 0;
          for (std::size_t j = 0; j < lk; ++j) s += dp(i, j) * p(i, j);
          for (std::size_t j = 0; j < lk; ++j) ds(i, j) = p(i, j) * (dp(i, j) - s) * sc;
        }
        if (gq)
          gq->mat().block(b * lq, h * dh, lq, dh).noalias() += ds * km.block(b * lk, h * dh, lk, dh);
        if (gk)
          gk->mat().block(b * lk, h * dh, lk, dh).noalias() +=
              ds.transpose() * qm.block(b * lq, h * dh, lq, dh);
      }
  });
}

// Label-smoothed negative log-likelihood over log-probability rows:
//   sum_r weight_r * sum_v -q_rv * logp_rv,  q = (1-alpha)*onehot + alpha/V.
// Rows with weight 0 (padding) contribute nothing.
template <class S>
Var<S> smoothed_nll(Var<S> logp, std::vector<int> targets, std::vector<S> weights, S alpha) {
  const auto& lp = logp.value();
  const std::size_t r = lp.rows(), vocab = lp.cols();
  detail::require(targets.size() == r && weights.size() == r, "smoothed_nll: target count");
  const S off = alpha / S(vocab);
  const S on = S(1) - alpha + off;
  S total = 0;
  for (std::size_t i = 0; i < r; ++i) {
    if (weights[i] == S(0)) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= vocab)
      throw VocabularyError("target id " + std::to_string(targets[i]) + " outside vocabulary");
    const S* row = &lp.data[i * vocab];
    S acc = 0;
    if (alpha != S(0))
      for (std::size_t j = 0; j < vocab; ++j) acc -= off * row[j];
    acc -= (on - off) * row[targets[i]];
    total += weights[i] * acc;
  }
  int li = logp.id();
  return logp.graph().make(scalar_tensor(total), {logp},
                           [li, targets = std::move(targets), weights = std::move(weights), off,
                            on, vocab](Graph<S>& g, int self) {
    S gy = g.grad(self).data[0];
    auto& gl = g.grad_acc(li);
    for (std::size_t i = 0; i < targets.size(); ++i) {
      if (weights[i] == S(0)) continue;
      S w = gy * weights[i];
      S* row = &gl.data[i * vocab];
      if (off != S(0))
        for (std::size_t j = 0; j < vocab; ++j) row[j] -= w * off;
      row[targets[i]] -= w * (on - off);
    }
  });
}

}  // namespace kdcap
