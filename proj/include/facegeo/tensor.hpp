// Copyright 2026 The facegeo Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Dense f64 tensors and a tape-based reverse-mode differentiator covering the
// handful of operations the face networks need. Everything is rank 2 (rows x
// cols); shape changes are always explicit, there is no implicit broadcasting.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "facegeo/errors.hpp"

namespace facegeo {

using Shape = std::vector<std::size_t>;

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

struct Tensor {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a backward pass writes to it
  bool requires_grad = false;

  Tensor() = default;
  Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
    if (numel(shape) != data.size())
      throw DimensionError("tensor shape " + to_string(shape) + " holds " +
                           std::to_string(numel(shape)) + " values, got " +
                           std::to_string(data.size()));
    for (auto d : shape)
      if (d == 0) throw DimensionError("tensor dimensions must be positive: " + to_string(shape));
  }

  static Tensor zeros(std::size_t rows, std::size_t cols) {
    return Tensor({rows, cols}, std::vector<double>(rows * cols, 0.0));
  }
  static Tensor filled(std::size_t rows, std::size_t cols, double v) {
    return Tensor({rows, cols}, std::vector<double>(rows * cols, v));
  }
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    std::vector<double> values;
    const std::size_t cols = rows.begin()->size();
    for (const auto& r : rows) {
      if (r.size() != cols) throw DimensionError("ragged matrix literal");
      values.insert(values.end(), r.begin(), r.end());
    }
    return Tensor({rows.size(), cols}, std::move(values));
  }
  static Tensor row(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({1, n}, std::move(values));
  }

  static std::size_t numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }
  std::size_t size() const { return data.size(); }
  std::size_t rows() const { return shape.size() == 2 ? shape[0] : 1; }
  std::size_t cols() const { return shape.empty() ? 1 : shape.back(); }

  double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  void zero_grad() { grad.assign(data.size(), 0.0); }
  bool all_finite() const {
    return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
  }
};

namespace ad {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

class Graph;

/// Handle to a value recorded on a Graph.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;
};

struct BatchNormState;

/// Single-owner tape. Nodes are appended in evaluation order, so creation
/// order is already a topological order and backward is one reverse sweep.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf owning a copy of `t`; never receives gradient.
  Var constant(Tensor t, std::string label = "constant") {
    check_rank2(t.shape, label);
    Node n;
    n.op = std::move(label);
    n.owned = std::move(t);
    return push(std::move(n));
  }

  /// Leaf aliasing an externally owned tensor. When `t.requires_grad` is set,
  /// backward accumulates into `t.grad`.
  Var parameter(Tensor& t, std::string label = "parameter") {
    check_rank2(t.shape, label);
    Node n;
    n.op = std::move(label);
    n.external = &t;
    n.needs_grad = t.requires_grad;
    return push(std::move(n));
  }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value(); }
  const std::vector<double>& grad(Var v) const { return nodes_.at(v.id).grad; }
  const std::string& op(Var v) const { return nodes_.at(v.id).op; }
  std::size_t size() const { return nodes_.size(); }

  double scalar(Var v) const {
    const auto& t = value(v);
    if (t.size() != 1) throw ContractError("scalar() on tensor of shape " + to_string(t.shape));
    return t.data[0];
  }

  /// Reverse sweep from a scalar loss. Intermediate gradients are reset on
  /// every call; gradients of external parameters accumulate.
  void backward(Var loss) {
    if (loss.graph != this) throw ContractError("loss belongs to a different graph");
    const Tensor& l = value(loss);
    if (l.size() != 1)
      throw ContractError("backward requires a scalar loss, got shape " + to_string(l.shape));
    for (auto& n : nodes_) n.grad.clear();
    if (!nodes_[loss.id].needs_grad) return;
    nodes_[loss.id].grad.assign(1, 1.0);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, i);
      if (n.external != nullptr && n.external->requires_grad) {
        auto& g = n.external->grad;
        if (g.size() != n.grad.size()) g.assign(n.grad.size(), 0.0);
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.grad[k];
      }
    }
  }

  /// Label of the first recorded tensor holding NaN or Inf, if any.
  std::optional<std::string> first_non_finite() const {
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      if (!nodes_[i].value().all_finite())
        return "node " + std::to_string(i) + " (" + nodes_[i].op + ", shape " +
               to_string(nodes_[i].value().shape) + ")";
    return std::nullopt;
  }

  // Op construction interface used by the free functions below.
  struct Node {
    std::string op;
    std::vector<std::size_t> inputs;
    Tensor owned;
    Tensor* external = nullptr;
    std::vector<double> grad;
    bool needs_grad = false;
    std::function<void(Graph&, std::size_t)> backward;

    const Tensor& value() const { return external ? *external : owned; }
  };

  Var record(std::string op, std::vector<Var> inputs, Tensor out,
             std::function<void(Graph&, std::size_t)> backward) {
    Node n;
    n.op = std::move(op);
    for (const auto& v : inputs) {
      if (v.graph != this) throw ContractError(n.op + ": operand from a different graph");
      n.inputs.push_back(v.id);
      n.needs_grad = n.needs_grad || nodes_[v.id].needs_grad;
    }
    n.owned = std::move(out);
    if (n.needs_grad) n.backward = std::move(backward);
    return push(std::move(n));
  }

  Node& node(std::size_t id) { return nodes_[id]; }
  const Node& node(std::size_t id) const { return nodes_[id]; }

  /// Gradient buffer of input `k` of node `id`, or nullptr when that input
  /// does not need a gradient.
  double* input_grad(std::size_t id, std::size_t k) {
    Node& in = nodes_[nodes_[id].inputs[k]];
    if (!in.needs_grad) return nullptr;
    if (in.grad.empty()) in.grad.assign(in.value().size(), 0.0);
    return in.grad.data();
  }
  const Tensor& input_value(std::size_t id, std::size_t k) const {
    return nodes_[nodes_[id].inputs[k]].value();
  }

 private:
  static void check_rank2(const Shape& s, const std::string& label) {
    if (s.size() != 2)
      throw DimensionError(label + ": tensors on the graph must be rank 2, got " + to_string(s));
  }

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

namespace detail {

inline Graph& graph_of(Var a) {
  if (a.graph == nullptr) throw ContractError("operation on an unbound Var");
  return *a.graph;
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape != b.shape)
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape) + " vs " +
                         to_string(b.shape));
}

// Element-wise op; `df(x, y)` is the derivative at input x with output y.
template <typename F, typename DF>
Var unary(Var a, const char* op, F f, DF df) {
  Graph& g = graph_of(a);
  const Tensor& x = g.value(a);
  Tensor out = Tensor::zeros(x.rows(), x.cols());
  const double* xs = x.data.data();
  double* ys = out.data.data();
  const std::size_t n = x.size();
  for (std::size_t i = 0; i < n; ++i) ys[i] = f(xs[i]);
  return g.record(op, {a}, std::move(out), [df](Graph& g, std::size_t id) {
    double* gx = g.input_grad(id, 0);
    if (!gx) return;
    const double* x = g.input_value(id, 0).data.data();
    const double* y = g.node(id).owned.data.data();
    const auto& gy = g.node(id).grad;
    const std::size_t n = gy.size();
    for (std::size_t i = 0; i < n; ++i) gx[i] += gy[i] * df(x[i], y[i]);
  });
}

}  // namespace detail

/// C = A * B.
inline Var matmul(Var a, Var b) {
  Graph& g = detail::graph_of(a);
  const Tensor& A = g.value(a);
  const Tensor& B = g.value(b);
  if (A.cols() != B.rows())
    throw DimensionError("matmul: inner dimensions differ, " + to_string(A.shape) + " x " +
                         to_string(B.shape));
  const auto m = static_cast<Eigen::Index>(A.rows());
  const auto k = static_cast<Eigen::Index>(A.cols());
  const auto n = static_cast<Eigen::Index>(B.cols());
  Tensor C = Tensor::zeros(A.rows(), B.cols());
  MatrixMap(C.data.data(), m, n).noalias() =
      ConstMatrixMap(A.data.data(), m, k) * ConstMatrixMap(B.data.data(), k, n);
  return g.record("matmul", {a, b}, std::move(C), [m, k, n](Graph& g, std::size_t id) {
    ConstMatrixMap dC(g.node(id).grad.data(), m, n);
    if (double* ga = g.input_grad(id, 0))
      MatrixMap(ga, m, k).noalias() += dC * ConstMatrixMap(g.input_value(id, 1).data.data(), k, n).transpose();
    if (double* gb = g.input_grad(id, 1))
      MatrixMap(gb, k, n).noalias() += ConstMatrixMap(g.input_value(id, 0).data.data(), m, k).transpose() * dC;
  });
}

inline Var add(Var a, Var b) {
  Graph& g = detail::graph_of(a);
  const Tensor& A = g.value(a);
  const Tensor& B = g.value(b);
  detail::require_same_shape(A, B, "add");
  Tensor out = A;
  out.grad.clear();
  out.requires_grad = false;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += B.data[i];
  return g.record("add", {a, b}, std::move(out), [](Graph& g, std::size_t id) {
    const auto& gy = g.node(id).grad;
    for (std::size_t k = 0; k < 2; ++k)
      if (double* gx = g.input_grad(id, k))
        for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
  });
}

inline Var sub(Var a, Var b) {
  Graph& g = detail::graph_of(a);
  const Tensor& A = g.value(a);
  const Tensor& B = g.value(b);
  detail::require_same_shape(A, B, "sub");
  Tensor out = Tensor::zeros(A.rows(), A.cols());
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = A.data[i] - B.data[i];
  return g.record("sub", {a, b}, std::move(out), [](Graph& g, std::size_t id) {
    const auto& gy = g.node(id).grad;
    if (double* ga = g.input_grad(id, 0))
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
    if (double* gb = g.input_grad(id, 1))
      for (std::size_t i = 0; i < gy.size(); ++i) gb[i] -= gy[i];
  });
}

inline Var scale(Var a, double factor) {
  return detail::unary(
      a, "scale", [factor](double x) { return factor * x; },
      [factor](double, double) { return factor; });
}

inline Var relu(Var a) {
  return detail::unary(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var square(Var a) {
  return detail::unary(
      a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

/// Element-wise smooth L1 with threshold 1: 0.5 x^2 inside, |x| - 0.5 outside.
inline Var smooth_l1(Var a) {
  return detail::unary(
      a, "smooth_l1",
      [](double x) {
        const double ax = std::abs(x);
        return ax < 1.0 ? 0.5 * x * x : ax - 0.5;
      },
      [](double x, double) {
        if (std::abs(x) < 1.0) return x;
        return x > 0.0 ? 1.0 : -1.0;
      });
}

/// Sum of all elements as a 1x1 tensor.
inline Var sum(Var a) {
  Graph& g = detail::graph_of(a);
  const Tensor& x = g.value(a);
  double s = 0.0;
  for (double v : x.data) s += v;
  return g.record("sum", {a}, Tensor({1, 1}, {s}), [](Graph& g, std::size_t id) {
    double* gx = g.input_grad(id, 0);
    if (!gx) return;
    const double gy = g.node(id).grad[0];
    const std::size_t n = g.input_value(id, 0).size();
    for (std::size_t i = 0; i < n; ++i) gx[i] += gy;
  });
}

/// Same data, new row-major shape.
inline Var reshape(Var a, std::size_t rows, std::size_t cols) {
  Graph& g = detail::graph_of(a);
  const Tensor& x = g.value(a);
  if (rows * cols != x.size())
    throw DimensionError("reshape: cannot view " + to_string(x.shape) + " as [" +
                         std::to_string(rows) + "x" + std::to_string(cols) + "]");
  Tensor out({rows, cols}, x.data);
  return g.record("reshape", {a}, std::move(out), [](Graph& g, std::size_t id) {
    double* gx = g.input_grad(id, 0);
    if (!gx) return;
    const auto& gy = g.node(id).grad;
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
  });
}

/// Concatenate along the last dimension; all parts share the row count.
inline Var concat_last_dim(const std::vector<Var>& parts) {
  if (parts.empty()) throw DomainError("concat_last_dim: no inputs");
  Graph& g = detail::graph_of(parts.front());
  const std::size_t rows = g.value(parts.front()).rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Tensor& t = g.value(p);
    if (t.rows() != rows)
      throw DimensionError("concat_last_dim: row counts differ, " +
                           to_string(g.value(parts.front()).shape) + " vs " + to_string(t.shape));
    widths.push_back(t.cols());
    total += t.cols();
  }
  Tensor out = Tensor::zeros(rows, total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& t = g.value(parts[k]);
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(t.data.begin() + r * widths[k], widths[k], out.data.begin() + r * total + offset);
    offset += widths[k];
  }
  return g.record("concat_last_dim", parts, std::move(out),
                  [widths, rows, total](Graph& g, std::size_t id) {
                    const auto& gy = g.node(id).grad;
                    std::size_t offset = 0;
                    for (std::size_t k = 0; k < widths.size(); ++k) {
                      if (double* gx = g.input_grad(id, k))
                        for (std::size_t r = 0; r < rows; ++r)
                          for (std::size_t c = 0; c < widths[k]; ++c)
                            gx[r * widths[k] + c] += gy[r * total + offset + c];
                      offset += widths[k];
                    }
                  });
}

/// Rows [begin, end) of a.
inline Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  Graph& g = detail::graph_of(a);
  const Tensor& x = g.value(a);
  if (begin >= end || end > x.rows())
    throw DimensionError("slice_rows: range [" + std::to_string(begin) + ", " +
                         std::to_string(end) + ") outside " + to_string(x.shape));
  const std::size_t cols = x.cols();
  Tensor out({end - begin, cols},
             std::vector<double>(x.data.begin() + begin * cols, x.data.begin() + end * cols));
  return g.record("slice_rows", {a}, std::move(out), [begin, cols](Graph& g, std::size_t id) {
    double* gx = g.input_grad(id, 0);
    if (!gx) return;
    const auto& gy = g.node(id).grad;
    for (std::size_t i = 0; i < gy.size(); ++i) gx[begin * cols + i] += gy[i];
  });
}

/// Each row of v (G x d) repeated n times in place: (G*n) x d.
inline Var repeat_groups(Var v, std::size_t n) {
  Graph& g = detail::graph_of(v);
  const Tensor& x = g.value(v);
  if (n == 0) throw DomainError("repeat: repeat count must be positive");
  const std::size_t groups = x.rows();
  const std::size_t d = x.cols();
  Tensor out = Tensor::zeros(groups * n, d);
  for (std::size_t gi = 0; gi < groups; ++gi)
    for (std::size_t r = 0; r < n; ++r)
      std::copy_n(x.data.begin() + gi * d, d, out.data.begin() + (gi * n + r) * d);
  return g.record("repeat_groups", {v}, std::move(out), [groups, n, d](Graph& g, std::size_t id) {
    double* gx = g.input_grad(id, 0);
    if (!gx) return;
    const auto& gy = g.node(id).grad;
    for (std::size_t gi = 0; gi < groups; ++gi)
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) gx[gi * d + c] += gy[(gi * n + r) * d + c];
  });
}

/// A 1 x d row repeated n times.
inline Var repeat_rows(Var v, std::size_t n) {
  if (detail::graph_of(v).value(v).rows() != 1)
    throw DimensionError("repeat_rows: expects a single row, got " +
                         to_string(detail::graph_of(v).value(v).shape));
  return repeat_groups(v, n);
}

/// Channel-wise max over consecutive blocks of `group` rows: (G*group) x d
/// -> G x d. Gradient goes to the argmax row only; ties pick the lowest row.
inline Var max_pool_groups(Var a, std::size_t group) {
  Graph& g = detail::graph_of(a);
  const Tensor& x = g.value(a);
  if (group == 0 || x.rows() % group != 0)
    throw DomainError("max_pool: " + std::to_string(x.rows()) +
                      " rows do not split into groups of " + std::to_string(group));
  const std::size_t groups = x.rows() / group;
  const std::size_t d = x.cols();
  Tensor out = Tensor::zeros(groups, d);
  std::vector<std::size_t> argmax(groups * d);
  for (std::size_t gi = 0; gi < groups; ++gi)
    for (std::size_t c = 0; c < d; ++c) {
      std::size_t best = gi * group;
      for (std::size_t r = gi * group + 1; r < (gi + 1) * group; ++r)
        if (x.data[r * d + c] > x.data[best * d + c]) best = r;
      argmax[gi * d + c] = best;
      out.data[gi * d + c] = x.data[best * d + c];
    }
  return g.record("max_pool", {a}, std::move(out),
                  [argmax = std::move(argmax), d](Graph& g, std::size_t id) {
                    double* gx = g.input_grad(id, 0);
                    if (!gx) return;
                    const auto& gy = g.node(id).grad;
                    for (std::size_t i = 0; i < gy.size(); ++i) gx[argmax[i] * d + i % d] += gy[i];
                  });
}

/// Global max over all rows of a point set: N x d -> 1 x d.
inline Var max_pool_points(Var a) {
  const Tensor& x = detail::graph_of(a).value(a);
  if (x.rows() == 0) throw DomainError("max_pool_points: empty point set");
  return max_pool_groups(a, x.rows());
}

/// Per-point affine map with one 3x4 row-major [A | t] per group:
/// points (G*n) x 3, poses G x 12 -> (G*n) x 3 with p' = A p + t.
inline Var affine_points(Var points, Var poses) {
  Graph& g = detail::graph_of(points);
  const Tensor& P = g.value(points);
  const Tensor& T = g.value(poses);
  if (P.cols() != 3 || T.cols() != 12 || T.rows() == 0 || P.rows() % T.rows() != 0)
    throw DimensionError("affine_points: points " + to_string(P.shape) + " vs poses " +
                         to_string(T.shape));
  const std::size_t groups = T.rows();
  const std::size_t n = P.rows() / groups;
  Tensor out = Tensor::zeros(P.rows(), 3);
  for (std::size_t gi = 0; gi < groups; ++gi) {
    const double* m = T.data.data() + gi * 12;
    for (std::size_t r = gi * n; r < (gi + 1) * n; ++r) {
      const double* p = P.data.data() + r * 3;
      for (std::size_t i = 0; i < 3; ++i)
        out.data[r * 3 + i] = m[i * 4] * p[0] + m[i * 4 + 1] * p[1] + m[i * 4 + 2] * p[2] + m[i * 4 + 3];
    }
  }
  return g.record("affine_points", {points, poses}, std::move(out),
                  [groups, n](Graph& g, std::size_t id) {
                    const auto& gy = g.node(id).grad;
                    const auto& P = g.input_value(id, 0).data;
                    const auto& T = g.input_value(id, 1).data;
                    double* gp = g.input_grad(id, 0);
                    double* gt = g.input_grad(id, 1);
                    for (std::size_t gi = 0; gi < groups; ++gi) {
                      const double* m = T.data() + gi * 12;
                      for (std::size_t r = gi * n; r < (gi + 1) * n; ++r) {
                        const double* dy = gy.data() + r * 3;
                        if (gp)
                          for (std::size_t j = 0; j < 3; ++j)
                            gp[r * 3 + j] += m[j] * dy[0] + m[4 + j] * dy[1] + m[8 + j] * dy[2];
                        if (gt)
                          for (std::size_t i = 0; i < 3; ++i) {
                            double* row = gt + gi * 12 + i * 4;
                            row[0] += dy[i] * P[r * 3];
                            row[1] += dy[i] * P[r * 3 + 1];
                            row[2] += dy[i] * P[r * 3 + 2];
                            row[3] += dy[i];
                          }
                      }
                    }
                  });
}

/// Learnable affine (gamma, beta) plus running statistics of one batch-norm
/// layer. Running variance uses the unbiased batch estimate.
struct BatchNormState {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  static BatchNormState identity(std::size_t channels) {
    BatchNormState s;
    s.gamma = Tensor::filled(1, channels, 1.0);
    s.beta = Tensor::zeros(1, channels);
    s.gamma.requires_grad = s.beta.requires_grad = true;
    s.running_mean = Tensor::zeros(1, channels);
    s.running_var = Tensor::filled(1, channels, 1.0);
    return s;
  }
  std::size_t channels() const { return gamma.size(); }
};

/// Batch normalization over rows, optionally fused with a trailing ReLU.
/// Training mode normalizes with batch statistics and updates the running
/// averages; eval mode uses the running averages and is a fixed per-channel
/// affine map.
inline Var batch_norm(Var x, Var gamma, Var beta, BatchNormState& state, bool training, bool fuse_relu = false) {
  Graph& g = detail::graph_of(x);
  const Tensor& X = g.value(x);
  const std::size_t n = X.rows();
  const std::size_t d = X.cols();
  if (g.value(gamma).size() != d || g.value(beta).size() != d || state.channels() != d)
    throw DimensionError("batch_norm: input " + to_string(X.shape) + " vs " +
                         std::to_string(state.channels()) + " channels");
  if (training && n < 2)
    throw DomainError("batch_norm: training mode needs at least 2 rows, got " + std::to_string(n));
  const double* gm = g.value(gamma).data.data();
  const double* bt = g.value(beta).data.data();
  const double* xs = X.data.data();

  std::vector<double> mean(d, 0.0), inv_std(d, 0.0);
  if (training) {
    std::vector<double> var(d, 0.0);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < d; ++c) mean[c] += xs[r * d + c];
    for (auto& m : mean) m /= static_cast<double>(n);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < d; ++c) {
        const double dv = xs[r * d + c] - mean[c];
        var[c] += dv * dv;
      }
    for (std::size_t c = 0; c < d; ++c) {
      inv_std[c] = 1.0 / std::sqrt(var[c] / static_cast<double>(n) + state.eps);
      const double unbiased = var[c] / static_cast<double>(n - 1);
      auto& rm = state.running_mean.data[c];
      auto& rv = state.running_var.data[c];
      rm = (1.0 - state.momentum) * rm + state.momentum * mean[c];
      rv = (1.0 - state.momentum) * rv + state.momentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < d; ++c) {
      mean[c] = state.running_mean.data[c];
      inv_std[c] = 1.0 / std::sqrt(state.running_var.data[c] + state.eps);
    }
  }

  Tensor out = Tensor::zeros(n, d);
  double* ys = out.data.data();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) {
      const std::size_t i = r * d + c;
      const double y = gm[c] * (xs[i] - mean[c]) * inv_std[c] + bt[c];
      ys[i] = fuse_relu && y < 0.0 ? 0.0 : y;
    }

  std::string op = training ? "batch_norm_train" : "batch_norm_eval";
  if (fuse_relu) op += "_relu";
  return g.record(
      std::move(op), {x, gamma, beta}, std::move(out),
      [mean = std::move(mean), inv_std = std::move(inv_std), n, d, training, fuse_relu](Graph& g, std::size_t id) {
        const double* gy = g.node(id).grad.data();
        const double* ys = g.node(id).owned.data.data();
        const double* xs = g.input_value(id, 0).data.data();
        const double* gm = g.input_value(id, 1).data.data();
        // Upstream gradient with the ReLU mask applied.
        const auto upstream = [&](std::size_t i) { return fuse_relu && ys[i] <= 0.0 ? 0.0 : gy[i]; };
        std::vector<double> sum_dy(d, 0.0), sum_dy_xhat(d, 0.0);
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t c = 0; c < d; ++c) {
            const std::size_t i = r * d + c;
            const double dy = upstream(i);
            sum_dy[c] += dy;
            sum_dy_xhat[c] += dy * (xs[i] - mean[c]) * inv_std[c];
          }
        if (double* gg = g.input_grad(id, 1))
          for (std::size_t c = 0; c < d; ++c) gg[c] += sum_dy_xhat[c];
        if (double* gb = g.input_grad(id, 2))
          for (std::size_t c = 0; c < d; ++c) gb[c] += sum_dy[c];
        double* gx = g.input_grad(id, 0);
        if (!gx) return;
        const double inv_n = 1.0 / static_cast<double>(n);
        std::vector<double> k1(d), k2(d), k3(d);
        for (std::size_t c = 0; c < d; ++c) {
          k1[c] = gm[c] * inv_std[c];
          k2[c] = training ? inv_n * sum_dy[c] : 0.0;
          k3[c] = training ? inv_n * sum_dy_xhat[c] * inv_std[c] : 0.0;
        }
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t c = 0; c < d; ++c) {
            const std::size_t i = r * d + c;
            gx[i] += k1[c] * (upstream(i) - k2[c] - (xs[i] - mean[c]) * k3[c]);
          }
      });
}

}  // namespace ad
}  // namespace facegeo
