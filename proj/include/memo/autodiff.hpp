#pragma once

// Reverse-mode automatic differentiation over dense tensors.
//
// Every operation records a node on the Graph that owns its tracked operands.
// Backward rules are themselves written with the same operations, so a
// gradient computed with create_graph = true is an ordinary graph expression
// and can be differentiated again. This is what lets a loss be backpropagated
// through SGD updates that contain gradients of their own.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "memo/errors.hpp"
#include "memo/tensor.hpp"

namespace memo {

class Graph;

/// Handle to a value, optionally tracked by a Graph. Untracked values are constants.
class Var {
 public:
  Var() = default;

  const Tensor& value() const { return *value_; }
  const Shape& shape() const { return value_->shape(); }
  std::size_t size() const { return value_->size(); }
  bool defined() const { return static_cast<bool>(value_); }
  bool tracked() const { return graph_ != nullptr; }
  Graph* graph() const { return graph_; }
  std::int64_t node() const { return node_; }

 private:
  Var(std::shared_ptr<const Tensor> v, Graph* g, std::int64_t n)
      : value_(std::move(v)), graph_(g), node_(n) {}

  std::shared_ptr<const Tensor> value_;
  Graph* graph_ = nullptr;
  std::int64_t node_ = -1;

  friend class Graph;
  friend Var constant(Tensor t);
};

/// Wrap a value that is not differentiated.
inline Var constant(Tensor t) { return Var(std::make_shared<const Tensor>(std::move(t)), nullptr, -1); }

/// Backward rule: given the node's output and the gradient flowing into it,
/// return one gradient per input (an undefined Var where need[i] is false).
using BackwardFn =
    std::function<std::vector<Var>(const Var& out, const Var& grad, const std::vector<bool>& need)>;

/// Append-only record of operations. Nodes are stored in creation order, which
/// is a topological order. Not copyable or movable: Vars point at it.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Register a differentiable input.
  Var leaf(Tensor t) {
    nodes_.push_back(Node{std::make_shared<const Tensor>(std::move(t)), {}, nullptr});
    return Var(nodes_.back().value, this, static_cast<std::int64_t>(nodes_.size() - 1));
  }

  std::size_t size() const { return nodes_.size(); }
  bool recording() const { return recording_; }

  /// Estimated bytes held by recorded values.
  std::size_t retained_bytes() const {
    std::size_t total = 0;
    for (const auto& n : nodes_) total += n.value->size() * sizeof(double);
    return total;
  }

  /// d(output)/d(wrt[i]) for each i. The output must hold a single value.
  /// A wrt node the output does not depend on gets an exact zero tensor.
  /// With create_graph the returned gradients are tracked nodes.
  std::vector<Var> gradient(const Var& output, const std::vector<Var>& wrt, bool create_graph = false);

  /// Record a computed value. Returns a constant when no input is tracked or
  /// recording is suspended.
  static Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn backward) {
    Graph* g = nullptr;
    for (const auto& in : inputs) {
      if (in.graph_ != nullptr) {
        if (g != nullptr && g != in.graph_) throw ContractError("operands belong to different graphs");
        g = in.graph_;
      }
    }
    if (g == nullptr || !g->recording_) return constant(std::move(value));
    g->nodes_.push_back(Node{std::make_shared<const Tensor>(std::move(value)), inputs, std::move(backward)});
    return Var(g->nodes_.back().value, g, static_cast<std::int64_t>(g->nodes_.size() - 1));
  }

  /// Temporarily stop recording (e.g. for parameter updates that are not differentiated).
  class Pause {
   public:
    Pause(Graph& g, bool record = false) : g_(g), prev_(g.recording_) { g.recording_ = record; }
    ~Pause() { g_.recording_ = prev_; }
    Pause(const Pause&) = delete;
    Pause& operator=(const Pause&) = delete;

   private:
    Graph& g_;
    bool prev_;
  };

 private:
  struct Node {
    std::shared_ptr<const Tensor> value;
    std::vector<Var> inputs;
    BackwardFn backward;
  };

  std::deque<Node> nodes_;  // stable references while backward rules append
  bool recording_ = true;
};

/// Detach a tracked value from its graph.
inline Var detach(const Var& v) { return constant(v.value()); }

// ---------------------------------------------------------------------------
// Operations

namespace detail {

inline void require_same_shape(const char* op, const Var& a, const Var& b) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
}

inline void require_rank(const char* op, const Var& a, std::size_t rank) {
  if (a.value().rank() != rank)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_string(a.shape()));
}

template <class F>
Tensor map(const Tensor& a, F f) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

template <class F>
Tensor zip(const Tensor& a, const Tensor& b, F f) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

}  // namespace detail

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double c);
Var matmul(const Var& a, const Var& b);
Var matmul_nt(const Var& a, const Var& b);
Var matmul_tn(const Var& a, const Var& b);
Var add_bias(const Var& x, const Var& b);
Var sum_rows(const Var& x);
Var broadcast_rows(const Var& v, std::size_t rows);
Var row_sum(const Var& x);
Var broadcast_cols(const Var& v, std::size_t cols);
Var sum(const Var& x);
Var fill(const Var& s, const Shape& shape);
Var reshape(const Var& x, const Shape& shape);
Var relu(const Var& x);
Var gather_rows(const Var& x, std::vector<std::uint32_t> idx);
Var scatter_rows(const Var& g, std::vector<std::uint32_t> idx, std::size_t rows);
Var softmax(const Var& logits);
Var cross_entropy(const Var& logits, std::vector<std::uint32_t> labels);

inline Var add(const Var& a, const Var& b) {
  detail::require_same_shape("add", a, b);
  return Graph::record(detail::zip(a.value(), b.value(), std::plus<>{}), {a, b},
                       [](const Var&, const Var& g, const std::vector<bool>&) {
                         return std::vector<Var>{g, g};
                       });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same_shape("sub", a, b);
  return Graph::record(detail::zip(a.value(), b.value(), std::minus<>{}), {a, b},
                       [](const Var&, const Var& g, const std::vector<bool>& need) {
                         return std::vector<Var>{g, need[1] ? neg(g) : Var{}};
                       });
}

inline Var mul(const Var& a, const Var& b) {
  detail::require_same_shape("mul", a, b);
  return Graph::record(detail::zip(a.value(), b.value(), std::multiplies<>{}), {a, b},
                       [a, b](const Var&, const Var& g, const std::vector<bool>& need) {
                         return std::vector<Var>{need[0] ? mul(g, b) : Var{}, need[1] ? mul(g, a) : Var{}};
                       });
}

inline Var neg(const Var& a) {
  return Graph::record(detail::map(a.value(), std::negate<>{}), {a},
                       [](const Var&, const Var& g, const std::vector<bool>&) {
                         return std::vector<Var>{neg(g)};
                       });
}

inline Var scale(const Var& a, double c) {
  return Graph::record(detail::map(a.value(), [c](double v) { return c * v; }), {a},
                       [c](const Var&, const Var& g, const std::vector<bool>&) {
                         return std::vector<Var>{scale(g, c)};
                       });
}

inline Var square(const Var& a) { return mul(a, a); }

/// [m x k] * [k x n]
inline Var matmul(const Var& a, const Var& b) {
  detail::require_rank("matmul", a, 2);
  detail::require_rank("matmul", b, 2);
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k)
    throw DimensionError("matmul: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  Tensor out(Shape{m, n});
  kernels::matmul(a.value().data(), b.value().data(), out.data(), m, k, n);
  return Graph::record(std::move(out), {a, b}, [a, b](const Var&, const Var& g, const std::vector<bool>& need) {
    return std::vector<Var>{need[0] ? matmul_nt(g, b) : Var{}, need[1] ? matmul_tn(a, g) : Var{}};
  });
}

/// [m x k] * [n x k]^T
inline Var matmul_nt(const Var& a, const Var& b) {
  detail::require_rank("matmul_nt", a, 2);
  detail::require_rank("matmul_nt", b, 2);
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  if (b.shape()[1] != k)
    throw DimensionError("matmul_nt: shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  Tensor out(Shape{m, n});
  const auto bt = kernels::transpose(b.value().data(), n, k);
  kernels::matmul(a.value().data(), bt, out.data(), m, k, n);
  return Graph::record(std::move(out), {a, b}, [a, b](const Var&, const Var& g, const std::vector<bool>& need) {
    return std::vector<Var>{need[0] ? matmul(g, b) : Var{}, need[1] ? matmul_tn(g, a) : Var{}};
  });
}

/// [k x m]^T * [k x n]
inline Var matmul_tn(const Var& a, const Var& b) {
  detail::require_rank("matmul_tn", a, 2);
  detail::require_rank("matmul_tn", b, 2);
  const std::size_t k = a.shape()[0], m = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k)
    throw DimensionError("matmul_tn: shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  Tensor out(Shape{m, n});
  kernels::matmul_tn(a.value().data(), b.value().data(), out.data(), k, m, n);
  return Graph::record(std::move(out), {a, b}, [a, b](const Var&, const Var& g, const std::vector<bool>& need) {
    return std::vector<Var>{need[0] ? matmul_nt(b, g) : Var{}, need[1] ? matmul(a, g) : Var{}};
  });
}

/// Adds b[m] to every row of x[B x m].
inline Var add_bias(const Var& x, const Var& b) {
  detail::require_rank("add_bias", x, 2);
  detail::require_rank("add_bias", b, 1);
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  if (b.shape()[0] != cols)
    throw DimensionError("add_bias: shape mismatch " + shape_string(x.shape()) + " vs " +
                         shape_string(b.shape()));
  Tensor out = x.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out.at(r, c) += b.value()[c];
  return Graph::record(std::move(out), {x, b}, [](const Var&, const Var& g, const std::vector<bool>& need) {
    return std::vector<Var>{g, need[1] ? sum_rows(g) : Var{}};
  });
}

/// Column sums: [B x m] -> [m].
inline Var sum_rows(const Var& x) {
  detail::require_rank("sum_rows", x, 2);
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  Tensor out(Shape{cols});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c] += x.value().at(r, c);
  return Graph::record(std::move(out), {x}, [rows](const Var&, const Var& g, const std::vector<bool>&) {
    return std::vector<Var>{broadcast_rows(g, rows)};
  });
}

/// [m] -> [rows x m], each row a copy.
inline Var broadcast_rows(const Var& v, std::size_t rows) {
  detail::require_rank("broadcast_rows", v, 1);
  const std::size_t cols = v.shape()[0];
  Tensor out(Shape{rows, cols});
  for (std::size_t r = 0; r < rows; ++r) std::copy(v.value().data().begin(), v.value().data().end(), out.row(r).begin());
  return Graph::record(std::move(out), {v}, [](const Var&, const Var& g, const std::vector<bool>&) {
    return std::vector<Var>{sum_rows(g)};
  });
}

/// Row sums: [B x k] -> [B].
inline Var row_sum(const Var& x) {
  detail::require_rank("row_sum", x, 2);
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  Tensor out(Shape{rows});
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (double v : x.value().row(r)) s += v;
    out[r] = s;
  }
  return Graph::record(std::move(out), {x}, [cols](const Var&, const Var& g, const std::vector<bool>&) {
    return std::vector<Var>{broadcast_cols(g, cols)};
  });
}

/// [B] -> [B x cols], each row filled with its entry.
inline Var broadcast_cols(const Var& v, std::size_t cols) {
  detail::require_rank("broadcast_cols", v, 1);
  const std::size_t rows = v.shape()[0];
  Tensor out(Shape{rows, cols});
  for (std::size_t r = 0; r < rows; ++r) std::fill(out.row(r).begin(), out.row(r).end(), v.value()[r]);
  return Graph::record(std::move(out), {v}, [](const Var&, const Var& g, const std::vector<bool>&) {
    return std::vector<Var>{row_sum(g)};
  });
}

inline Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  Shape shape = x.shape();
  return Graph::record(Tensor::scalar(s), {x}, [shape](const Var&, const Var& g, const std::vector<bool>&) {
    return std::vector<Var>{fill(g, shape)};
  });
}

inline Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

inline Var dot(const Var& a, const Var& b) { return sum(mul(a, b)); }

/// Broadcast a single value to the given shape.
inline Var fill(const Var& s, const Shape& shape) {
  if (s.size() != 1) throw DimensionError("fill: expected a single value, got " + shape_string(s.shape()));
  return Graph::record(Tensor(shape, s.value()[0]), {s}, [](const Var& out, const Var& g, const std::vector<bool>&) {
    (void)out;
    return std::vector<Var>{sum(g)};
  });
}

inline Var reshape(const Var& x, const Shape& shape) {
  Shape from = x.shape();
  return Graph::record(x.value().reshaped(shape), {x}, [from](const Var&, const Var& g, const std::vector<bool>&) {
    return std::vector<Var>{reshape(g, from)};
  });
}

/// max(0, x). The derivative at exactly 0 is taken as 0.
inline Var relu(const Var& x) {
  return Graph::record(detail::map(x.value(), [](double v) { return v > 0.0 ? v : 0.0; }), {x},
                       [x](const Var&, const Var& g, const std::vector<bool>&) {
                         return std::vector<Var>{
                             mul(g, constant(detail::map(x.value(), [](double v) { return v > 0.0 ? 1.0 : 0.0; })))};
                       });
}

/// Rows idx[i] of x[N x d], stacked into [B x d].
inline Var gather_rows(const Var& x, std::vector<std::uint32_t> idx) {
  detail::require_rank("gather_rows", x, 2);
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  Tensor out(Shape{idx.size(), d});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= n) throw IndexError("gather_rows: row " + std::to_string(idx[i]) + " of " + std::to_string(n));
    auto src = x.value().row(idx[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return Graph::record(std::move(out), {x}, [idx = std::move(idx), n](const Var&, const Var& g, const std::vector<bool>&) {
    return std::vector<Var>{scatter_rows(g, idx, n)};
  });
}

/// Adjoint of gather_rows: accumulates row i of g into row idx[i] of an [rows x d] zero matrix.
inline Var scatter_rows(const Var& g, std::vector<std::uint32_t> idx, std::size_t rows) {
  detail::require_rank("scatter_rows", g, 2);
  const std::size_t d = g.shape()[1];
  if (g.shape()[0] != idx.size()) throw DimensionError("scatter_rows: index count does not match rows");
  Tensor out(Shape{rows, d});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= rows) throw IndexError("scatter_rows: row " + std::to_string(idx[i]) + " of " + std::to_string(rows));
    auto dst = out.row(idx[i]);
    auto src = g.value().row(i);
    for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
  }
  return Graph::record(std::move(out), {g}, [idx = std::move(idx)](const Var&, const Var& gg, const std::vector<bool>&) {
    return std::vector<Var>{gather_rows(gg, idx)};
  });
}

namespace detail {

inline Tensor softmax_rows(const Tensor& z) {
  const std::size_t rows = z.rows(), cols = z.cols();
  Tensor p(z.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* zr = z.data().data() + r * cols;
    double* pr = p.data().data() + r * cols;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, zr[c]);
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += (pr[c] = std::exp(zr[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) pr[c] /= s;
  }
  return p;
}

}  // namespace detail

/// Row-wise softmax of [B x k] (or of a single [k] vector).
inline Var softmax(const Var& logits) {
  if (logits.value().rank() != 1 && logits.value().rank() != 2)
    throw DimensionError("softmax: expected [k] or [B x k], got " + shape_string(logits.shape()));
  return Graph::record(detail::softmax_rows(logits.value()), {logits},
                       [](const Var& p, const Var& g, const std::vector<bool>&) {
                         if (p.value().rank() == 1) {
                           // p * (g - <g, p>)
                           return std::vector<Var>{mul(p, sub(g, fill(dot(g, p), p.shape())))};
                         }
                         const std::size_t k = p.shape()[1];
                         return std::vector<Var>{mul(p, sub(g, broadcast_cols(row_sum(mul(g, p)), k)))};
                       });
}

/// Per-row cross-entropy -log softmax(z_r)[label_r] of [B x k] logits, returned as [B].
inline Var cross_entropy(const Var& logits, std::vector<std::uint32_t> labels) {
  detail::require_rank("cross_entropy", logits, 2);
  const std::size_t rows = logits.shape()[0], k = logits.shape()[1];
  if (labels.size() != rows) throw DimensionError("cross_entropy: label count does not match rows");
  Tensor out(Shape{rows});
  Tensor onehot(Shape{rows, k});
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] >= k)
      throw IndexError("cross_entropy: label " + std::to_string(labels[r]) + " outside [0, " + std::to_string(k) + ")");
    auto z = logits.value().row(r);
    const double mx = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (double v : z) s += std::exp(v - mx);
    out[r] = std::log(s) + mx - z[labels[r]];
    onehot.at(r, labels[r]) = 1.0;
  }
  return Graph::record(std::move(out), {logits},
                       [logits, onehot = std::move(onehot), k](const Var&, const Var& g, const std::vector<bool>&) {
                         return std::vector<Var>{mul(sub(softmax(logits), constant(onehot)), broadcast_cols(g, k))};
                       });
}

/// -log softmax(logits)[label] for a single [k] logit vector.
inline Var softmax_cross_entropy(const Var& logits, std::uint32_t label) {
  detail::require_rank("softmax_cross_entropy", logits, 1);
  const std::size_t k = logits.shape()[0];
  if (label >= k) throw IndexError("softmax_cross_entropy: label " + std::to_string(label) + " outside [0, " + std::to_string(k) + ")");
  return reshape(cross_entropy(reshape(logits, Shape{1, k}), {label}), Shape{});
}

/// W x + b for x[n] (or row-batched x[B x n]), W[m x n], b[m].
inline Var affine(const Var& x, const Var& w, const Var& b) {
  detail::require_rank("affine", w, 2);
  detail::require_rank("affine", b, 1);
  const std::size_t m = w.shape()[0], n = w.shape()[1];
  const bool single = x.value().rank() == 1;
  if ((single && x.shape()[0] != n) || (!single && (x.value().rank() != 2 || x.shape()[1] != n)))
    throw DimensionError("affine: input " + shape_string(x.shape()) + " does not match weights " +
                         shape_string(w.shape()));
  if (b.shape()[0] != m)
    throw DimensionError("affine: bias " + shape_string(b.shape()) + " does not match weights " +
                         shape_string(w.shape()));
  if (single) return reshape(add_bias(matmul_nt(reshape(x, Shape{1, n}), w), b), Shape{m});
  return add_bias(matmul_nt(x, w), b);
}

// ---------------------------------------------------------------------------

inline std::vector<Var> Graph::gradient(const Var& output, const std::vector<Var>& wrt, bool create_graph) {
  if (output.size() != 1)
    throw ContractError("gradient: output must be a scalar, got shape " + shape_string(output.shape()));

  auto zeros_for = [&]() {
    std::vector<Var> out;
    out.reserve(wrt.size());
    for (const auto& w : wrt) out.push_back(constant(Tensor(w.shape())));
    return out;
  };
  if (output.graph_ != this) {
    if (output.graph_ != nullptr) throw ContractError("gradient: output belongs to another graph");
    return zeros_for();
  }

  const auto last = static_cast<std::size_t>(output.node_);
  std::vector<char> ancestor(last + 1, 0), dependent(last + 1, 0), is_wrt(last + 1, 0);
  ancestor[last] = 1;
  for (std::size_t i = last + 1; i-- > 0;) {
    if (!ancestor[i]) continue;
    for (const auto& in : nodes_[i].inputs)
      if (in.graph_ == this) ancestor[static_cast<std::size_t>(in.node_)] = 1;
  }
  std::size_t first = last + 1;
  for (const auto& w : wrt) {
    if (w.graph_ != this || static_cast<std::size_t>(w.node_) > last) continue;
    const auto id = static_cast<std::size_t>(w.node_);
    dependent[id] = 1;
    is_wrt[id] = 1;
    first = std::min(first, id);
  }
  for (std::size_t i = first; i <= last && first <= last; ++i) {
    if (dependent[i]) continue;
    for (const auto& in : nodes_[i].inputs)
      if (in.graph_ == this && dependent[static_cast<std::size_t>(in.node_)]) {
        dependent[i] = 1;
        break;
      }
  }

  std::vector<Var> grads(last + 1);
  Pause mode(*this, create_graph);
  if (ancestor[last] && dependent[last]) grads[last] = constant(Tensor(output.shape(), 1.0));

  std::vector<bool> need;
  for (std::size_t i = last + 1; i-- > first;) {
    if (!grads[i].defined() || !nodes_[i].backward) continue;
    const Node& node = nodes_[i];
    need.assign(node.inputs.size(), false);
    bool any = false;
    for (std::size_t j = 0; j < node.inputs.size(); ++j) {
      const auto& in = node.inputs[j];
      if (in.graph_ == this && ancestor[static_cast<std::size_t>(in.node_)] &&
          dependent[static_cast<std::size_t>(in.node_)]) {
        need[j] = true;
        any = true;
      }
    }
    if (any) {
      const Var out(node.value, this, static_cast<std::int64_t>(i));
      auto contrib = node.backward(out, grads[i], need);
      for (std::size_t j = 0; j < node.inputs.size(); ++j) {
        if (!need[j] || !contrib[j].defined()) continue;
        auto& slot = grads[static_cast<std::size_t>(node.inputs[j].node_)];
        slot = slot.defined() ? add(slot, contrib[j]) : std::move(contrib[j]);
      }
    }
    if (!is_wrt[i]) grads[i] = Var{};
  }

  std::vector<Var> out;
  out.reserve(wrt.size());
  for (const auto& w : wrt) {
    if (w.graph_ == this && static_cast<std::size_t>(w.node_) <= last && grads[static_cast<std::size_t>(w.node_)].defined())
      out.push_back(grads[static_cast<std::size_t>(w.node_)]);
    else
      out.push_back(constant(Tensor(w.shape())));
  }
  return out;
}

}  // namespace memo
