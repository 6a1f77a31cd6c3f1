#pragma once

// Tape-based reverse-mode differentiation. Ops evaluate eagerly as they are
// recorded, so node order is a topological order by construction; backward()
// walks the tape in reverse.

#include <cstddef>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "advbyte/tensor.hpp"

namespace advbyte::ad {

/// Handle to a node of one Graph.
struct Var {
  std::size_t id = 0;
};

class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t self)>;

  Var input(Tensor value, bool requires_grad = false);

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  /// Gradient accumulated by the last backward(); zeros if none reached v.
  const Tensor& grad(Var v);

  /// Seeds d(output)/d(output) = 1; output must be a single value.
  void backward(Var output);
  void backward(Var output, const Tensor& seed);

  std::size_t size() const noexcept { return nodes_.size(); }
  std::string_view op_name(Var v) const { return nodes_[v.id].op; }

  // Op authoring interface.
  Var record(std::string_view op, std::vector<Var> inputs, Tensor value, BackwardFn backward);
  const Tensor& out_grad(std::size_t self) const { return nodes_[self].grad; }
  /// Gradient slot of an input; nullptr when that input needs no gradient.
  Tensor* grad_slot(Var v);

 private:
  struct Node {
    std::string_view op;
    std::vector<Var> inputs;
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

// Differentiable operations. Shapes follow the usual row-major conventions:
// "rows" ops treat the last axis as columns and reduce over the leading axis.

Var identity(Graph& g, Var x);
Var reshape(Graph& g, Var x, Shape shape);

/// out[i, :] = table[ids[i], :]
Var gather_rows(Graph& g, Var table, std::span<const int> ids);

Var matmul(Graph& g, Var a, Var b);
Var transpose(Graph& g, Var a);
/// x[m,k] * w[k,n] + b[n] (x may be 1-D, giving [n]).
Var affine(Graph& g, Var x, Var w, Var b);

Var add(Graph& g, Var a, Var b);
Var sub(Graph& g, Var a, Var b);
Var mul(Graph& g, Var a, Var b);
Var scale(Graph& g, Var x, double factor);
/// x[m,n] * v[n] broadcast over rows.
Var mul_rowwise(Graph& g, Var x, Var v);
/// x[m,n] + v[m] broadcast over columns.
Var add_colwise(Graph& g, Var x, Var v);

Var sigmoid(Graph& g, Var x);
Var relu(Graph& g, Var x);
Var exp(Graph& g, Var x);
Var log(Graph& g, Var x);
/// log(max(x, eps)); the gradient is zero where the clamp is active.
Var log_clamped(Graph& g, Var x, double eps);
/// Row-wise softmax with max subtraction (1-D input is one row).
Var softmax_rows(Graph& g, Var x);

/// Reductions over the leading (time) axis of x[m,n] -> [n].
Var mean_rows(Graph& g, Var x);
/// Max over rows; ties resolve to the lowest row index, which receives the gradient.
Var max_rows(Graph& g, Var x);

Var sum(Graph& g, Var x);
/// x[m,n] -> [m]
Var sum_cols(Graph& g, Var x);
Var dot(Graph& g, Var a, Var b);
Var l2_norm(Graph& g, Var x);
Var l2_normalize_rows(Graph& g, Var x);

/// Stacks 1-D [n] vars into [k,n], or concatenates 2-D [m_i,n] vars along rows.
Var concat_rows(Graph& g, std::span<const Var> parts);
Var slice_rows(Graph& g, Var x, std::size_t begin, std::size_t end);

}  // namespace advbyte::ad
