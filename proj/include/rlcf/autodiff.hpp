#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "rlcf/param_tree.hpp"
#include "rlcf/tensor.hpp"

namespace rlcf::ad {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; only valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  const Tensor2& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  double item() const { return value().item(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Eager tape for reverse-mode differentiation over a small fixed op set.
/// Forward values are computed as nodes are recorded; backward() walks the
/// nodes in reverse creation order, which is a valid topological order.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Var leaf(Tensor2 value, bool requires_grad);
  Var constant(Tensor2 value) { return leaf(std::move(value), false); }
  Var constant(double value) { return leaf(Tensor2::scalar(value), false); }

  /// Records an op output. Throws NumericError naming `op` if the value is
  /// not finite.
  Var record(const char* op, Tensor2 value, std::vector<std::size_t> parents, BackwardFn backward);

  const Tensor2& value(std::size_t id) const { return nodes_[id].value; }
  /// Gradient of the last backward root w.r.t. node `id` (zeros if the node
  /// does not influence it).
  Tensor2 grad(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Adds `delta` into the gradient accumulator of node `id`.
  void accumulate(std::size_t id, const Tensor2& delta);
  const Tensor2& out_grad(std::size_t id) const { return nodes_[id].grad; }

  void backward(Var root);
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    const char* op = "leaf";
    Tensor2 value;
    Tensor2 grad;
    bool requires_grad = false;
    std::vector<std::size_t> parents;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

// Ops. All inputs must live on the same tape.
Var matmul(Var a, Var b);
/// a · bᵀ
Var matmul_nt(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
/// Elementwise product.
Var mul(Var a, Var b);
/// a (m×n) plus row vector r (1×n) added to every row.
Var add_row(Var a, Var r);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var tanh(Var a);
Var log(Var a);
/// Divides every row by its L2 norm; zero rows raise "degenerate embedding".
Var normalize_rows(Var a);
Var softmax_rows(Var a);
Var log_softmax_rows(Var a);
Var sum(Var a);
Var mean(Var a);
/// Column sums (1×n).
Var sum_rows(Var a);
/// Column means (1×n).
Var mean_rows(Var a);
Var concat_rows(Var a, Var b);
/// Row `r` as a 1×n vector.
Var row(Var a, std::size_t r);
/// Rows a[ids[i]] stacked into a k×n matrix (ids may repeat).
Var select_rows(Var a, std::span<const std::size_t> ids);
/// Entries (r, cols[i]) as a 1×k vector.
Var gather_row(Var a, std::size_t r, std::span<const std::size_t> cols);
/// Elements a(rows[i], cols[i]) as a 1×k vector.
Var gather(Var a, std::span<const std::size_t> rows, std::span<const std::size_t> cols);
/// −Σ p ln p over all entries with 0·ln 0 = 0 (zero entries get zero
/// gradient). Negative entries raise Error.
Var entropy(Var p);
/// Sum of a ⊙ weights with constant weights.
Var weighted_sum(Var a, const Tensor2& weights);

/// Param blocks bound as tape leaves.
class Bindings {
 public:
  void bind(std::string name, Var v) { entries_.emplace_back(std::move(name), v); }
  Var operator[](std::string_view name) const;
  const std::vector<std::pair<std::string, Var>>& entries() const { return entries_; }

 private:
  std::vector<std::pair<std::string, Var>> entries_;
};

/// Binds every block of `params` as a leaf; trainable blocks require grad.
Bindings bind(Tape& tape, const ParamTree& params);

/// A scalar-valued function of bound parameters. Must return a 1×1 Var.
using LossFn = std::function<Var(Tape&, const Bindings&)>;

struct ValueAndGrad {
  double value = 0.0;
  GradTree grad;
};

double evaluate(const LossFn& loss, const ParamTree& params);
ValueAndGrad value_and_grad(const LossFn& loss, const ParamTree& params);
/// Exact reverse-mode gradient; frozen blocks get zero entries.
GradTree grad(const LossFn& loss, const ParamTree& params);

/// Central-difference estimate for every scalar of every trainable block.
/// Frozen blocks get zero entries. Throws if h <= 0.
GradTree finite_diff(const LossFn& loss, const ParamTree& params, double h);

}  // namespace rlcf::ad
