#pragma once

// Reverse-mode differentiation over dense matrices.
//
// Values are computed eagerly when an op is recorded, so a tape built without
// gradient tracking yields exactly the same numbers as one built with it.
// Nodes are appended in evaluation order; the backward sweep walks them in
// reverse and visits each reachable node once.

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "synapse/numerics.hpp"

namespace synapse::ad {

/// Handle to a node on a Tape.
struct Var {
  std::size_t id = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, Var self, const Tensor2& grad_out)>;

  /// With `track_gradients` false no backward closures are stored.
  explicit Tape(bool track_gradients = true) : tracking_(track_gradients) {}

  Var variable(Tensor2 value);
  /// Leaf that refers to storage owned elsewhere; the referent must outlive the tape.
  Var variable_ref(const Tensor2& value);
  Var constant(Tensor2 value);
  Var constant_ref(const Tensor2& value);

  /// Records the result of an op. `backward` is kept only if some input requires a gradient.
  Var record(Tensor2 value, std::initializer_list<Var> inputs, Backward backward);
  Var record(Tensor2 value, std::span<const Var> inputs, Backward backward);

  const Tensor2& value(Var v) const;
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  bool tracking() const noexcept { return tracking_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Adds `g` to the gradient of `v`. Only meaningful inside a backward closure.
  void accumulate(Var v, const Tensor2& g);

  /// Gradients of the scalar (1x1) `root` with respect to each node in `wrt`.
  /// Nodes that do not influence the root get a zero matrix of their shape.
  std::vector<Tensor2> grad(Var root, std::span<const Var> wrt);

 private:
  struct Node {
    Tensor2 owned;
    const Tensor2* external = nullptr;
    bool requires_grad = false;
    Backward backward;
  };

  Var push(Node node);

  bool tracking_;
  std::vector<Node> nodes_;
  std::vector<Tensor2> grads_;
  bool in_backward_ = false;
};

// Ops. Each returns a new node; shapes are checked eagerly.

Var matmul(Tape& t, Var a, Var b);
/// a * b^T
Var matmul_bt(Tape& t, Var a, Var b);
Var add(Tape& t, Var a, Var b);
/// Adds a 1 x n row to every row of x.
Var add_row(Tape& t, Var x, Var row);
Var scale(Tape& t, Var x, double s);
Var gelu(Tape& t, Var x);
/// Row-wise layer normalisation; gamma and beta are 1 x n.
Var layer_norm_rows(Tape& t, Var x, Var gamma, Var beta, double eps);
Var softmax_rows(Tape& t, Var x);
Var slice_cols(Tape& t, Var x, Eigen::Index start, Eigen::Index count);
Var slice_rows(Tape& t, Var x, Eigen::Index start, Eigen::Index count);
Var concat_cols(Tape& t, std::span<const Var> parts);
/// out.row(i) = table.row(ids[i])
Var gather_rows(Tape& t, Var table, std::span<const int> ids);
/// Zeroes x(row, c) for every c in cols.
Var zero_entries(Tape& t, Var x, Eigen::Index row, std::span<const int> cols);
/// x + c for a constant matrix c of the same shape.
Var add_constant(Tape& t, Var x, const Tensor2& c);
/// -log softmax(logits)[label] for a 1 x C logits row; result is 1 x 1.
Var cross_entropy(Tape& t, Var logits, Eigen::Index label);
/// Sum of all entries, 1 x 1.
Var sum(Tape& t, Var x);

}  // namespace synapse::ad
