#pragma once

// Minimal reverse-mode differentiation over dense row-major matrices.
//
// Every op evaluates eagerly and records a closure that maps the output
// gradient onto its parents. Parents whose `requires_grad` is false are
// skipped, so frozen parameters never receive (or allocate) gradients.

#include "teata/tensor.hpp"

#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <vector>

namespace teata::ag {

struct Node {
  Matrix value;
  Matrix grad;  // empty until something flows in
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void accumulate(const Matrix& g);
  bool has_grad() const { return grad.size() != 0; }
};

class Var {
 public:
  Var() = default;
  explicit Var(Matrix value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }

  bool has_grad() const { return node_->has_grad(); }
  /// Gradient, or a zero matrix of matching shape when none has flowed in.
  Matrix grad() const;
  void zero_grad() { node_->grad.resize(0, 0); }

  double item() const { return node_->value(0, 0); }

  const std::shared_ptr<Node>& node() const { return node_; }

  static Var from_node(std::shared_ptr<Node> node) {
    Var v;
    v.node_ = std::move(node);
    return v;
  }

 private:
  std::shared_ptr<Node> node_;
};

/// While alive, ops evaluate values only and record no graph.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Seeds d(root)/d(root) = 1 and propagates to every reachable leaf.
void backward(const Var& root);

/// Generic node: value plus a backward closure receiving (output grad, node).
Var make_op(Matrix value, std::vector<Var> parents, std::function<void(Node&)> backward_fn);

/// Scalar node whose input gradients were computed alongside the value.
/// Backward scales each precomputed gradient by the incoming scalar.
Var precomputed(double value, std::vector<Var> inputs, std::vector<Matrix> input_grads);

Var detach(const Var& x);
Var add(const Var& a, const Var& b);
Var scale(const Var& x, double s);
Var matmul(const Var& a, const Var& b);
/// x (n x in) * weight (in x out) [+ bias (1 x out)].
Var linear(const Var& x, const Var& weight, const Var* bias = nullptr);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
/// x * sigmoid(1.702 x)
Var quick_gelu(const Var& x);
Var gather_rows(const Var& x, std::vector<Eigen::Index> rows);
/// sum_i weights[i] * terms[i] over 1x1 terms.
Var weighted_sum(std::span<const Var> terms, std::span<const double> weights);

/// Multi-head self attention on a packed qkv projection.
/// qkv: (batch*seq) x (3*width) laid out as [q | k | v]; returns (batch*seq) x width.
Var attention(const Var& qkv, Eigen::Index batch, Eigen::Index seq, Eigen::Index heads, bool causal);

/// Prepends a class token to each image's patch tokens and adds positions.
/// patches: (batch*num_patches) x width, cls: 1 x width, pos: (num_patches+1) x width.
Var prepend_class_token(const Var& patches, const Var& cls, const Var& pos, Eigen::Index batch);

/// Builds token sequences from a fixed template. template_ids[k] >= 0 selects
/// a row of `table`; -1 consumes the next row of that sequence's slots.
/// slots: (num_seq*slots_per_seq) x width, pos: len x width.
Var embed_template(const Var& table, const Var& slots, const Var& pos, std::span<const int> template_ids,
                   Eigen::Index num_seq);

/// Interleaves per-sequence specific rows with shared rows:
/// for sequence n, output rows are spec[n*M+0], shared[0], spec[n*M+1], shared[1], ...
/// `rows_of` selects which blocks of `specific` are used (by block index).
Var interleave_pairs(const Var& specific, const Var& shared, std::span<const Eigen::Index> rows_of);

}  // namespace teata::ag
