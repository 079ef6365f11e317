#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "cubevit/tensor.hpp"

namespace cubevit::ad {

struct Node {
  Tensor value;
  Tensor grad;  // empty until something flows into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  // Lazily zero-initialized adjoint buffer.
  Tensor& grad_buffer();
};

/// Handle to a node in a reverse-mode graph. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var constant(Tensor value);
  static Var parameter(Tensor value);

  bool defined() const noexcept { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_->requires_grad; }

  // Adjoint after backward(); zeros when nothing reached this node.
  Tensor grad() const;
  bool has_grad() const { return node_->grad.numel() != 0; }
  void zero_grad() { node_->grad = Tensor(); }

  // Leaf mutation, used by optimizers.
  void set_value(Tensor value);

  Node* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node>& shared() const noexcept { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Builds an op node. `backward` is dropped when no input needs a gradient.
Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward);

/// Reverse sweep from a single-element loss. Adjoints accumulate into every
/// reachable node that requires a gradient, so repeated calls sum.
void backward(const Var& loss);

// Elementwise.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var scale_by(const Var& a, const Var& factor);  // factor is a 1-element Var
Var exp(const Var& a);
Var abs(const Var& a);
Var square(const Var& a);
Var relu(const Var& a);
Var gelu(const Var& a);

// Adds `b` (R_b x C) to every block of R_b consecutive rows of `a` (R_a x C).
// R_b == 1 is a bias broadcast.
Var add_tiled(const Var& a, const Var& b);

Var matmul(const Var& a, const Var& b);
Var matmul_nt(const Var& a, const Var& b);  // a * b^T
Var transpose(const Var& a);
Var linear(const Var& x, const Var& weight, const Var& bias);  // x * W + b
Var reshape(const Var& a, Shape shape);

Var softmax(const Var& x, std::size_t axis);
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-6);
Var l2_normalize_rows(const Var& x);

// Reductions.
Var sum(const Var& a);
Var mean(const Var& a);
// Mean over each block of `segment` consecutive rows: (B*segment) x C -> B x C.
Var segment_mean(const Var& x, std::size_t segment);

// Mean over rows of -sum_c target[r,c] * log_softmax(logits)[r,c].
Var soft_cross_entropy(const Var& logits, const Tensor& targets);
// Mean binary cross-entropy on logits with {0,1} (or soft) targets.
Var bce_with_logits(const Var& logits, const Tensor& targets);

// Row plumbing.
Var gather_rows(const Var& x, std::span<const std::size_t> rows);
// Output has `total` rows; rows[i] receives x row i, every other row gets `fill` (1 x C).
Var scatter_rows(const Var& x, std::span<const std::size_t> rows, std::size_t total, const Var& fill);
Var slice_cols(const Var& x, std::size_t start, std::size_t width);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);

/// Inverted dropout: scales kept entries by 1/(1-p) in training, identity otherwise.
Var dropout(const Var& x, double p, Rng& rng, bool training);

/// Factored positional table: row (iz * planar_rows + ip) = planar[ip] + depth[iz].
Var factored_position(const Var& planar, const Var& depth);

}  // namespace cubevit::ad
