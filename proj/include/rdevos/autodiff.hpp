#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <vector>

#include "rdevos/ops.hpp"
#include "rdevos/tensor.hpp"

namespace rdevos {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

  /// Gradient accumulated by the last backward(); zeros if none reached.
  Tensor grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node
/// list is always topologically sorted. Single writer: one forward/backward
/// pass owns a tape.
class Tape {
 public:
  /// Receives the output gradient; pushes input gradients via accumulate().
  using BackwardFn = std::function<void(const Tensor& grad_out, Tape& tape)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value) { return push(std::make_shared<const Tensor>(std::move(value)), true, nullptr); }
  Var constant(Tensor value) { return push(std::make_shared<const Tensor>(std::move(value)), false, nullptr); }

  // Non-owning variants: `value` must outlive the tape and stay unmodified
  // until backward() has run.
  Var leaf_ref(const Tensor& value) { return push(borrow(value), true, nullptr); }
  Var constant_ref(const Tensor& value) { return push(borrow(value), false, nullptr); }

  /// Records an op output. The backward closure is dropped when no input
  /// requires a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward);
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn backward);

  void accumulate(const Var& v, const Tensor& g);
  void accumulate(const Var& v, Tensor&& g);

  /// Seeds d(loss)/d(loss) = 1 and walks nodes in reverse order.
  void backward(const Var& loss);
  void zero_grad();

  const Tensor& value(const Var& v) const { return *nodes_.at(v.id_).value; }
  bool requires_grad(const Var& v) const { return nodes_.at(v.id_).requires_grad; }
  Tensor grad(const Var& v) const;
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    std::shared_ptr<const Tensor> value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    BackwardFn backward;
  };

  static std::shared_ptr<const Tensor> borrow(const Tensor& t) {
    return std::shared_ptr<const Tensor>(&t, [](const Tensor*) {});
  }
  Var push(std::shared_ptr<const Tensor> value, bool requires_grad, BackwardFn backward);
  void check_owner(const Var& v) const;

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(*this); }
inline bool Var::requires_grad() const { return tape_->requires_grad(*this); }
inline Tensor Var::grad() const { return tape_->grad(*this); }

/// Copy of `v` cut off from the gradient flow.
Var detach(const Var& v);

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var softmax(const Var& x, int axis);
/// Scalar KL divergence, see kl_divergence(const Tensor&, ...).
Var kl_divergence(const Var& p, const Var& q, int axis);
Var conv(const Var& x, const Var& w, ConvOptions opts = {});
Var maxpool2d(const Var& x, int kernel, int stride);
Var concat(const Var& a, const Var& b, int axis);
Var concat(std::span<const Var> parts, int axis);
Var slice(const Var& x, int axis, Index start, Index length);
Var reshape(const Var& x, Shape shape);
Var upsample_nearest(const Var& x, int factor);

// Pointwise kit. Binary ops need equal shapes, or one side of size 1.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, double s);
Var relu(const Var& x);
Var log(const Var& x);
Var neg(const Var& x);

Var sum(const Var& x);
Var mean(const Var& x);

/// Per-position softmax cross-entropy. logits [K x ...], labels hold class
/// ids in [0, K) for each trailing position; returns the per-position losses.
Var softmax_cross_entropy(const Var& logits, const std::vector<int>& labels);

/// Mean of the `count` largest entries (ties resolved by lower index).
Var topk_mean(const Var& x, Index count);

inline constexpr double kFiniteDiffStep = 1e-5;

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double h = kFiniteDiffStep);

/// Same as finite_diff_grad, restricted to the listed flat coordinates.
std::vector<double> finite_diff_grad_at(const std::function<double(const Tensor&)>& f, const Tensor& x,
                                        std::span<const Index> coords, double h = kFiniteDiffStep);

/// Relative gradient error |a - b| / max(|a|, |b|, 1e-8).
inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

}  // namespace rdevos
