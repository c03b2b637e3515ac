#pragma once

// Reverse-mode automatic differentiation over dense double tensors.
//
// Every backward rule is written in terms of the differentiable ops below, so
// calling grad(..., create_graph=true) yields gradients that are themselves
// graph nodes and can be differentiated again. The bilevel (inner/outer)
// update in training relies on this.

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "metafc/tensor.hpp"

namespace metafc::ad {

struct Node;

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  int64_t numel() const { return value().numel(); }
  bool requires_grad() const;
  // Same value, cut from the graph.
  Var detach() const { return Var(value(), false); }

  const Node* node() const { return node_.get(); }

 private:
  friend std::vector<Var> grad(const Var&, std::span<const Var>, bool, const Var*);
  std::shared_ptr<Node> node_;
};

using BackwardFn = std::function<std::vector<Var>(const Var& grad_out)>;

struct Node {
  Tensor value;
  bool requires_grad = false;
  std::vector<Var> inputs;
  BackwardFn backward;
  const char* name = "leaf";
};

bool grad_enabled();

// RAII switch for graph recording on the current thread.
class GradModeGuard {
 public:
  explicit GradModeGuard(bool enabled);
  ~GradModeGuard();
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  bool previous_;
};

// Gradients of `output` with respect to each of `inputs`. Inputs the output
// does not depend on receive zeros. `seed` defaults to ones (output must then
// hold a single element). With create_graph the returned gradients are
// differentiable functions of the graph's leaves.
std::vector<Var> grad(const Var& output, std::span<const Var> inputs, bool create_graph = false,
                      const Var* seed = nullptr);

// A fixed linear operator with its adjoint. Ops built from it are closed under
// differentiation: d/dx <g, A x> = A^T g, and A^T's backward is A.
class LinearMap {
 public:
  virtual ~LinearMap() = default;
  virtual Shape in_shape() const = 0;
  virtual Shape out_shape() const = 0;
  virtual Tensor forward(const Tensor& x) const = 0;
  virtual Tensor adjoint(const Tensor& y) const = 0;
};

Var constant(Tensor value);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
// Elementwise product / sum with a tensor that is not differentiated.
Var mul_const(const Var& a, Tensor c);
Var add_const(const Var& a, Tensor c);

Var sigmoid(const Var& a);
Var tanh(const Var& a);
Var sqrt(const Var& a);
Var leaky_relu(const Var& a, double negative_slope);
// Gradient passes only where lo <= a <= hi.
Var clamp(const Var& a, double lo, double hi);
// Forward rounds half away from zero, backward is the identity.
Var ste_round(const Var& a);

Var sum(const Var& a);
Var mean(const Var& a);
Var reshape(const Var& a, Shape shape);
// Same rank; every dimension of `a` equals the target or is 1.
Var broadcast_to(const Var& a, Shape shape);
// Sums over dimensions where `shape` has extent 1 (adjoint of broadcast_to).
Var reduce_to(const Var& a, Shape shape);

// op(a) * op(b) for 2-d operands, op = transpose when the flag is set.
Var matmul(const Var& a, const Var& b, bool transpose_a = false, bool transpose_b = false);

// Cross-correlation of x [B,Ci,H,W] with w [Co,Ci,k,k], zero padding.
Var conv2d(const Var& x, const Var& w, int stride, int pad);
Var conv2d_input_grad(const Var& g, const Var& w, const Shape& x_shape, int stride, int pad);
Var conv2d_weight_grad(const Var& x, const Var& g, const Shape& w_shape, int stride, int pad);

Var linear_map(const Var& x, std::shared_ptr<const LinearMap> op, bool use_adjoint = false);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }

}  // namespace metafc::ad
