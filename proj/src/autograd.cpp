#include "metafc/autograd.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <unordered_map>

namespace metafc::ad {

namespace {

thread_local bool t_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

bool any_requires_grad(const std::vector<Var>& inputs) {
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Var& v) { return v.defined() && v.requires_grad(); });
}

Var make_result(Tensor value, std::vector<Var> inputs, BackwardFn fn, const char* name) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->name = name;
  if (t_grad_enabled && any_requires_grad(inputs)) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(fn);
  }
  return Var(std::move(node));
}

void check_same(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

template <class F>
Tensor map_unary(const Tensor& a, F f) {
  Tensor out(a.shape());
  const double* src = a.ptr();
  double* dst = out.ptr();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) dst[i] = f(src[i]);
  return out;
}

template <class F>
Tensor map_binary(const Tensor& a, const Tensor& b, F f) {
  Tensor out(a.shape());
  const double* pa = a.ptr();
  const double* pb = b.ptr();
  double* dst = out.ptr();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) dst[i] = f(pa[i], pb[i]);
  return out;
}

std::vector<int64_t> broadcast_strides(const Shape& small, const Shape& big, const char* op) {
  if (small.size() != big.size()) {
    throw std::invalid_argument(std::string(op) + ": rank mismatch " + shape_str(small) + " vs " +
                                shape_str(big));
  }
  std::vector<int64_t> strides(small.size(), 0);
  int64_t s = 1;
  for (size_t d = small.size(); d-- > 0;) {
    if (small[d] == big[d]) {
      strides[d] = small[d] == 1 ? 0 : s;
    } else if (small[d] != 1) {
      throw std::invalid_argument(std::string(op) + ": cannot broadcast " + shape_str(small) +
                                  " to " + shape_str(big));
    }
    s *= small[d];
  }
  return strides;
}

// Calls f(big_index, small_index) for every element of `big`, in order.
template <class F>
void for_each_broadcast(const Shape& big, const std::vector<int64_t>& small_strides, F f) {
  const size_t rank = big.size();
  const int64_t total = shape_numel(big);
  if (rank == 0) {
    if (total == 1) f(0, 0);
    return;
  }
  std::vector<int64_t> idx(rank, 0);
  const int64_t inner = big[rank - 1];
  const int64_t inner_stride = small_strides[rank - 1];
  int64_t small_base = 0;
  for (int64_t i = 0; i < total; i += inner) {
    for (int64_t j = 0; j < inner; ++j) f(i + j, small_base + j * inner_stride);
    // advance the odometer over the outer dimensions
    for (size_t d = rank - 1; d-- > 0;) {
      ++idx[d];
      small_base += small_strides[d];
      if (idx[d] < big[d]) break;
      small_base -= small_strides[d] * big[d];
      idx[d] = 0;
    }
  }
}

Tensor broadcast_tensor(const Tensor& a, const Shape& shape) {
  auto strides = broadcast_strides(a.shape(), shape, "broadcast_to");
  Tensor out(shape);
  const double* src = a.ptr();
  double* dst = out.ptr();
  for_each_broadcast(shape, strides, [&](int64_t bi, int64_t si) { dst[bi] = src[si]; });
  return out;
}

Tensor reduce_tensor(const Tensor& a, const Shape& shape) {
  auto strides = broadcast_strides(shape, a.shape(), "reduce_to");
  Tensor out(shape);
  const double* src = a.ptr();
  double* dst = out.ptr();
  for_each_broadcast(a.shape(), strides, [&](int64_t bi, int64_t si) { dst[si] += src[bi]; });
  return out;
}

struct ConvGeom {
  int64_t batch, cin, h, w, cout, k, ho, wo;
  int stride, pad;
};

ConvGeom conv_geom(const Shape& x, const Shape& w, int stride, int pad) {
  if (x.size() != 4 || w.size() != 4) {
    throw std::invalid_argument("conv2d: expected 4-d input and weight, got " + shape_str(x) +
                                " and " + shape_str(w));
  }
  if (x[1] != w[1] || w[2] != w[3]) {
    throw std::invalid_argument("conv2d: incompatible input " + shape_str(x) + " and weight " +
                                shape_str(w));
  }
  if (stride < 1 || pad < 0) throw std::invalid_argument("conv2d: invalid stride/padding");
  ConvGeom g{x[0], x[1], x[2], x[3], w[0], w[2], 0, 0, stride, pad};
  g.ho = (g.h + 2 * pad - g.k) / stride + 1;
  g.wo = (g.w + 2 * pad - g.k) / stride + 1;
  if (g.ho < 1 || g.wo < 1) throw std::invalid_argument("conv2d: kernel larger than padded input");
  return g;
}

// Output columns [lo, hi) whose input column ow*stride - pad + kj is inside [0, w).
std::pair<int64_t, int64_t> valid_cols(const ConvGeom& g, int64_t kj) {
  const int64_t first = g.pad - kj;  // smallest ow*stride giving iw >= 0
  int64_t lo = first <= 0 ? 0 : (first + g.stride - 1) / g.stride;
  const int64_t last = g.w - 1 + g.pad - kj;
  int64_t hi = last < 0 ? 0 : std::min<int64_t>(g.wo, last / g.stride + 1);
  lo = std::min(lo, hi);
  return {lo, hi};
}

void im2col(const ConvGeom& g, const double* x, double* col) {
  const int64_t p = g.ho * g.wo;
  for (int64_t c = 0; c < g.cin; ++c) {
    for (int64_t ki = 0; ki < g.k; ++ki) {
      for (int64_t kj = 0; kj < g.k; ++kj) {
        double* row = col + ((c * g.k + ki) * g.k + kj) * p;
        const auto [lo, hi] = valid_cols(g, kj);
        const int64_t offset = kj - g.pad;
        for (int64_t oh = 0; oh < g.ho; ++oh) {
          const int64_t ih = oh * g.stride - g.pad + ki;
          double* out = row + oh * g.wo;
          if (ih < 0 || ih >= g.h) {
            std::fill(out, out + g.wo, 0.0);
            continue;
          }
          const double* src = x + (c * g.h + ih) * g.w;
          std::fill(out, out + lo, 0.0);
          if (g.stride == 1) {
            std::copy(src + lo + offset, src + hi + offset, out + lo);
          } else {
            for (int64_t ow = lo; ow < hi; ++ow) out[ow] = src[ow * g.stride + offset];
          }
          std::fill(out + hi, out + g.wo, 0.0);
        }
      }
    }
  }
}

void col2im(const ConvGeom& g, const double* col, double* x) {
  const int64_t p = g.ho * g.wo;
  for (int64_t c = 0; c < g.cin; ++c) {
    for (int64_t ki = 0; ki < g.k; ++ki) {
      for (int64_t kj = 0; kj < g.k; ++kj) {
        const double* row = col + ((c * g.k + ki) * g.k + kj) * p;
        const auto [lo, hi] = valid_cols(g, kj);
        const int64_t offset = kj - g.pad;
        for (int64_t oh = 0; oh < g.ho; ++oh) {
          const int64_t ih = oh * g.stride - g.pad + ki;
          if (ih < 0 || ih >= g.h) continue;
          double* dst = x + (c * g.h + ih) * g.w;
          const double* in = row + oh * g.wo;
          for (int64_t ow = lo; ow < hi; ++ow) dst[ow * g.stride + offset] += in[ow];
        }
      }
    }
  }
}

bool is_pointwise(const ConvGeom& g) { return g.k == 1 && g.stride == 1 && g.pad == 0; }

Tensor conv_forward(const Tensor& x, const Tensor& w, int stride, int pad) {
  const ConvGeom g = conv_geom(x.shape(), w.shape(), stride, pad);
  const int64_t kk = g.cin * g.k * g.k;
  const int64_t p = g.ho * g.wo;
  Tensor out({g.batch, g.cout, g.ho, g.wo});
  std::vector<double> col(is_pointwise(g) ? 0 : static_cast<size_t>(kk * p));
  ConstMap wm(w.ptr(), g.cout, kk);
  for (int64_t b = 0; b < g.batch; ++b) {
    const double* xb = x.ptr() + b * g.cin * g.h * g.w;
    const double* cp = xb;
    if (!is_pointwise(g)) {
      im2col(g, xb, col.data());
      cp = col.data();
    }
    MutMap(out.ptr() + b * g.cout * p, g.cout, p).noalias() = wm * ConstMap(cp, kk, p);
  }
  return out;
}

Tensor conv_input_grad_tensor(const Tensor& gy, const Tensor& w, const Shape& x_shape, int stride,
                              int pad) {
  const ConvGeom g = conv_geom(x_shape, w.shape(), stride, pad);
  if (gy.shape() != Shape{g.batch, g.cout, g.ho, g.wo}) {
    throw std::invalid_argument("conv2d_input_grad: gradient shape " + shape_str(gy.shape()) +
                                " inconsistent with input " + shape_str(x_shape));
  }
  const int64_t kk = g.cin * g.k * g.k;
  const int64_t p = g.ho * g.wo;
  Tensor dx(x_shape);
  RowMat col(kk, p);
  ConstMap wm(w.ptr(), g.cout, kk);
  for (int64_t b = 0; b < g.batch; ++b) {
    ConstMap gb(gy.ptr() + b * g.cout * p, g.cout, p);
    double* dxb = dx.ptr() + b * g.cin * g.h * g.w;
    if (is_pointwise(g)) {
      MutMap(dxb, kk, p).noalias() = wm.transpose() * gb;
    } else {
      col.noalias() = wm.transpose() * gb;
      col2im(g, col.data(), dxb);
    }
  }
  return dx;
}

Tensor conv_weight_grad_tensor(const Tensor& x, const Tensor& gy, const Shape& w_shape, int stride,
                               int pad) {
  const ConvGeom g = conv_geom(x.shape(), w_shape, stride, pad);
  if (gy.shape() != Shape{g.batch, g.cout, g.ho, g.wo}) {
    throw std::invalid_argument("conv2d_weight_grad: gradient shape " + shape_str(gy.shape()) +
                                " inconsistent with input " + shape_str(x.shape()));
  }
  const int64_t kk = g.cin * g.k * g.k;
  const int64_t p = g.ho * g.wo;
  Tensor dw(w_shape);
  MutMap dwm(dw.ptr(), g.cout, kk);
  std::vector<double> col(is_pointwise(g) ? 0 : static_cast<size_t>(kk * p));
  for (int64_t b = 0; b < g.batch; ++b) {
    const double* xb = x.ptr() + b * g.cin * g.h * g.w;
    const double* cp = xb;
    if (!is_pointwise(g)) {
      im2col(g, xb, col.data());
      cp = col.data();
    }
    dwm.noalias() += ConstMap(gy.ptr() + b * g.cout * p, g.cout, p) * ConstMap(cp, kk, p).transpose();
  }
  return dw;
}

Tensor matmul_tensor(const Tensor& a, const Tensor& b, bool ta, bool tb) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw std::invalid_argument("matmul: expected 2-d operands, got " + shape_str(a.shape()) +
                                " and " + shape_str(b.shape()));
  }
  const int64_t m = ta ? a.dim(1) : a.dim(0);
  const int64_t ka = ta ? a.dim(0) : a.dim(1);
  const int64_t kb = tb ? b.dim(1) : b.dim(0);
  const int64_t n = tb ? b.dim(0) : b.dim(1);
  if (ka != kb) {
    throw std::invalid_argument("matmul: inner dimensions differ for " + shape_str(a.shape()) +
                                " and " + shape_str(b.shape()));
  }
  Tensor out({m, n});
  ConstMap am(a.ptr(), a.dim(0), a.dim(1));
  ConstMap bm(b.ptr(), b.dim(0), b.dim(1));
  MutMap om(out.ptr(), m, n);
  if (!ta && !tb) om.noalias() = am * bm;
  else if (ta && !tb) om.noalias() = am.transpose() * bm;
  else if (!ta && tb) om.noalias() = am * bm.transpose();
  else om.noalias() = am.transpose() * bm.transpose();
  return out;
}

}  // namespace

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

const Tensor& Var::value() const {
  if (!node_) throw std::logic_error("access to undefined Var");
  return node_->value;
}

bool Var::requires_grad() const { return node_ && node_->requires_grad; }

bool grad_enabled() { return t_grad_enabled; }

GradModeGuard::GradModeGuard(bool enabled) : previous_(t_grad_enabled) { t_grad_enabled = enabled; }
GradModeGuard::~GradModeGuard() { t_grad_enabled = previous_; }

std::vector<Var> grad(const Var& output, std::span<const Var> inputs, bool create_graph,
                      const Var* seed) {
  if (!output.defined()) throw std::invalid_argument("grad: undefined output");
  Var seed_var;
  if (seed) {
    if (seed->shape() != output.shape()) throw std::invalid_argument("grad: seed shape mismatch");
    seed_var = *seed;
  } else {
    if (output.numel() != 1) {
      throw std::invalid_argument("grad: implicit seed needs a single-element output, got " +
                                  shape_str(output.shape()));
    }
    seed_var = Var(Tensor(output.shape(), 1.0));
  }

  std::vector<Var> result(inputs.size());
  if (!output.requires_grad()) {
    for (size_t i = 0; i < inputs.size(); ++i) result[i] = Var(Tensor(inputs[i].shape()));
    return result;
  }

  // Post-order DFS; reversed it is a valid processing order.
  std::vector<Node*> order;
  std::unordered_map<Node*, int> state;
  std::vector<std::pair<Node*, size_t>> stack{{output.node_.get(), 0}};
  state[output.node_.get()] = 1;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].node_.get();
      if (child && child->requires_grad && !state.count(child)) {
        state[child] = 1;
        stack.emplace_back(child, 0);
      }
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  std::unordered_map<const Node*, size_t> wanted;
  for (size_t i = 0; i < inputs.size(); ++i) wanted.emplace(inputs[i].node(), i);

  GradModeGuard mode(create_graph);
  std::unordered_map<Node*, Var> grads;
  grads[output.node_.get()] = seed_var;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    auto found = grads.find(node);
    if (found == grads.end()) continue;
    Var g = found->second;
    if (!wanted.count(node)) grads.erase(found);
    if (!node->backward) continue;
    std::vector<Var> gin = node->backward(g);
    for (size_t i = 0; i < node->inputs.size(); ++i) {
      const Var& in = node->inputs[i];
      if (!in.requires_grad() || i >= gin.size() || !gin[i].defined()) continue;
      auto slot = grads.find(in.node_.get());
      if (slot == grads.end()) grads.emplace(in.node_.get(), gin[i]);
      else slot->second = add(slot->second, gin[i]);
    }
  }
  for (size_t i = 0; i < inputs.size(); ++i) {
    auto found = grads.find(inputs[i].node_.get());
    result[i] = found != grads.end() ? found->second : Var(Tensor(inputs[i].shape()));
  }
  return result;
}

Var constant(Tensor value) { return Var(std::move(value), false); }

Var add(const Var& a, const Var& b) {
  check_same(a, b, "add");
  return make_result(map_binary(a.value(), b.value(), [](double x, double y) { return x + y; }),
                     {a, b}, [](const Var& g) { return std::vector<Var>{g, g}; }, "add");
}

Var sub(const Var& a, const Var& b) {
  check_same(a, b, "sub");
  return make_result(map_binary(a.value(), b.value(), [](double x, double y) { return x - y; }),
                     {a, b}, [](const Var& g) { return std::vector<Var>{g, neg(g)}; }, "sub");
}

Var mul(const Var& a, const Var& b) {
  check_same(a, b, "mul");
  return make_result(map_binary(a.value(), b.value(), [](double x, double y) { return x * y; }),
                     {a, b},
                     [a, b](const Var& g) {
                       return std::vector<Var>{a.requires_grad() ? mul(g, b) : Var(),
                                               b.requires_grad() ? mul(g, a) : Var()};
                     },
                     "mul");
}

Var div(const Var& a, const Var& b) {
  check_same(a, b, "div");
  return make_result(map_binary(a.value(), b.value(), [](double x, double y) { return x / y; }),
                     {a, b},
                     [a, b](const Var& g) {
                       Var ga, gb;
                       if (a.requires_grad()) ga = div(g, b);
                       if (b.requires_grad()) gb = neg(div(mul(g, a), mul(b, b)));
                       return std::vector<Var>{ga, gb};
                     },
                     "div");
}

Var neg(const Var& a) {
  return make_result(map_unary(a.value(), [](double x) { return -x; }), {a},
                     [](const Var& g) { return std::vector<Var>{neg(g)}; }, "neg");
}

Var scale(const Var& a, double s) {
  return make_result(map_unary(a.value(), [s](double x) { return s * x; }), {a},
                     [s](const Var& g) { return std::vector<Var>{scale(g, s)}; }, "scale");
}

Var add_scalar(const Var& a, double s) {
  return make_result(map_unary(a.value(), [s](double x) { return x + s; }), {a},
                     [](const Var& g) { return std::vector<Var>{g}; }, "add_scalar");
}

Var mul_const(const Var& a, Tensor c) {
  require_same_shape(a.value(), c, "mul_const");
  Tensor out = map_binary(a.value(), c, [](double x, double y) { return x * y; });
  return make_result(std::move(out), {a},
                     [c = std::move(c)](const Var& g) { return std::vector<Var>{mul_const(g, c)}; },
                     "mul_const");
}

Var add_const(const Var& a, Tensor c) {
  require_same_shape(a.value(), c, "add_const");
  return make_result(map_binary(a.value(), c, [](double x, double y) { return x + y; }), {a},
                     [](const Var& g) { return std::vector<Var>{g}; }, "add_const");
}

Var sigmoid(const Var& a) {
  auto f = [](double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  };
  return make_result(map_unary(a.value(), f), {a},
                     [a](const Var& g) {
                       Var s = sigmoid(a);
                       return std::vector<Var>{mul(g, mul(s, add_scalar(neg(s), 1.0)))};
                     },
                     "sigmoid");
}

Var tanh(const Var& a) {
  return make_result(map_unary(a.value(), [](double x) { return std::tanh(x); }), {a},
                     [a](const Var& g) {
                       Var t = tanh(a);
                       return std::vector<Var>{mul(g, add_scalar(neg(mul(t, t)), 1.0))};
                     },
                     "tanh");
}

Var sqrt(const Var& a) {
  return make_result(map_unary(a.value(), [](double x) { return std::sqrt(x); }), {a},
                     [a](const Var& g) { return std::vector<Var>{div(scale(g, 0.5), sqrt(a))}; },
                     "sqrt");
}

Var leaky_relu(const Var& a, double negative_slope) {
  Tensor slope = map_unary(a.value(), [negative_slope](double x) { return x > 0 ? 1.0 : negative_slope; });
  return mul_const(a, std::move(slope));
}

Var clamp(const Var& a, double lo, double hi) {
  Tensor out = map_unary(a.value(), [lo, hi](double x) { return std::clamp(x, lo, hi); });
  Tensor inside = map_unary(a.value(), [lo, hi](double x) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
  return make_result(std::move(out), {a},
                     [inside = std::move(inside)](const Var& g) {
                       return std::vector<Var>{mul_const(g, inside)};
                     },
                     "clamp");
}

Var ste_round(const Var& a) {
  return make_result(map_unary(a.value(), [](double x) { return std::round(x); }), {a},
                     [](const Var& g) { return std::vector<Var>{g}; }, "ste_round");
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  Shape shape = a.shape();
  return make_result(Tensor::scalar(s), {a},
                     [shape](const Var& g) {
                       Shape ones(shape.size(), 1);
                       return std::vector<Var>{broadcast_to(reshape(g, ones), shape)};
                     },
                     "sum");
}

Var mean(const Var& a) {
  const int64_t n = a.numel();
  if (n == 0) throw std::invalid_argument("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var reshape(const Var& a, Shape shape) {
  Shape original = a.shape();
  return make_result(a.value().reshaped(std::move(shape)), {a},
                     [original](const Var& g) { return std::vector<Var>{reshape(g, original)}; },
                     "reshape");
}

Var broadcast_to(const Var& a, Shape shape) {
  if (a.shape() == shape) return a;
  Shape original = a.shape();
  return make_result(broadcast_tensor(a.value(), shape), {a},
                     [original](const Var& g) { return std::vector<Var>{reduce_to(g, original)}; },
                     "broadcast_to");
}

Var reduce_to(const Var& a, Shape shape) {
  if (a.shape() == shape) return a;
  Shape original = a.shape();
  return make_result(reduce_tensor(a.value(), shape), {a},
                     [original](const Var& g) { return std::vector<Var>{broadcast_to(g, original)}; },
                     "reduce_to");
}

Var matmul(const Var& a, const Var& b, bool ta, bool tb) {
  return make_result(matmul_tensor(a.value(), b.value(), ta, tb), {a, b},
                     [a, b, ta, tb](const Var& g) {
                       Var ga, gb;
                       if (a.requires_grad()) ga = ta ? matmul(b, g, tb, true) : matmul(g, b, false, !tb);
                       if (b.requires_grad()) gb = tb ? matmul(g, a, true, ta) : matmul(a, g, !ta, false);
                       return std::vector<Var>{ga, gb};
                     },
                     "matmul");
}

Var conv2d(const Var& x, const Var& w, int stride, int pad) {
  return make_result(conv_forward(x.value(), w.value(), stride, pad), {x, w},
                     [x, w, stride, pad](const Var& g) {
                       Var gx, gw;
                       if (x.requires_grad()) gx = conv2d_input_grad(g, w, x.shape(), stride, pad);
                       if (w.requires_grad()) gw = conv2d_weight_grad(x, g, w.shape(), stride, pad);
                       return std::vector<Var>{gx, gw};
                     },
                     "conv2d");
}

Var conv2d_input_grad(const Var& g, const Var& w, const Shape& x_shape, int stride, int pad) {
  return make_result(conv_input_grad_tensor(g.value(), w.value(), x_shape, stride, pad), {g, w},
                     [g, w, stride, pad](const Var& h) {
                       Var gg, gw;
                       if (g.requires_grad()) gg = conv2d(h, w, stride, pad);
                       if (w.requires_grad()) gw = conv2d_weight_grad(h, g, w.shape(), stride, pad);
                       return std::vector<Var>{gg, gw};
                     },
                     "conv2d_input_grad");
}

Var conv2d_weight_grad(const Var& x, const Var& g, const Shape& w_shape, int stride, int pad) {
  return make_result(conv_weight_grad_tensor(x.value(), g.value(), w_shape, stride, pad), {x, g},
                     [x, g, stride, pad](const Var& h) {
                       Var gx, gg;
                       if (x.requires_grad()) gx = conv2d_input_grad(g, h, x.shape(), stride, pad);
                       if (g.requires_grad()) gg = conv2d(x, h, stride, pad);
                       return std::vector<Var>{gx, gg};
                     },
                     "conv2d_weight_grad");
}

Var linear_map(const Var& x, std::shared_ptr<const LinearMap> op, bool use_adjoint) {
  const Shape expected = use_adjoint ? op->out_shape() : op->in_shape();
  if (x.shape() != expected) {
    throw std::invalid_argument("linear_map: input shape " + shape_str(x.shape()) + ", expected " +
                                shape_str(expected));
  }
  Tensor out = use_adjoint ? op->adjoint(x.value()) : op->forward(x.value());
  return make_result(std::move(out), {x},
                     [op, use_adjoint](const Var& g) {
                       return std::vector<Var>{linear_map(g, op, !use_adjoint)};
                     },
                     "linear_map");
}

}  // namespace metafc::ad
