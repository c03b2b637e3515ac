#pragma once

// Fixed linear operators on [B, C, H, W] image tensors, used to build
// differentiable distortions on top of ad::linear_map.

#include <memory>
#include <vector>

#include "metafc/autograd.hpp"

namespace metafc::image_ops {

// Index into [0, n) after mirroring about the edges without repeating them
// (…2 1 | 0 1 2 … n-1 | n-2 …), folding any overshoot.
int64_t reflect_index(int64_t i, int64_t n);

// Row-major dense matrix with explicit extents.
struct Matrix {
  int64_t rows = 0;
  int64_t cols = 0;
  std::vector<double> values;

  Matrix() = default;
  Matrix(int64_t r, int64_t c) : rows(r), cols(c), values(static_cast<size_t>(r * c), 0.0) {}
  double& operator()(int64_t r, int64_t c) { return values[static_cast<size_t>(r * cols + c)]; }
  double operator()(int64_t r, int64_t c) const { return values[static_cast<size_t>(r * cols + c)]; }
  Matrix transposed() const;
  Matrix operator*(const Matrix& rhs) const;
};

// n x n convolution with a normalized Gaussian (half-width ceil(3 sigma)) under reflect padding.
Matrix gaussian_blur_matrix(int64_t n, double sigma);
// Orthonormal 8x8 block DCT-II along an axis of length n (n divisible by 8).
Matrix block_dct_matrix(int64_t n);
// Reflect-pads length n up to m >= n.
Matrix reflect_pad_matrix(int64_t n, int64_t m);
// Keeps the first n of m entries.
Matrix crop_matrix(int64_t n, int64_t m);

// Y[b,c] = Mh * X[b,c] * Mw^T.
class SeparableMap : public ad::LinearMap {
 public:
  SeparableMap(Shape in_shape, Matrix mh, Matrix mw);
  Shape in_shape() const override { return in_shape_; }
  Shape out_shape() const override { return out_shape_; }
  Tensor forward(const Tensor& x) const override;
  Tensor adjoint(const Tensor& y) const override;

 private:
  Shape in_shape_, out_shape_;
  Matrix mh_, mw_;
};

// Per-pixel channel mixing: Y[b,:,h,w] = M * X[b,:,h,w].
class ChannelMixMap : public ad::LinearMap {
 public:
  ChannelMixMap(Shape in_shape, Matrix mix);
  Shape in_shape() const override { return in_shape_; }
  Shape out_shape() const override { return out_shape_; }
  Tensor forward(const Tensor& x) const override;
  Tensor adjoint(const Tensor& y) const override;

 private:
  Shape in_shape_, out_shape_;
  Matrix mix_;
};

// Y[i] = X[index[i]]; the adjoint scatters.
class GatherMap : public ad::LinearMap {
 public:
  GatherMap(Shape shape, std::vector<int64_t> index);
  Shape in_shape() const override { return shape_; }
  Shape out_shape() const override { return shape_; }
  Tensor forward(const Tensor& x) const override;
  Tensor adjoint(const Tensor& y) const override;

 private:
  Shape shape_;
  std::vector<int64_t> index_;
};

// Per image: Y = f[b] * X + (1 - f[b]) * mean(X[b]). Self-adjoint.
class ContrastMap : public ad::LinearMap {
 public:
  ContrastMap(Shape shape, std::vector<double> factors);
  Shape in_shape() const override { return shape_; }
  Shape out_shape() const override { return shape_; }
  Tensor forward(const Tensor& x) const override;
  Tensor adjoint(const Tensor& y) const override { return forward(y); }

 private:
  Shape shape_;
  std::vector<double> factors_;
};

// Nearest-neighbour upsampling by an integer factor.
class UpsampleMap : public ad::LinearMap {
 public:
  UpsampleMap(Shape in_shape, int64_t factor);
  Shape in_shape() const override { return in_shape_; }
  Shape out_shape() const override { return out_shape_; }
  Tensor forward(const Tensor& x) const override;
  Tensor adjoint(const Tensor& y) const override;

 private:
  Shape in_shape_, out_shape_;
  int64_t factor_;
};

}  // namespace metafc::image_ops
