#include "metafc/image_ops.hpp"

#include <Eigen/Core>

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace metafc::image_ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap view(const Matrix& m) { return ConstMap(m.values.data(), m.rows, m.cols); }

void require_rank4(const Shape& s, const char* what) {
  if (s.size() != 4) throw std::invalid_argument(std::string(what) + ": expected [B,C,H,W], got " + shape_str(s));
}

void require_shape(const Tensor& t, const Shape& s, const char* what) {
  if (t.shape() != s) {
    throw std::invalid_argument(std::string(what) + ": expected " + shape_str(s) + ", got " + shape_str(t.shape()));
  }
}

}  // namespace

int64_t reflect_index(int64_t i, int64_t n) {
  if (n <= 1) return 0;
  const int64_t period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

Matrix Matrix::transposed() const {
  Matrix t(cols, rows);
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < cols; ++c) t(c, r) = (*this)(r, c);
  return t;
}

Matrix Matrix::operator*(const Matrix& rhs) const {
  if (cols != rhs.rows) throw std::invalid_argument("matrix product: inner dimension mismatch");
  Matrix out(rows, rhs.cols);
  MutMap(out.values.data(), rows, rhs.cols).noalias() = view(*this) * view(rhs);
  return out;
}

Matrix gaussian_blur_matrix(int64_t n, double sigma) {
  Matrix m(n, n);
  if (sigma <= 0.0) {
    for (int64_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }
  const int64_t radius = static_cast<int64_t>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(static_cast<size_t>(2 * radius + 1));
  double total = 0.0;
  for (int64_t t = -radius; t <= radius; ++t) {
    const double v = std::exp(-static_cast<double>(t * t) / (2.0 * sigma * sigma));
    kernel[static_cast<size_t>(t + radius)] = v;
    total += v;
  }
  for (auto& v : kernel) v /= total;
  for (int64_t i = 0; i < n; ++i)
    for (int64_t t = -radius; t <= radius; ++t) m(i, reflect_index(i + t, n)) += kernel[static_cast<size_t>(t + radius)];
  return m;
}

Matrix block_dct_matrix(int64_t n) {
  if (n % 8 != 0) throw std::invalid_argument("block_dct_matrix: length must be divisible by 8");
  Matrix m(n, n);
  for (int64_t block = 0; block < n; block += 8) {
    for (int64_t u = 0; u < 8; ++u) {
      const double alpha = u == 0 ? std::sqrt(1.0 / 8.0) : 0.5;
      for (int64_t x = 0; x < 8; ++x) {
        m(block + u, block + x) = alpha * std::cos((2.0 * static_cast<double>(x) + 1.0) *
                                                   static_cast<double>(u) * std::numbers::pi / 16.0);
      }
    }
  }
  return m;
}

Matrix reflect_pad_matrix(int64_t n, int64_t m) {
  Matrix p(m, n);
  for (int64_t i = 0; i < m; ++i) p(i, reflect_index(i, n)) = 1.0;
  return p;
}

Matrix crop_matrix(int64_t n, int64_t m) {
  Matrix c(n, m);
  for (int64_t i = 0; i < n; ++i) c(i, i) = 1.0;
  return c;
}

SeparableMap::SeparableMap(Shape in_shape, Matrix mh, Matrix mw)
    : in_shape_(std::move(in_shape)), mh_(std::move(mh)), mw_(std::move(mw)) {
  require_rank4(in_shape_, "SeparableMap");
  if (mh_.cols != in_shape_[2] || mw_.cols != in_shape_[3]) {
    throw std::invalid_argument("SeparableMap: operator extents do not match input " + shape_str(in_shape_));
  }
  out_shape_ = {in_shape_[0], in_shape_[1], mh_.rows, mw_.rows};
}

Tensor SeparableMap::forward(const Tensor& x) const {
  require_shape(x, in_shape_, "SeparableMap::forward");
  Tensor y(out_shape_);
  const int64_t planes = in_shape_[0] * in_shape_[1];
  const int64_t hi = in_shape_[2], wi = in_shape_[3], ho = out_shape_[2], wo = out_shape_[3];
  RowMat tmp(ho, wi);
  for (int64_t p = 0; p < planes; ++p) {
    tmp.noalias() = view(mh_) * ConstMap(x.ptr() + p * hi * wi, hi, wi);
    MutMap(y.ptr() + p * ho * wo, ho, wo).noalias() = tmp * view(mw_).transpose();
  }
  return y;
}

Tensor SeparableMap::adjoint(const Tensor& y) const {
  require_shape(y, out_shape_, "SeparableMap::adjoint");
  Tensor x(in_shape_);
  const int64_t planes = in_shape_[0] * in_shape_[1];
  const int64_t hi = in_shape_[2], wi = in_shape_[3], ho = out_shape_[2], wo = out_shape_[3];
  RowMat tmp(hi, wo);
  for (int64_t p = 0; p < planes; ++p) {
    tmp.noalias() = view(mh_).transpose() * ConstMap(y.ptr() + p * ho * wo, ho, wo);
    MutMap(x.ptr() + p * hi * wi, hi, wi).noalias() = tmp * view(mw_);
  }
  return x;
}

ChannelMixMap::ChannelMixMap(Shape in_shape, Matrix mix) : in_shape_(std::move(in_shape)), mix_(std::move(mix)) {
  require_rank4(in_shape_, "ChannelMixMap");
  if (mix_.cols != in_shape_[1]) throw std::invalid_argument("ChannelMixMap: channel count mismatch");
  out_shape_ = {in_shape_[0], mix_.rows, in_shape_[2], in_shape_[3]};
}

Tensor ChannelMixMap::forward(const Tensor& x) const {
  require_shape(x, in_shape_, "ChannelMixMap::forward");
  Tensor y(out_shape_);
  const int64_t hw = in_shape_[2] * in_shape_[3];
  for (int64_t b = 0; b < in_shape_[0]; ++b) {
    MutMap(y.ptr() + b * mix_.rows * hw, mix_.rows, hw).noalias() =
        view(mix_) * ConstMap(x.ptr() + b * mix_.cols * hw, mix_.cols, hw);
  }
  return y;
}

Tensor ChannelMixMap::adjoint(const Tensor& y) const {
  require_shape(y, out_shape_, "ChannelMixMap::adjoint");
  Tensor x(in_shape_);
  const int64_t hw = in_shape_[2] * in_shape_[3];
  for (int64_t b = 0; b < in_shape_[0]; ++b) {
    MutMap(x.ptr() + b * mix_.cols * hw, mix_.cols, hw).noalias() =
        view(mix_).transpose() * ConstMap(y.ptr() + b * mix_.rows * hw, mix_.rows, hw);
  }
  return x;
}

GatherMap::GatherMap(Shape shape, std::vector<int64_t> index) : shape_(std::move(shape)), index_(std::move(index)) {
  if (static_cast<int64_t>(index_.size()) != shape_numel(shape_)) {
    throw std::invalid_argument("GatherMap: index size does not match shape");
  }
}

Tensor GatherMap::forward(const Tensor& x) const {
  require_shape(x, shape_, "GatherMap::forward");
  Tensor y(shape_);
  for (size_t i = 0; i < index_.size(); ++i) y[static_cast<int64_t>(i)] = x[index_[i]];
  return y;
}

Tensor GatherMap::adjoint(const Tensor& y) const {
  require_shape(y, shape_, "GatherMap::adjoint");
  Tensor x(shape_);
  for (size_t i = 0; i < index_.size(); ++i) x[index_[i]] += y[static_cast<int64_t>(i)];
  return x;
}

ContrastMap::ContrastMap(Shape shape, std::vector<double> factors) : shape_(std::move(shape)), factors_(std::move(factors)) {
  require_rank4(shape_, "ContrastMap");
  if (static_cast<int64_t>(factors_.size()) != shape_[0]) throw std::invalid_argument("ContrastMap: one factor per image");
}

Tensor ContrastMap::forward(const Tensor& x) const {
  require_shape(x, shape_, "ContrastMap::forward");
  Tensor y(shape_);
  const int64_t per = shape_[1] * shape_[2] * shape_[3];
  for (int64_t b = 0; b < shape_[0]; ++b) {
    const double* src = x.ptr() + b * per;
    double* dst = y.ptr() + b * per;
    double mean = 0.0;
    for (int64_t i = 0; i < per; ++i) mean += src[i];
    mean /= static_cast<double>(per);
    const double f = factors_[static_cast<size_t>(b)];
    for (int64_t i = 0; i < per; ++i) dst[i] = f * src[i] + (1.0 - f) * mean;
  }
  return y;
}

UpsampleMap::UpsampleMap(Shape in_shape, int64_t factor) : in_shape_(std::move(in_shape)), factor_(factor) {
  require_rank4(in_shape_, "UpsampleMap");
  if (factor_ < 1) throw std::invalid_argument("UpsampleMap: factor must be >= 1");
  out_shape_ = {in_shape_[0], in_shape_[1], in_shape_[2] * factor_, in_shape_[3] * factor_};
}

Tensor UpsampleMap::forward(const Tensor& x) const {
  require_shape(x, in_shape_, "UpsampleMap::forward");
  Tensor y(out_shape_);
  const int64_t planes = in_shape_[0] * in_shape_[1];
  const int64_t hi = in_shape_[2], wi = in_shape_[3], ho = out_shape_[2], wo = out_shape_[3];
  for (int64_t p = 0; p < planes; ++p)
    for (int64_t h = 0; h < ho; ++h)
      for (int64_t w = 0; w < wo; ++w) y[(p * ho + h) * wo + w] = x[(p * hi + h / factor_) * wi + w / factor_];
  return y;
}

Tensor UpsampleMap::adjoint(const Tensor& y) const {
  require_shape(y, out_shape_, "UpsampleMap::adjoint");
  Tensor x(in_shape_);
  const int64_t planes = in_shape_[0] * in_shape_[1];
  const int64_t hi = in_shape_[2], wi = in_shape_[3], ho = out_shape_[2], wo = out_shape_[3];
  for (int64_t p = 0; p < planes; ++p)
    for (int64_t h = 0; h < ho; ++h)
      for (int64_t w = 0; w < wo; ++w) x[(p * hi + h / factor_) * wi + w / factor_] += y[(p * ho + h) * wo + w];
  return x;
}

}  // namespace metafc::image_ops
