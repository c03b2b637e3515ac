#pragma once

// The distortion pool: parameterized, seedable image transforms with a
// declared gradient behaviour, task sampling and sequential composition.

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "metafc/autograd.hpp"
#include "metafc/data.hpp"

namespace metafc::noise {

enum class DistortionKind {
  Identity,
  GaussianBlur,
  MedianBlur,
  GaussianNoise,
  SaltPepper,
  Crop,
  Cropout,
  Dropout,
  Jpeg,
  Brightness,
  Contrast,
  Saturation,
  Erasing,
  Composite,
};

enum class Differentiability { Smooth, StraightThrough, MaskPassThrough };

// Parameter names: "sigma" (std, or a probability/area fraction for
// SaltPepper/Erasing), "w" (odd window), "p" (severity fraction),
// "q" (JPEG quality), "f" (factor) or "f_lo"/"f_hi" (factor range).
class DistortionSpec {
 public:
  // Validates the parameter set against the kind; throws std::invalid_argument
  // naming the offending parameter.
  DistortionSpec(DistortionKind kind, std::map<std::string, double> params);

  static DistortionSpec identity() { return {DistortionKind::Identity, {}}; }
  static DistortionSpec gaussian_blur(double sigma) { return {DistortionKind::GaussianBlur, {{"sigma", sigma}}}; }
  static DistortionSpec median_blur(int window) { return {DistortionKind::MedianBlur, {{"w", window}}}; }
  static DistortionSpec gaussian_noise(double sigma) { return {DistortionKind::GaussianNoise, {{"sigma", sigma}}}; }
  static DistortionSpec salt_pepper(double amount) { return {DistortionKind::SaltPepper, {{"sigma", amount}}}; }
  static DistortionSpec crop(double p) { return {DistortionKind::Crop, {{"p", p}}}; }
  static DistortionSpec cropout(double p) { return {DistortionKind::Cropout, {{"p", p}}}; }
  static DistortionSpec dropout(double p) { return {DistortionKind::Dropout, {{"p", p}}}; }
  static DistortionSpec jpeg(double quality) { return {DistortionKind::Jpeg, {{"q", quality}}}; }
  static DistortionSpec brightness(double f) { return {DistortionKind::Brightness, {{"f", f}}}; }
  static DistortionSpec brightness_range(double lo, double hi) {
    return {DistortionKind::Brightness, {{"f_lo", lo}, {"f_hi", hi}}};
  }
  static DistortionSpec contrast(double f) { return {DistortionKind::Contrast, {{"f", f}}}; }
  static DistortionSpec saturation(double f) { return {DistortionKind::Saturation, {{"f", f}}}; }
  static DistortionSpec erasing(double area) { return {DistortionKind::Erasing, {{"sigma", area}}}; }

  DistortionKind kind() const { return kind_; }
  const std::map<std::string, double>& params() const { return params_; }
  double param(const std::string& name) const;
  const std::vector<DistortionSpec>& members() const { return members_; }
  Differentiability differentiable() const;

  // Canonical config string, e.g. "jpeg:q=30" or "compose:[mb:w=5|jpeg:q=50]".
  std::string name() const;
  // Short table label, e.g. "JPEG(Q=30)" or "MB&JPEG".
  std::string label() const;

  friend bool operator==(const DistortionSpec& a, const DistortionSpec& b) { return a.name() == b.name(); }

 private:
  friend DistortionSpec compose(const std::vector<DistortionSpec>& specs);
  DistortionSpec() = default;

  DistortionKind kind_ = DistortionKind::Identity;
  std::map<std::string, double> params_;
  std::vector<DistortionSpec> members_;
};

// Parses `kind:param=value[,param=value]` or `compose:[a|b|...]`.
DistortionSpec parse_spec(std::string_view text);

class NoisePool {
 public:
  explicit NoisePool(std::vector<DistortionSpec> specs);
  const std::vector<DistortionSpec>& specs() const { return specs_; }
  size_t size() const { return specs_.size(); }
  // Number of meta-train distortions per task (pool size - 1).
  size_t meta_train_count() const { return specs_.size() - 1; }

 private:
  std::vector<DistortionSpec> specs_;
};

struct TaskSplit {
  std::vector<DistortionSpec> meta_train;
  DistortionSpec meta_test = DistortionSpec::identity();
  size_t meta_test_index = 0;  // position in the pool
};

// Uniformly chosen held-out spec; the others, in pool order, are meta-train.
TaskSplit sample_task(const NoisePool& pool, uint64_t seed);

// Left-to-right sequential application; member i runs with derive_seed(seed, i).
DistortionSpec compose(const std::vector<DistortionSpec>& specs);

// Differentiable application to a watermarked batch. `cover` supplies the
// replacement pixels for Cropout/Dropout. Image b draws its randomness from
// derive_seed(seed, b).
ad::Var apply(const DistortionSpec& spec, const ad::Var& watermarked, const Tensor& cover, uint64_t seed);

// Value-only convenience wrapper.
data::ImageBatch apply(const DistortionSpec& spec, const data::ImageBatch& watermarked,
                       const data::ImageBatch& cover, uint64_t seed);

// JPEG simulation: YCbCr, 8x8 DCT, quality-scaled standard tables,
// straight-through rounding, inverse path, clamp to [0,1].
ad::Var jpeg_forward(const ad::Var& image, double quality);

// Standard luminance/chrominance tables scaled for `quality` (IJG scaling).
std::vector<int> jpeg_quant_table(double quality, bool chroma);

}  // namespace metafc::noise
