#include "metafc/noisepool.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>

#include "metafc/image_ops.hpp"
#include "metafc/rng.hpp"

namespace metafc::noise {

namespace {

using ad::Var;
using image_ops::Matrix;

struct KindInfo {
  DistortionKind kind;
  const char* key;
  const char* abbrev;
};

constexpr KindInfo kKinds[] = {
    {DistortionKind::Identity, "identity", "Identity"},
    {DistortionKind::GaussianBlur, "gb", "GB"},
    {DistortionKind::MedianBlur, "mb", "MB"},
    {DistortionKind::GaussianNoise, "gn", "GN"},
    {DistortionKind::SaltPepper, "spn", "SPN"},
    {DistortionKind::Crop, "crop", "Crop"},
    {DistortionKind::Cropout, "cropout", "Cropout"},
    {DistortionKind::Dropout, "dropout", "Dropout"},
    {DistortionKind::Jpeg, "jpeg", "JPEG"},
    {DistortionKind::Brightness, "brightness", "Brightness"},
    {DistortionKind::Contrast, "contrast", "Contrast"},
    {DistortionKind::Saturation, "saturation", "Saturation"},
    {DistortionKind::Erasing, "erasing", "Erasing"},
    {DistortionKind::Composite, "compose", "Compose"},
};

const KindInfo& info(DistortionKind kind) {
  for (const auto& k : kKinds)
    if (k.kind == kind) return k;
  throw std::logic_error("unknown distortion kind");
}

std::string format_number(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

[[noreturn]] void bad_param(DistortionKind kind, const std::string& name, const std::string& why) {
  throw std::invalid_argument(std::string(info(kind).key) + ": parameter '" + name + "' " + why);
}

void require_keys(DistortionKind kind, const std::map<std::string, double>& params, std::set<std::string> keys) {
  for (const auto& [k, v] : params) {
    if (!keys.count(k)) bad_param(kind, k, "is not accepted");
    if (!std::isfinite(v)) bad_param(kind, k, "must be finite");
  }
  for (const auto& k : keys)
    if (!params.count(k)) bad_param(kind, k, "is required");
}

void require_range(DistortionKind kind, const std::map<std::string, double>& params, const std::string& key, double lo,
                   double hi) {
  const double v = params.at(key);
  if (v < lo || v > hi) bad_param(kind, key, "= " + format_number(v) + " is outside [" + format_number(lo) + ", " + format_number(hi) + "]");
}

struct Rect {
  int64_t top = 0, left = 0, height = 0, width = 0;
  bool contains(int64_t y, int64_t x) const { return y >= top && y < top + height && x >= left && x < left + width; }
};

// Axis-aligned rectangle covering `fraction` of the area at a uniform position.
Rect random_rect(Rng& rng, int64_t h, int64_t w, double fraction) {
  const double side = std::sqrt(std::clamp(fraction, 0.0, 1.0));
  Rect r;
  r.height = std::clamp<int64_t>(std::llround(static_cast<double>(h) * side), 0, h);
  r.width = std::clamp<int64_t>(std::llround(static_cast<double>(w) * side), 0, w);
  r.top = static_cast<int64_t>(rng.below(static_cast<uint64_t>(h - r.height + 1)));
  r.left = static_cast<int64_t>(rng.below(static_cast<uint64_t>(w - r.width + 1)));
  return r;
}

struct Dims {
  int64_t b, c, h, w;
  int64_t plane() const { return h * w; }
  int64_t image() const { return c * h * w; }
};

Dims dims_of(const Shape& s) { return {s[0], s[1], s[2], s[3]}; }

Rng image_rng(uint64_t seed, int64_t b) { return Rng(derive_seed(seed, static_cast<uint64_t>(b))); }

// out = keep * x + (1 - keep) * fill, gradient passes only where keep = 1.
Var masked_replace(const Var& x, const Tensor& keep, const Tensor& fill) {
  Tensor offset(x.shape());
  for (int64_t i = 0; i < offset.numel(); ++i) offset[i] = (1.0 - keep[i]) * fill[i];
  return ad::add_const(ad::mul_const(x, keep), std::move(offset));
}

Var apply_gaussian_blur(const Var& x, double sigma) {
  if (sigma <= 0.0) return x;
  const Dims d = dims_of(x.shape());
  auto op = std::make_shared<image_ops::SeparableMap>(x.shape(), image_ops::gaussian_blur_matrix(d.h, sigma),
                                                      image_ops::gaussian_blur_matrix(d.w, sigma));
  return ad::clamp(ad::linear_map(x, op), 0.0, 1.0);
}

Var apply_median_blur(const Var& x, int64_t window) {
  if (window <= 1) return x;
  const Dims d = dims_of(x.shape());
  const Tensor& v = x.value();
  const int64_t r = window / 2;
  std::vector<int64_t> index(static_cast<size_t>(v.numel()));
  std::vector<int64_t> candidates(static_cast<size_t>(window * window));
  const auto mid = candidates.begin() + static_cast<std::ptrdiff_t>(candidates.size() / 2);
  for (int64_t p = 0; p < d.b * d.c; ++p) {
    const int64_t base = p * d.plane();
    for (int64_t y = 0; y < d.h; ++y) {
      for (int64_t xx = 0; xx < d.w; ++xx) {
        size_t k = 0;
        for (int64_t dy = -r; dy <= r; ++dy)
          for (int64_t dx = -r; dx <= r; ++dx)
            candidates[k++] = base + image_ops::reflect_index(y + dy, d.h) * d.w + image_ops::reflect_index(xx + dx, d.w);
        std::nth_element(candidates.begin(), mid, candidates.end(), [&](int64_t a, int64_t b) {
          return v[a] != v[b] ? v[a] < v[b] : a < b;
        });
        index[static_cast<size_t>(base + y * d.w + xx)] = *mid;
      }
    }
  }
  auto op = std::make_shared<image_ops::GatherMap>(x.shape(), std::move(index));
  return ad::linear_map(x, op);
}

Var apply_gaussian_noise(const Var& x, double sigma, uint64_t seed) {
  if (sigma <= 0.0) return x;
  const Dims d = dims_of(x.shape());
  Tensor noise(x.shape());
  for (int64_t b = 0; b < d.b; ++b) {
    Rng rng = image_rng(seed, b);
    double* dst = noise.ptr() + b * d.image();
    for (int64_t i = 0; i < d.image(); ++i) dst[i] = sigma * rng.normal();
  }
  return ad::clamp(ad::add_const(x, std::move(noise)), 0.0, 1.0);
}

// Per-pixel (all channels) replacement, decided by `pick(rng)`.
template <class Pick>
Var apply_pixel_replace(const Var& x, const Tensor& fill_source, uint64_t seed, Pick pick) {
  const Dims d = dims_of(x.shape());
  Tensor keep(x.shape(), 1.0), fill(x.shape());
  for (int64_t b = 0; b < d.b; ++b) {
    Rng rng = image_rng(seed, b);
    for (int64_t i = 0; i < d.plane(); ++i) {
      double value = 0.0;
      if (!pick(rng, b, i, value)) continue;
      for (int64_t c = 0; c < d.c; ++c) {
        const int64_t at = b * d.image() + c * d.plane() + i;
        keep[at] = 0.0;
        fill[at] = value < 0 ? fill_source[at] : value;
      }
    }
  }
  return masked_replace(x, keep, fill);
}

Var apply_salt_pepper(const Var& x, double amount, uint64_t seed) {
  if (amount <= 0.0) return x;
  return apply_pixel_replace(x, x.value(), seed, [amount](Rng& rng, int64_t, int64_t, double& value) {
    if (!rng.bernoulli(amount)) return false;
    value = rng.bernoulli(0.5) ? 1.0 : 0.0;
    return true;
  });
}

Var apply_dropout(const Var& x, const Tensor& cover, double p, uint64_t seed) {
  if (p <= 0.0) return x;
  return apply_pixel_replace(x, cover, seed, [p](Rng& rng, int64_t, int64_t, double& value) {
    value = -1.0;  // take the cover pixel
    return rng.bernoulli(p);
  });
}

// Keeps (inside) or replaces (outside) a random rectangle per image.
Var apply_rect(const Var& x, const Tensor& fill_source, double fraction, bool keep_inside, uint64_t seed) {
  const Dims d = dims_of(x.shape());
  Tensor keep(x.shape(), 1.0), fill(x.shape());
  for (int64_t b = 0; b < d.b; ++b) {
    Rng rng = image_rng(seed, b);
    const Rect rect = random_rect(rng, d.h, d.w, fraction);
    for (int64_t c = 0; c < d.c; ++c)
      for (int64_t y = 0; y < d.h; ++y)
        for (int64_t xx = 0; xx < d.w; ++xx) {
          if (rect.contains(y, xx) == keep_inside) continue;
          const int64_t at = b * d.image() + c * d.plane() + y * d.w + xx;
          keep[at] = 0.0;
          fill[at] = fill_source.defined() ? fill_source[at] : 0.0;
        }
  }
  return masked_replace(x, keep, fill);
}

Var apply_brightness(const Var& x, const DistortionSpec& spec, uint64_t seed) {
  const Dims d = dims_of(x.shape());
  Tensor factor(x.shape());
  const bool ranged = spec.params().count("f_lo") > 0;
  for (int64_t b = 0; b < d.b; ++b) {
    double f;
    if (ranged) {
      Rng rng = image_rng(seed, b);
      f = rng.uniform(spec.param("f_lo"), spec.param("f_hi"));
    } else {
      f = spec.param("f");
    }
    std::fill(factor.ptr() + b * d.image(), factor.ptr() + (b + 1) * d.image(), f);
  }
  return ad::clamp(ad::mul_const(x, std::move(factor)), 0.0, 1.0);
}

Var apply_contrast(const Var& x, double f) {
  auto op = std::make_shared<image_ops::ContrastMap>(x.shape(), std::vector<double>(static_cast<size_t>(x.shape()[0]), f));
  return ad::clamp(ad::linear_map(x, op), 0.0, 1.0);
}

Var apply_saturation(const Var& x, double f) {
  const Dims d = dims_of(x.shape());
  if (d.c != 3) return x;
  const double luma[3] = {0.299, 0.587, 0.114};
  Matrix mix(3, 3);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) mix(r, c) = (1.0 - f) * luma[c] + (r == c ? f : 0.0);
  auto op = std::make_shared<image_ops::ChannelMixMap>(x.shape(), std::move(mix));
  return ad::clamp(ad::linear_map(x, op), 0.0, 1.0);
}

constexpr int kLumaTable[64] = {16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,
                                14, 13, 16, 24, 40,  57,  69,  56,  14, 17, 22, 29, 51,  87,  80,  62,
                                18, 22, 37, 56, 68,  109, 103, 77,  24, 35, 55, 64, 81,  104, 113, 92,
                                49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};
constexpr int kChromaTable[64] = {17, 18, 24, 47, 99, 99, 99, 99, 18, 21, 26, 66, 99, 99, 99, 99,
                                  24, 26, 56, 99, 99, 99, 99, 99, 47, 66, 99, 99, 99, 99, 99, 99,
                                  99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
                                  99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99};

Matrix rgb_to_ycc() {
  Matrix m(3, 3);
  const double v[9] = {0.299, 0.587, 0.114, -0.168736, -0.331264, 0.5, 0.5, -0.418688, -0.081312};
  std::copy(v, v + 9, m.values.begin());
  return m;
}

Matrix inverse3(const Matrix& m) {
  Eigen::Matrix3d e;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) e(r, c) = m(r, c);
  Eigen::Matrix3d inv = e.inverse();
  Matrix out(3, 3);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) out(r, c) = inv(r, c);
  return out;
}

Var apply_composite(const DistortionSpec& spec, const Var& x, const Tensor& cover, uint64_t seed) {
  Var out = x;
  for (size_t i = 0; i < spec.members().size(); ++i) out = apply(spec.members()[i], out, cover, derive_seed(seed, static_cast<uint64_t>(i)));
  return out;
}

}  // namespace

DistortionSpec::DistortionSpec(DistortionKind kind, std::map<std::string, double> params)
    : kind_(kind), params_(std::move(params)) {
  switch (kind_) {
    case DistortionKind::Identity:
      require_keys(kind_, params_, {});
      break;
    case DistortionKind::GaussianBlur:
    case DistortionKind::GaussianNoise:
      require_keys(kind_, params_, {"sigma"});
      require_range(kind_, params_, "sigma", 0.0, 1e6);
      break;
    case DistortionKind::SaltPepper:
    case DistortionKind::Erasing:
      require_keys(kind_, params_, {"sigma"});
      require_range(kind_, params_, "sigma", 0.0, 1.0);
      break;
    case DistortionKind::MedianBlur: {
      require_keys(kind_, params_, {"w"});
      const double w = params_.at("w");
      if (w < 1 || w != std::floor(w) || static_cast<int64_t>(w) % 2 == 0) bad_param(kind_, "w", "must be an odd integer >= 1");
      break;
    }
    case DistortionKind::Crop:
    case DistortionKind::Cropout:
    case DistortionKind::Dropout:
      require_keys(kind_, params_, {"p"});
      require_range(kind_, params_, "p", 0.0, 1.0);
      break;
    case DistortionKind::Jpeg:
      require_keys(kind_, params_, {"q"});
      require_range(kind_, params_, "q", 1.0, 100.0);
      break;
    case DistortionKind::Brightness:
      if (params_.count("f_lo") || params_.count("f_hi")) {
        require_keys(kind_, params_, {"f_lo", "f_hi"});
        if (params_.at("f_lo") <= 0) bad_param(kind_, "f_lo", "must be > 0");
        if (params_.at("f_hi") < params_.at("f_lo")) bad_param(kind_, "f_hi", "must be >= f_lo");
        break;
      }
      [[fallthrough]];
    case DistortionKind::Contrast:
    case DistortionKind::Saturation:
      require_keys(kind_, params_, {"f"});
      if (params_.at("f") <= 0) bad_param(kind_, "f", "must be > 0");
      break;
    case DistortionKind::Composite:
      throw std::invalid_argument("composite distortions are built with compose()");
  }
}

double DistortionSpec::param(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range(std::string(info(kind_).key) + " has no parameter '" + name + "'");
  return it->second;
}

Differentiability DistortionSpec::differentiable() const {
  switch (kind_) {
    case DistortionKind::Jpeg:
      return Differentiability::StraightThrough;
    case DistortionKind::MedianBlur:
    case DistortionKind::SaltPepper:
    case DistortionKind::Crop:
    case DistortionKind::Cropout:
    case DistortionKind::Dropout:
    case DistortionKind::Erasing:
      return Differentiability::MaskPassThrough;
    case DistortionKind::Composite: {
      auto result = Differentiability::Smooth;
      for (const auto& m : members_) {
        const auto d = m.differentiable();
        if (d == Differentiability::StraightThrough) return d;
        if (d == Differentiability::MaskPassThrough) result = d;
      }
      return result;
    }
    default:
      return Differentiability::Smooth;
  }
}

std::string DistortionSpec::name() const {
  std::string out = info(kind_).key;
  if (kind_ == DistortionKind::Composite) {
    out += ":[";
    for (size_t i = 0; i < members_.size(); ++i) out += (i ? "|" : "") + members_[i].name();
    return out + "]";
  }
  bool first = true;
  for (const auto& [k, v] : params_) {
    out += (first ? ":" : ",") + k + "=" + format_number(v);
    first = false;
  }
  return out;
}

std::string DistortionSpec::label() const {
  if (kind_ == DistortionKind::Composite) {
    std::string out;
    for (size_t i = 0; i < members_.size(); ++i) out += (i ? "&" : "") + std::string(info(members_[i].kind_).abbrev);
    return out;
  }
  std::string out = info(kind_).abbrev;
  if (params_.empty()) return out;
  if (params_.count("f_lo")) return out + "(f=" + format_number(params_.at("f_lo")) + "~" + format_number(params_.at("f_hi")) + ")";
  const auto& [k, v] = *params_.begin();
  return out + "(" + (k == "q" ? std::string("Q") : k) + "=" + format_number(v) + ")";
}

DistortionSpec parse_spec(std::string_view text) {
  const std::string s = trim(text);
  if (s.empty()) throw std::invalid_argument("empty distortion spec");
  const auto colon = s.find(':');
  const std::string kind_key = lower(trim(std::string_view(s).substr(0, colon)));
  const std::string rest = colon == std::string::npos ? std::string() : trim(std::string_view(s).substr(colon + 1));

  if (kind_key == "compose") {
    if (rest.size() < 2 || rest.front() != '[' || rest.back() != ']') {
      throw std::invalid_argument("compose spec must look like compose:[a|b]: '" + s + "'");
    }
    std::vector<DistortionSpec> members;
    std::string current;
    int depth = 0;
    for (char c : std::string_view(rest).substr(1, rest.size() - 2)) {
      if (c == '[') ++depth;
      if (c == ']') --depth;
      if (c == '|' && depth == 0) {
        members.push_back(parse_spec(current));
        current.clear();
      } else {
        current.push_back(c);
      }
    }
    if (!trim(current).empty()) members.push_back(parse_spec(current));
    return compose(members);
  }

  static const std::map<std::string, DistortionKind> aliases = {
      {"identity", DistortionKind::Identity},     {"none", DistortionKind::Identity},
      {"gb", DistortionKind::GaussianBlur},       {"gaussian_blur", DistortionKind::GaussianBlur},
      {"mb", DistortionKind::MedianBlur},         {"median_blur", DistortionKind::MedianBlur},
      {"gn", DistortionKind::GaussianNoise},      {"gaussian_noise", DistortionKind::GaussianNoise},
      {"spn", DistortionKind::SaltPepper},        {"salt_pepper", DistortionKind::SaltPepper},
      {"crop", DistortionKind::Crop},             {"cropout", DistortionKind::Cropout},
      {"dropout", DistortionKind::Dropout},       {"jpeg", DistortionKind::Jpeg},
      {"brightness", DistortionKind::Brightness}, {"contrast", DistortionKind::Contrast},
      {"saturation", DistortionKind::Saturation}, {"erasing", DistortionKind::Erasing},
  };
  auto kind = aliases.find(kind_key);
  if (kind == aliases.end()) throw std::invalid_argument("unknown distortion kind '" + kind_key + "'");

  std::map<std::string, double> params;
  size_t pos = 0;
  while (pos < rest.size()) {
    size_t comma = rest.find(',', pos);
    if (comma == std::string::npos) comma = rest.size();
    const std::string item = trim(std::string_view(rest).substr(pos, comma - pos));
    pos = comma + 1;
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("expected param=value in '" + s + "', got '" + item + "'");
    const std::string key = lower(trim(std::string_view(item).substr(0, eq)));
    const std::string value = trim(std::string_view(item).substr(eq + 1));
    double v = 0.0;
    auto [end, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
    if (ec != std::errc() || end != value.data() + value.size()) {
      throw std::invalid_argument("parameter '" + key + "' in '" + s + "' is not a number: '" + value + "'");
    }
    if (!params.emplace(key, v).second) throw std::invalid_argument("parameter '" + key + "' repeated in '" + s + "'");
  }
  return DistortionSpec(kind->second, std::move(params));
}

NoisePool::NoisePool(std::vector<DistortionSpec> specs) : specs_(std::move(specs)) {
  if (specs_.size() < 2) {
    throw std::invalid_argument("noise pool needs at least 2 distortions (m >= 1 meta-train plus 1 meta-test), got " +
                                std::to_string(specs_.size()));
  }
  std::set<std::string> names;
  for (const auto& s : specs_)
    if (!names.insert(s.name()).second) throw std::invalid_argument("duplicate distortion in pool: " + s.name());
}

TaskSplit sample_task(const NoisePool& pool, uint64_t seed) {
  if (pool.size() < 2) throw std::invalid_argument("sample_task: pool needs at least 2 distortions");
  Rng rng(derive_seed(seed, "task"));
  TaskSplit task;
  task.meta_test_index = static_cast<size_t>(rng.below(pool.size()));
  task.meta_test = pool.specs()[task.meta_test_index];
  for (size_t i = 0; i < pool.size(); ++i)
    if (i != task.meta_test_index) task.meta_train.push_back(pool.specs()[i]);
  return task;
}

DistortionSpec compose(const std::vector<DistortionSpec>& specs) {
  if (specs.empty()) throw std::invalid_argument("compose: empty distortion list");
  DistortionSpec out;
  out.kind_ = DistortionKind::Composite;
  out.members_ = specs;
  return out;
}

std::vector<int> jpeg_quant_table(double quality, bool chroma) {
  if (!(quality >= 1.0 && quality <= 100.0)) {
    throw std::invalid_argument("jpeg: parameter 'q' = " + format_number(quality) + " is outside [1, 100]");
  }
  const int q = static_cast<int>(std::lround(quality));
  const int scale = q < 50 ? 5000 / q : 200 - 2 * q;
  const int* base = chroma ? kChromaTable : kLumaTable;
  std::vector<int> table(64);
  for (int i = 0; i < 64; ++i) table[static_cast<size_t>(i)] = std::clamp((base[i] * scale + 50) / 100, 1, 255);
  return table;
}

Var jpeg_forward(const Var& image, double quality) {
  const Shape& shape = image.shape();
  if (shape.size() != 4 || (shape[1] != 1 && shape[1] != 3)) {
    throw std::invalid_argument("jpeg: expected [B,1|3,H,W] input, got " + shape_str(shape));
  }
  const auto luma = jpeg_quant_table(quality, false);
  const auto chroma = jpeg_quant_table(quality, true);
  const Dims d = dims_of(shape);
  const int64_t hp = (d.h + 7) / 8 * 8, wp = (d.w + 7) / 8 * 8;

  // Level-shifted YCbCr on the 0..255 scale.
  Var x = ad::scale(image, 255.0);
  std::shared_ptr<image_ops::ChannelMixMap> to_ycc, to_rgb;
  if (d.c == 3) {
    const Matrix fwd = rgb_to_ycc();
    to_ycc = std::make_shared<image_ops::ChannelMixMap>(shape, fwd);
    to_rgb = std::make_shared<image_ops::ChannelMixMap>(shape, inverse3(fwd));
    x = ad::linear_map(x, to_ycc);
  }
  Tensor shift(shape);
  for (int64_t b = 0; b < d.b; ++b) std::fill_n(shift.ptr() + b * d.image(), d.plane(), -128.0);
  x = ad::add_const(x, shift);

  const Matrix dh = image_ops::block_dct_matrix(hp), dw = image_ops::block_dct_matrix(wp);
  auto analysis = std::make_shared<image_ops::SeparableMap>(shape, dh * image_ops::reflect_pad_matrix(d.h, hp),
                                                           dw * image_ops::reflect_pad_matrix(d.w, wp));
  Var coeff = ad::linear_map(x, analysis);

  const Shape padded = analysis->out_shape();
  Tensor step(padded), inv_step(padded);
  for (int64_t b = 0; b < d.b; ++b)
    for (int64_t c = 0; c < d.c; ++c) {
      const auto& table = c == 0 ? luma : chroma;
      for (int64_t y = 0; y < hp; ++y)
        for (int64_t xx = 0; xx < wp; ++xx) {
          const double q = table[static_cast<size_t>((y % 8) * 8 + xx % 8)];
          step.at(b, c, y, xx) = q;
          inv_step.at(b, c, y, xx) = 1.0 / q;
        }
    }
  Var dequant = ad::mul_const(ad::ste_round(ad::mul_const(coeff, std::move(inv_step))), std::move(step));

  auto synthesis = std::make_shared<image_ops::SeparableMap>(padded, image_ops::crop_matrix(d.h, hp) * dh.transposed(),
                                                            image_ops::crop_matrix(d.w, wp) * dw.transposed());
  Var rec = ad::linear_map(dequant, synthesis);
  for (auto& v : shift.data()) v = -v;
  rec = ad::add_const(rec, std::move(shift));
  if (d.c == 3) rec = ad::linear_map(rec, to_rgb);
  return ad::clamp(ad::scale(rec, 1.0 / 255.0), 0.0, 1.0);
}

Var apply(const DistortionSpec& spec, const Var& watermarked, const Tensor& cover, uint64_t seed) {
  const Shape& shape = watermarked.shape();
  if (shape.size() != 4) throw std::invalid_argument("apply: expected [B,C,H,W] batch, got " + shape_str(shape));
  if (cover.shape() != shape) {
    throw std::invalid_argument("apply: watermarked " + shape_str(shape) + " and cover " + shape_str(cover.shape()) +
                                " shapes differ");
  }
  switch (spec.kind()) {
    case DistortionKind::Identity:
      return watermarked;
    case DistortionKind::GaussianBlur:
      return apply_gaussian_blur(watermarked, spec.param("sigma"));
    case DistortionKind::MedianBlur:
      return apply_median_blur(watermarked, static_cast<int64_t>(spec.param("w")));
    case DistortionKind::GaussianNoise:
      return apply_gaussian_noise(watermarked, spec.param("sigma"), seed);
    case DistortionKind::SaltPepper:
      return apply_salt_pepper(watermarked, spec.param("sigma"), seed);
    case DistortionKind::Crop:
      if (spec.param("p") <= 0.0) return watermarked;
      return apply_rect(watermarked, Tensor(), 1.0 - spec.param("p"), true, seed);
    case DistortionKind::Cropout:
      if (spec.param("p") <= 0.0) return watermarked;
      return apply_rect(watermarked, cover, 1.0 - spec.param("p"), true, seed);
    case DistortionKind::Dropout:
      return apply_dropout(watermarked, cover, spec.param("p"), seed);
    case DistortionKind::Erasing:
      if (spec.param("sigma") <= 0.0) return watermarked;
      return apply_rect(watermarked, Tensor(), spec.param("sigma"), false, seed);
    case DistortionKind::Jpeg:
      return jpeg_forward(watermarked, spec.param("q"));
    case DistortionKind::Brightness:
      return apply_brightness(watermarked, spec, seed);
    case DistortionKind::Contrast:
      return apply_contrast(watermarked, spec.param("f"));
    case DistortionKind::Saturation:
      return apply_saturation(watermarked, spec.param("f"));
    case DistortionKind::Composite:
      return apply_composite(spec, watermarked, cover, seed);
  }
  throw std::logic_error("unhandled distortion kind");
}

data::ImageBatch apply(const DistortionSpec& spec, const data::ImageBatch& watermarked, const data::ImageBatch& cover,
                       uint64_t seed) {
  ad::GradModeGuard no_grad(false);
  Var out = apply(spec, Var(watermarked.pixels), cover.pixels, seed);
  return data::ImageBatch{out.value(), data::ImageRole::Distorted};
}

}  // namespace metafc::noise
