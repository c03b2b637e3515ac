#include "metafc/evaluation.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>

#include "metafc/rng.hpp"

namespace metafc::eval {

namespace {

using noise::DistortionSpec;

constexpr int kWindow = 11;
constexpr double kSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

std::array<double, kWindow> gaussian_taps() {
  std::array<double, kWindow> taps{};
  double sum = 0.0;
  for (int i = 0; i < kWindow; ++i) {
    const double d = i - kWindow / 2;
    taps[i] = std::exp(-d * d / (2.0 * kSigma * kSigma));
    sum += taps[i];
  }
  for (auto& t : taps) t /= sum;
  return taps;
}

// Separable valid-mode filter of one [h, w] plane.
std::vector<double> filter_valid(const double* src, int64_t h, int64_t w, const std::array<double, kWindow>& taps) {
  const int64_t ow = w - kWindow + 1, oh = h - kWindow + 1;
  std::vector<double> rows(static_cast<size_t>(h * ow));
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int k = 0; k < kWindow; ++k) s += taps[k] * src[y * w + x + k];
      rows[y * ow + x] = s;
    }
  }
  std::vector<double> out(static_cast<size_t>(oh * ow));
  for (int64_t y = 0; y < oh; ++y) {
    for (int64_t x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int k = 0; k < kWindow; ++k) s += taps[k] * rows[(y + k) * ow + x];
      out[y * ow + x] = s;
    }
  }
  return out;
}

void require_same(const data::ImageBatch& a, const data::ImageBatch& b, const char* what) {
  if (a.pixels.shape() != b.pixels.shape()) {
    throw std::invalid_argument(std::string(what) + ": shapes " + shape_str(a.pixels.shape()) + " and " +
                                shape_str(b.pixels.shape()) + " differ");
  }
}

std::vector<DistortionSpec> parse_all(std::initializer_list<const char*> specs) {
  std::vector<DistortionSpec> out;
  for (const char* s : specs) out.push_back(noise::parse_spec(s));
  return out;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

double bit_accuracy(const Tensor& logits, const data::MessageBatch& target) {
  if (logits.shape() != target.bits.shape()) {
    throw std::invalid_argument("bit_accuracy: logits " + shape_str(logits.shape()) + " vs message " +
                                shape_str(target.bits.shape()));
  }
  int64_t correct = 0;
  for (int64_t i = 0; i < logits.numel(); ++i) correct += (logits[i] > 0.0) == (target.bits[i] > 0.5);
  return 100.0 * static_cast<double>(correct) / static_cast<double>(logits.numel());
}

double psnr_from_mse(double mse) {
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, -10.0 * std::log10(mse));
}

double psnr(const data::ImageBatch& a, const data::ImageBatch& b) {
  require_same(a, b, "psnr");
  double se = 0.0;
  for (int64_t i = 0; i < a.pixels.numel(); ++i) {
    const double d = a.pixels[i] - b.pixels[i];
    se += d * d;
  }
  return psnr_from_mse(se / static_cast<double>(a.pixels.numel()));
}

double ssim(const data::ImageBatch& a, const data::ImageBatch& b) {
  require_same(a, b, "ssim");
  if (a.pixels.rank() != 4) throw std::invalid_argument("ssim: expected [B,C,H,W], got " + shape_str(a.pixels.shape()));
  const int64_t n = a.batch(), c = a.channels(), h = a.height(), w = a.width();
  if (h < kWindow || w < kWindow) {
    throw std::invalid_argument("ssim: images " + std::to_string(h) + "x" + std::to_string(w) + " are smaller than the " +
                                std::to_string(kWindow) + "x" + std::to_string(kWindow) + " window");
  }
  static const auto taps = gaussian_taps();
  const int64_t plane = h * w;
  std::vector<double> xx(static_cast<size_t>(plane)), yy(xx.size()), xy(xx.size());
  double total = 0.0;
  int64_t count = 0;
  for (int64_t p = 0; p < n * c; ++p) {
    const double* x = a.pixels.ptr() + p * plane;
    const double* y = b.pixels.ptr() + p * plane;
    for (int64_t i = 0; i < plane; ++i) {
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mx = filter_valid(x, h, w, taps), my = filter_valid(y, h, w, taps);
    const auto sxx = filter_valid(xx.data(), h, w, taps), syy = filter_valid(yy.data(), h, w, taps),
               sxy = filter_valid(xy.data(), h, w, taps);
    for (size_t i = 0; i < mx.size(); ++i) {
      const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cxy = sxy[i] - mx[i] * my[i];
      total += ((2 * mx[i] * my[i] + kC1) * (2 * cxy + kC2)) / ((mx[i] * mx[i] + my[i] * my[i] + kC1) * (vx + vy + kC2));
    }
    count += static_cast<int64_t>(mx.size());
  }
  return total / static_cast<double>(count);
}

const char* suite_name(SuiteName s) {
  switch (s) {
    case SuiteName::HighIntensity: return "high_intensity";
    case SuiteName::Combined: return "combined";
    case SuiteName::Unknown: return "unknown";
  }
  return "?";
}

SuiteName parse_suite_name(std::string_view text) {
  std::string t(text);
  std::transform(t.begin(), t.end(), t.begin(), [](unsigned char ch) { return std::tolower(ch); });
  if (t == "high_intensity" || t == "highintensity" || t == "high") return SuiteName::HighIntensity;
  if (t == "combined") return SuiteName::Combined;
  if (t == "unknown") return SuiteName::Unknown;
  throw std::invalid_argument("unknown suite '" + std::string(text) + "' (expected high_intensity, combined or unknown)");
}

const char* scale_name(Scale s) { return s == Scale::Desk ? "desk" : "paper"; }

Scale parse_scale(std::string_view text) {
  if (text == "desk") return Scale::Desk;
  if (text == "paper") return Scale::Paper;
  throw std::invalid_argument("unknown scale '" + std::string(text) + "' (expected desk or paper)");
}

std::vector<DistortionSpec> build_suite(SuiteName name, Scale scale) {
  const bool paper = scale == Scale::Paper;
  switch (name) {
    case SuiteName::HighIntensity:
      if (paper) {
        return parse_all({"identity", "gb:sigma=6", "spn:sigma=0.15", "crop:p=0.7", "jpeg:q=30", "mb:w=7", "gn:sigma=0.08",
                          "brightness:f=4", "dropout:p=0.7"});
      }
      return parse_all({"identity", "gb:sigma=3", "spn:sigma=0.1", "crop:p=0.5", "jpeg:q=50", "mb:w=5", "gn:sigma=0.06",
                        "brightness:f=2", "dropout:p=0.5"});
    case SuiteName::Combined:
      if (paper) {
        return parse_all({"compose:[mb:w=5|jpeg:q=50]", "compose:[mb:w=5|spn:sigma=0.08]", "compose:[mb:w=5|gn:sigma=0.05]",
                          "compose:[gn:sigma=0.05|spn:sigma=0.08]", "compose:[gn:sigma=0.05|jpeg:q=50]",
                          "compose:[mb:w=5|spn:sigma=0.08|gn:sigma=0.05]", "compose:[mb:w=5|jpeg:q=50|crop:p=0.3]"});
      }
      return parse_all({"compose:[gn:sigma=0.04|dropout:p=0.3]", "compose:[gb:sigma=2|gn:sigma=0.04]"});
    case SuiteName::Unknown:
      if (paper) {
        return parse_all({"jpeg:q=50", "brightness:f=3", "dropout:p=0.7", "erasing:sigma=0.6", "contrast:f=4",
                          "saturation:f=3", "cropout:p=0.7", "crop:p=0.7"});
      }
      return parse_all({"jpeg:q=50", "brightness:f=1.5", "dropout:p=0.5", "erasing:sigma=0.3", "contrast:f=2",
                        "saturation:f=2", "cropout:p=0.5", "crop:p=0.5"});
  }
  throw std::invalid_argument("build_suite: unknown suite");
}

std::vector<DistortionSpec> desk_training_pool() {
  return parse_all({"identity", "gn:sigma=0.04", "dropout:p=0.3", "crop:p=0.2", "gb:sigma=2"});
}

std::vector<DistortionSpec> unknown_training_pool() {
  return parse_all({"identity", "gb:sigma=2", "spn:sigma=0.04", "gn:sigma=0.04", "mb:w=5"});
}

double EvalReport::suite_mean(std::string_view suite) const {
  double sum = 0.0;
  int64_t n = 0;
  for (const auto& r : rows) {
    if (r.suite == suite) {
      sum += r.acc_percent;
      ++n;
    }
  }
  return n ? sum / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

void EvalReport::append(const EvalReport& other) { rows.insert(rows.end(), other.rows.begin(), other.rows.end()); }

EvalReport evaluate_suite(const model::WatermarkModel& model, const model::ParamSet& params,
                          const data::DatasetHandle& dataset, const std::vector<DistortionSpec>& suite,
                          const std::string& suite_label, const EvalOptions& options) {
  if (suite.empty()) throw std::invalid_argument("evaluate_suite: suite '" + suite_label + "' is empty");
  if (options.batch_size < 1) throw std::invalid_argument("evaluate_suite: batch_size must be >= 1");
  const int64_t total = options.max_images > 0 ? std::min(options.max_images, dataset.size()) : dataset.size();
  if (total < 1) throw std::invalid_argument("evaluate_suite: dataset split is empty");

  ad::GradModeGuard off(false);
  std::vector<int64_t> correct(suite.size(), 0);
  int64_t bits_seen = 0;
  double se = 0.0, ssim_sum = 0.0;
  for (int64_t first = 0, chunk = 0; first < total; first += options.batch_size, ++chunk) {
    const int64_t n = std::min(options.batch_size, total - first);
    const auto cover = dataset.range(first, n);
    const auto msg = data::sample_messages(n, model.message_length(), derive_seed(options.message_seed, chunk));
    const ad::Var wm = model.encode(params, ad::Var(cover.pixels), msg.bits);
    const data::ImageBatch marked{wm.value(), data::ImageRole::Watermarked};
    for (int64_t i = 0; i < marked.pixels.numel(); ++i) {
      const double d = marked.pixels[i] - cover.pixels[i];
      se += d * d;
    }
    ssim_sum += ssim(cover, marked) * static_cast<double>(n);
    for (size_t s = 0; s < suite.size(); ++s) {
      const uint64_t seed = derive_seed(derive_seed(options.distortion_seed, suite[s].name()), chunk);
      const ad::Var distorted = noise::apply(suite[s], wm, cover.pixels, seed);
      const Tensor logits = model.decode(params, distorted).logits.value();
      for (int64_t i = 0; i < logits.numel(); ++i) correct[s] += (logits[i] > 0.0) == (msg.bits[i] > 0.5);
    }
    bits_seen += msg.bits.numel();
  }

  EvalReport report;
  report.seed = options.distortion_seed;
  const Shape shape = model.image_shape();
  report.psnr_db = psnr_from_mse(se / static_cast<double>(total * shape_numel(shape)));
  report.ssim = ssim_sum / static_cast<double>(total);
  for (size_t s = 0; s < suite.size(); ++s) {
    report.rows.push_back({suite_label, suite[s].label(),
                           100.0 * static_cast<double>(correct[s]) / static_cast<double>(bits_seen), total});
  }
  return report;
}

std::string fmt(double v, int precision) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, v);
  return buf;
}

std::string report_csv(const EvalReport& report) {
  std::ostringstream out;
  out << "suite,distortion,acc_percent,n_images,psnr_db,ssim,config_hash,seed\n";
  for (const auto& r : report.rows) {
    out << csv_field(r.suite) << ',' << csv_field(r.distortion) << ',' << fmt(r.acc_percent, 4) << ',' << r.n_images << ','
        << fmt(report.psnr_db, 4) << ',' << fmt(report.ssim, 6) << ',' << report.config_hash << ',' << report.seed << '\n';
  }
  return out.str();
}

std::string report_markdown(const EvalReport& report, const std::string& title) {
  std::ostringstream out;
  out << "## " << title << "\n\n";
  out << "PSNR " << fmt(report.psnr_db, 2) << " dB, SSIM " << fmt(report.ssim, 4) << ", seed " << report.seed;
  if (!report.config_hash.empty()) out << ", config " << report.config_hash;
  out << "\n";
  std::vector<std::string> suites;
  for (const auto& r : report.rows) {
    if (std::find(suites.begin(), suites.end(), r.suite) == suites.end()) suites.push_back(r.suite);
  }
  for (const auto& suite : suites) {
    std::string header = "| Suite |", rule = "|---|", row = "| " + suite + " |";
    for (const auto& r : report.rows) {
      if (r.suite != suite) continue;
      header += " " + r.distortion + " |";
      rule += "---:|";
      row += " " + fmt(r.acc_percent, 2) + " |";
    }
    header += " Avg. |";
    rule += "---:|";
    row += " " + fmt(report.suite_mean(suite), 2) + " |";
    out << "\n" << header << "\n" << rule << "\n" << row << "\n";
  }
  return out.str();
}

std::string config_hash(std::string_view text) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) h = (h ^ c) * 0x100000001b3ULL;
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace metafc::eval
