#include <doctest.h>

#include <cmath>
#include <map>
#include <numbers>
#include <stdexcept>

#include "gradcheck.hpp"
#include "jpeg_reference.hpp"
#include "metafc/data.hpp"
#include "metafc/noisepool.hpp"

using namespace metafc;
using metafc::ad::Var;
using metafc::noise::DistortionSpec;

namespace {

Tensor constant_batch(const Shape& shape, double v) { return Tensor(shape, v); }

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Tensor run(const DistortionSpec& spec, const Tensor& x, const Tensor& cover, uint64_t seed) {
  ad::GradModeGuard off(false);
  return noise::apply(spec, Var(x), cover, seed).value();
}

// 1-d orthonormal DCT-II basis value, written out directly.
double dct_basis(int k, int n) {
  const double a = k == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
  return a * std::cos((2 * n + 1) * k * std::numbers::pi / 16.0);
}

Tensor quantize8(Tensor t) {
  for (auto& v : t.data()) v = std::round(v * 255.0) / 255.0;
  return t;
}

}  // namespace

TEST_CASE("identity edge cases are exact") {
  const Tensor x = testing::random_tensor({2, 3, 16, 16}, 1, 0.0, 1.0);
  const Tensor cover = testing::random_tensor({2, 3, 16, 16}, 2, 0.0, 1.0);
  const std::vector<DistortionSpec> identities = {
      DistortionSpec::identity(),         DistortionSpec::gaussian_noise(0), DistortionSpec::gaussian_blur(0),
      DistortionSpec::dropout(0),         DistortionSpec::crop(0),           DistortionSpec::cropout(0),
      DistortionSpec::salt_pepper(0),     DistortionSpec::erasing(0),        DistortionSpec::median_blur(1),
      DistortionSpec::brightness(1),      DistortionSpec::contrast(1),       DistortionSpec::saturation(1),
      noise::compose({DistortionSpec::identity()}),
      noise::compose({DistortionSpec::gaussian_noise(0), DistortionSpec::dropout(0)}),
  };
  for (const auto& spec : identities) {
    CAPTURE(spec.name());
    CHECK(run(spec, x, cover, 7) == x);
  }
  CHECK(run(DistortionSpec::dropout(1), x, cover, 7) == cover);
}

TEST_CASE("gaussian noise has the configured std") {
  const Tensor x = constant_batch({1000, 1, 64, 64}, 0.5);
  const Tensor out = run(DistortionSpec::gaussian_noise(0.04), x, x, 11);
  double sum = 0.0, sq = 0.0;
  for (int64_t i = 0; i < out.numel(); ++i) {
    const double d = out[i] - x[i];
    sum += d;
    sq += d * d;
  }
  const double n = static_cast<double>(out.numel());
  const double std = std::sqrt(sq / n - (sum / n) * (sum / n));
  CHECK(std == doctest::Approx(0.04).epsilon(0.002 / 0.04));
}

TEST_CASE("quantization tables follow the IJG quality scaling") {
  CHECK(noise::jpeg_quant_table(50, false)[0] == 16);
  CHECK(noise::jpeg_quant_table(50, true)[63] == 99);
  for (int v : noise::jpeg_quant_table(100, false)) CHECK(v == 1);
  for (int v : noise::jpeg_quant_table(100, true)) CHECK(v == 1);
  // Q=10: scale 500, 16 -> 80; Q=90: scale 20, 16 -> 3 (rounded)
  CHECK(noise::jpeg_quant_table(10, false)[0] == 80);
  CHECK(noise::jpeg_quant_table(90, false)[0] == 3);
  CHECK(noise::jpeg_quant_table(1, true)[63] == 255);
  CHECK_THROWS_AS(noise::jpeg_quant_table(0, false), std::invalid_argument);
  CHECK_THROWS_AS(noise::jpeg_quant_table(101, false), std::invalid_argument);
}

TEST_CASE("jpeg with unit tables reproduces integer-coefficient images") {
  // Gray 16x16 image synthesized from integer DCT coefficients per block.
  Rng rng(5);
  Tensor x({1, 1, 16, 16});
  for (int by = 0; by < 2; ++by)
    for (int bx = 0; bx < 2; ++bx) {
      double coeff[8][8] = {};
      coeff[0][0] = static_cast<double>(rng.below(200)) - 100.0;
      for (int k = 0; k < 4; ++k) coeff[1 + rng.below(7)][1 + rng.below(7)] = static_cast<double>(rng.below(21)) - 10.0;
      for (int y = 0; y < 8; ++y)
        for (int xx = 0; xx < 8; ++xx) {
          double v = 0.0;
          for (int u = 0; u < 8; ++u)
            for (int w = 0; w < 8; ++w) v += coeff[u][w] * dct_basis(u, y) * dct_basis(w, xx);
          x.at(0, 0, by * 8 + y, bx * 8 + xx) = (v + 128.0) / 255.0;
        }
    }
  for (auto v : x.data()) REQUIRE((v >= 0.0 && v <= 1.0));
  ad::GradModeGuard off(false);
  const Tensor out = noise::jpeg_forward(Var(x), 100).value();
  CHECK(max_abs_diff(out, x) < 1e-9);
}

TEST_CASE("jpeg on uniform gray matches the direct DC computation") {
  // A constant block has only a DC term 8*(255g - 128); the round trip keeps
  // round(dc / q) * q / 8.
  for (double q : {1.0, 10.0, 30.0, 50.0, 75.0, 95.0, 100.0}) {
    const int q_dc = noise::jpeg_quant_table(q, false)[0];
    for (int level : {0, 17, 64, 100, 128, 200, 255}) {
      const double g = level / 255.0;
      const Tensor x = constant_batch({1, 3, 16, 24}, g);
      ad::GradModeGuard off(false);
      const Tensor out = noise::jpeg_forward(Var(x), q).value();
      const double dc = 8.0 * (255.0 * g - 128.0);
      auto reconstruct = [&](double k) { return std::clamp((k * q_dc / 8.0 + 128.0) / 255.0, 0.0, 1.0); };
      CAPTURE(q);
      CAPTURE(level);
      const double ratio = dc / q_dc;
      if (ratio - std::floor(ratio) == 0.5) {
        // Exact tie: the floating-point DCT may land on either side.
        const double lo = max_abs_diff(out, constant_batch(x.shape(), reconstruct(std::floor(ratio))));
        const double hi = max_abs_diff(out, constant_batch(x.shape(), reconstruct(std::ceil(ratio))));
        CHECK(std::min(lo, hi) < 1e-9);
      } else {
        CHECK(max_abs_diff(out, constant_batch(x.shape(), reconstruct(std::round(ratio)))) < 1e-9);
      }
      // DC step of at most 8 levels keeps the gray within 1/255.
      if (q >= 50) CHECK(max_abs_diff(out, x) <= 1.0 / 255.0 + 1e-12);
    }
  }
}

TEST_CASE("jpeg simulation tracks a reference codec at Q=50") {
  const auto dataset = data::synth_images(10, {64, 64}, 3);
  for (int64_t i = 0; i < 4; ++i) {
    const Tensor x = quantize8(dataset.with_split(data::Split::Train).range(i, 1).pixels);
    const Tensor ref = testing::libjpeg_roundtrip(x, 50);
    ad::GradModeGuard off(false);
    const Tensor sim = noise::jpeg_forward(Var(x), 50).value();
    CHECK(max_abs_diff(sim, ref) <= 0.08);
  }
}

TEST_CASE("jpeg pads non multiple-of-8 sizes and rejects bad quality") {
  const Tensor x = testing::random_tensor({2, 3, 13, 21}, 4, 0.2, 0.8);
  ad::GradModeGuard off(false);
  const Tensor out = noise::jpeg_forward(Var(x), 60).value();
  CHECK(out.shape() == x.shape());
  for (auto v : out.data()) CHECK((v >= 0.0 && v <= 1.0));
  CHECK_THROWS_AS(noise::jpeg_forward(Var(x), 0.5), std::invalid_argument);
  CHECK_THROWS_AS(noise::jpeg_forward(Var(x), 101), std::invalid_argument);
}

TEST_CASE("jpeg gradient is the straight-through linear path") {
  // With rounding replaced by identity the map is linear and close to the
  // identity on interior pixels, so d sum(out)/dx is that linear map's adjoint.
  const Tensor x = testing::random_tensor({1, 3, 8, 8}, 9, 0.3, 0.7);
  Var v(x, true);
  Var out = noise::jpeg_forward(v, 50);
  const auto g = ad::grad(ad::sum(out), std::span<const Var>(&v, 1))[0].value();
  // For unclamped pixels the straight-through chain is colour -> DCT -> IDCT
  // -> inverse colour, which composes to the identity.
  for (int64_t i = 0; i < g.numel(); ++i) {
    if (out.value()[i] > 0.0 && out.value()[i] < 1.0) CHECK(g[i] == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("smooth distortions match finite differences") {
  const std::vector<DistortionSpec> smooth = {
      DistortionSpec::gaussian_blur(1.0), DistortionSpec::gaussian_noise(0.02), DistortionSpec::brightness(1.2),
      DistortionSpec::brightness_range(0.85, 1.15), DistortionSpec::contrast(1.5), DistortionSpec::saturation(1.5),
      DistortionSpec::saturation(0.4)};
  const Tensor x = testing::random_tensor({2, 3, 8, 8}, 21, 0.3, 0.7);
  const Tensor weights = testing::random_tensor(x.shape(), 22);
  for (const auto& spec : smooth) {
    CAPTURE(spec.name());
    CHECK(spec.differentiable() == noise::Differentiability::Smooth);
    auto objective = [&](const Tensor& t) {
      const Tensor out = run(spec, t, x, 3);
      double s = 0.0;
      for (int64_t i = 0; i < out.numel(); ++i) s += weights[i] * out[i];
      return s;
    };
    Var v(x, true);
    Var out = noise::apply(spec, v, x, 3);
    const auto g = ad::grad(ad::sum(ad::mul_const(out, weights)), std::span<const Var>(&v, 1))[0].value();
    CHECK(testing::relative_error(g, testing::finite_difference(objective, x, 1e-4)) < 1e-3);
  }
}

TEST_CASE("mask pass-through gradients are zero exactly at replaced pixels") {
  const Tensor x = constant_batch({2, 3, 16, 16}, 0.4);
  const Tensor cover = constant_batch(x.shape(), 0.9);
  const std::vector<std::pair<DistortionSpec, double>> cases = {
      {DistortionSpec::dropout(0.5), 0.9},
      {DistortionSpec::crop(0.5), 0.0},
      {DistortionSpec::cropout(0.5), 0.9},
      {DistortionSpec::erasing(0.3), 0.0},
  };
  for (const auto& [spec, replaced_value] : cases) {
    CAPTURE(spec.name());
    CHECK(spec.differentiable() == noise::Differentiability::MaskPassThrough);
    Var v(x, true);
    Var out = noise::apply(spec, v, cover, 13);
    const auto g = ad::grad(ad::sum(out), std::span<const Var>(&v, 1))[0].value();
    int64_t replaced = 0;
    for (int64_t i = 0; i < g.numel(); ++i) {
      const bool is_replaced = out.value()[i] == replaced_value;
      replaced += is_replaced;
      CHECK(g[i] == (is_replaced ? 0.0 : 1.0));
    }
    CHECK(replaced > 0);
    CHECK(replaced < g.numel());
  }

  SUBCASE("salt and pepper") {
    Var v(x, true);
    Var out = noise::apply(DistortionSpec::salt_pepper(0.2), v, cover, 5);
    const auto g = ad::grad(ad::sum(out), std::span<const Var>(&v, 1))[0].value();
    int64_t salt = 0, pepper = 0;
    for (int64_t i = 0; i < g.numel(); ++i) {
      const double o = out.value()[i];
      salt += o == 1.0;
      pepper += o == 0.0;
      CHECK(g[i] == ((o == 0.0 || o == 1.0) ? 0.0 : 1.0));
    }
    const double fraction = static_cast<double>(salt + pepper) / static_cast<double>(g.numel());
    CHECK(fraction == doctest::Approx(0.2).epsilon(0.25));
    CHECK(salt > 0);
    CHECK(pepper > 0);
  }
}

TEST_CASE("median blur matches a brute-force median and routes gradient") {
  const Tensor x = testing::random_tensor({1, 2, 9, 7}, 31, 0.0, 1.0);
  Var v(x, true);
  Var out = noise::apply(DistortionSpec::median_blur(3), v, x, 0);
  auto mirror = [](int64_t i, int64_t n) {
    if (i < 0) return -i;
    if (i >= n) return 2 * n - 2 - i;
    return i;
  };
  for (int64_t c = 0; c < 2; ++c)
    for (int64_t y = 0; y < 9; ++y)
      for (int64_t xx = 0; xx < 7; ++xx) {
        std::vector<double> window;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) window.push_back(x.at(0, c, mirror(y + dy, 9), mirror(xx + dx, 7)));
        std::sort(window.begin(), window.end());
        CHECK(out.value().at(0, c, y, xx) == window[4]);
      }
  // Each output picks exactly one input, so gradient mass equals the pixel count.
  const auto g = ad::grad(ad::sum(out), std::span<const Var>(&v, 1))[0].value();
  double total = 0.0;
  for (auto gi : g.data()) total += gi;
  CHECK(total == doctest::Approx(static_cast<double>(x.numel())));
}

TEST_CASE("crop keeps a rectangle of the requested area") {
  const Tensor x = constant_batch({4, 1, 40, 40}, 0.5);
  const Tensor out = run(DistortionSpec::crop(0.75), x, x, 17);
  for (int64_t b = 0; b < 4; ++b) {
    int64_t kept = 0;
    for (int64_t i = 0; i < 1600; ++i) kept += out[b * 1600 + i] != 0.0;
    CHECK(kept == 400);  // round(40 * sqrt(0.25))^2
  }
}

TEST_CASE("contrast, brightness and saturation follow their formulas") {
  const Tensor x = testing::random_tensor({2, 3, 4, 4}, 41, 0.3, 0.6);
  const Tensor bright = run(DistortionSpec::brightness(1.3), x, x, 0);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(bright[i] == doctest::Approx(std::min(1.0, 1.3 * x[i])));

  const Tensor contrast = run(DistortionSpec::contrast(1.4), x, x, 0);
  for (int64_t b = 0; b < 2; ++b) {
    double mean = 0.0;
    for (int64_t i = 0; i < 48; ++i) mean += x[b * 48 + i] / 48.0;
    for (int64_t i = 0; i < 48; ++i)
      CHECK(contrast[b * 48 + i] == doctest::Approx(std::clamp(mean + 1.4 * (x[b * 48 + i] - mean), 0.0, 1.0)));
  }

  const Tensor sat = run(DistortionSpec::saturation(0.0 + 0.5), x, x, 0);
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t y = 0; y < 4; ++y)
      for (int64_t xx = 0; xx < 4; ++xx) {
        const double luma = 0.299 * x.at(b, 0, y, xx) + 0.587 * x.at(b, 1, y, xx) + 0.114 * x.at(b, 2, y, xx);
        for (int64_t c = 0; c < 3; ++c) CHECK(sat.at(b, c, y, xx) == doctest::Approx(luma + 0.5 * (x.at(b, c, y, xx) - luma)));
      }

  const Tensor ranged = run(DistortionSpec::brightness_range(0.85, 1.15), x, x, 3);
  for (int64_t b = 0; b < 2; ++b) {
    const double f = ranged[b * 48] / x[b * 48];
    CHECK(f >= 0.85);
    CHECK(f <= 1.15);
    for (int64_t i = 0; i < 48; ++i) CHECK(ranged[b * 48 + i] == doctest::Approx(f * x[b * 48 + i]));
  }
}

TEST_CASE("apply is deterministic, in range and shape checked") {
  const Tensor x = testing::random_tensor({3, 3, 24, 24}, 51, 0.0, 1.0);
  const Tensor cover = testing::random_tensor(x.shape(), 52, 0.0, 1.0);
  const char* specs[] = {"gb:sigma=2",          "mb:w=5",      "gn:sigma=0.1", "spn:sigma=0.1", "crop:p=0.7",
                         "cropout:p=0.3",       "dropout:p=0.4", "jpeg:q=30",  "brightness:f=4", "contrast:f=4",
                         "saturation:f=3",      "erasing:sigma=0.6", "brightness:f_lo=0.85,f_hi=1.15",
                         "compose:[mb:w=5|jpeg:q=50]", "compose:[gn:sigma=0.05|dropout:p=0.3]"};
  for (const char* text : specs) {
    CAPTURE(text);
    const auto spec = noise::parse_spec(text);
    const Tensor a = run(spec, x, cover, 99);
    CHECK(a == run(spec, x, cover, 99));
    CHECK(a.shape() == x.shape());
    for (auto v : a.data()) CHECK((v >= 0.0 && v <= 1.0));
  }
  const Tensor wrong = Tensor({3, 3, 24, 23});
  CHECK_THROWS_AS(run(DistortionSpec::identity(), x, wrong, 0), std::invalid_argument);
}

TEST_CASE("random kinds differ across seeds and batch items") {
  const Tensor x = constant_batch({2, 1, 16, 16}, 0.5);
  const auto spec = DistortionSpec::gaussian_noise(0.1);
  const Tensor a = run(spec, x, x, 1), b = run(spec, x, x, 2);
  CHECK_FALSE(a == b);
  bool same_items = true;
  for (int64_t i = 0; i < 256; ++i) same_items &= a[i] == a[256 + i];
  CHECK_FALSE(same_items);
}

TEST_CASE("compose applies members in order with per-member seeds") {
  const Tensor x = testing::random_tensor({2, 3, 16, 16}, 61, 0.0, 1.0);
  const Tensor cover = testing::random_tensor(x.shape(), 62, 0.0, 1.0);
  const auto a = DistortionSpec::gaussian_noise(0.05);
  const auto b = DistortionSpec::dropout(0.3);
  const auto c = DistortionSpec::median_blur(3);
  const uint64_t seed = 77;
  const Tensor composed = run(noise::compose({a, b, c}), x, cover, seed);
  const Tensor manual =
      run(c, run(b, run(a, x, cover, derive_seed(seed, 0)), cover, derive_seed(seed, 1)), cover, derive_seed(seed, 2));
  CHECK(composed == manual);

  const auto mb_jpeg = noise::parse_spec("compose:[mb:w=5|jpeg:q=50]");
  CHECK(mb_jpeg.label() == "MB&JPEG");
  CHECK(run(mb_jpeg, x, cover, 3) == run(DistortionSpec::jpeg(50), run(DistortionSpec::median_blur(5), x, cover, 0), cover, 0));
  CHECK(mb_jpeg.differentiable() == noise::Differentiability::StraightThrough);
  CHECK_THROWS_AS(noise::compose({}), std::invalid_argument);
}

TEST_CASE("sample_task partitions the pool uniformly") {
  std::vector<DistortionSpec> specs;
  for (int i = 1; i <= 5; ++i) specs.push_back(DistortionSpec::gaussian_blur(i));
  const noise::NoisePool pool(specs);
  std::map<size_t, int> counts;
  for (uint64_t seed = 0; seed < 10000; ++seed) {
    const auto task = noise::sample_task(pool, seed);
    REQUIRE(task.meta_train.size() == 4);
    CHECK(task.meta_test == specs[task.meta_test_index]);
    for (const auto& s : task.meta_train) CHECK_FALSE(s == task.meta_test);
    ++counts[task.meta_test_index];
  }
  double chi2 = 0.0;
  for (size_t i = 0; i < 5; ++i) {
    const double freq = counts[i] / 10000.0;
    CHECK(freq == doctest::Approx(0.2).epsilon(0.1));
    chi2 += (counts[i] - 2000.0) * (counts[i] - 2000.0) / 2000.0;
  }
  CHECK(chi2 < 18.47);  // 4 dof, p = 0.001

  const auto again = noise::sample_task(pool, 12345);
  CHECK(again.meta_test_index == noise::sample_task(pool, 12345).meta_test_index);

  const noise::NoisePool pair({DistortionSpec::identity(), DistortionSpec::jpeg(50)});
  const auto task = noise::sample_task(pair, 3);
  CHECK(task.meta_train.size() == 1);
  CHECK_FALSE(task.meta_train[0] == task.meta_test);
}

TEST_CASE("pool validation") {
  CHECK_THROWS_AS(noise::NoisePool({DistortionSpec::identity()}), std::invalid_argument);
  CHECK_THROWS_AS(noise::NoisePool({DistortionSpec::jpeg(50), DistortionSpec::jpeg(50)}), std::invalid_argument);
  CHECK(noise::NoisePool({DistortionSpec::jpeg(50), DistortionSpec::jpeg(30)}).meta_train_count() == 1);
}

TEST_CASE("spec parsing round-trips and names bad parameters") {
  for (const char* text : {"identity", "gb:sigma=6", "mb:w=7", "jpeg:q=30", "brightness:f_hi=1.15,f_lo=0.85",
                           "compose:[mb:w=5|jpeg:q=50]", "compose:[gn:sigma=0.05|compose:[crop:p=0.3|jpeg:q=50]]"}) {
    const auto spec = noise::parse_spec(text);
    CHECK(noise::parse_spec(spec.name()) == spec);
  }
  CHECK(noise::parse_spec(" JPEG : Q = 30 ").name() == "jpeg:q=30");
  CHECK(noise::parse_spec("jpeg:q=30").label() == "JPEG(Q=30)");

  auto message_of = [](const char* text) {
    try {
      noise::parse_spec(text);
    } catch (const std::invalid_argument& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(message_of("gb:sigma=-1").find("'sigma'") != std::string::npos);
  CHECK(message_of("mb:w=4").find("'w'") != std::string::npos);
  CHECK(message_of("jpeg:q=0").find("'q'") != std::string::npos);
  CHECK(message_of("dropout:p=1.5").find("'p'") != std::string::npos);
  CHECK(message_of("brightness:f=0").find("'f'") != std::string::npos);
  CHECK(message_of("gb:radius=2").find("'radius'") != std::string::npos);
  CHECK(message_of("gb").find("'sigma'") != std::string::npos);
  CHECK(message_of("jpeg:q=abc").find("'q'") != std::string::npos);
  CHECK_FALSE(message_of("warp:x=1").empty());
  CHECK_FALSE(message_of("compose:mb:w=5").empty());
}
