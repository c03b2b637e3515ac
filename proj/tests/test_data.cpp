#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>

#include <unistd.h>

#include "metafc/data.hpp"
#include "metafc/image_io.hpp"
#include "metafc/rng.hpp"

using namespace metafc;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("metafc_" + name + "_" + std::to_string(::getpid()))) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

// 1/f-spectrum texture: random-phase sinusoids whose amplitude falls with
// frequency, the usual second-order model of natural images.
Tensor pink_image(int64_t size, uint64_t seed) {
  Rng rng(seed);
  Tensor img({3, size, size});
  for (int k = 0; k < 120; ++k) {
    const double f = std::exp(rng.uniform(std::log(1.0), std::log(size / 2.0)));
    const double angle = rng.uniform(0, std::numbers::pi);
    const double phase = rng.uniform(0, 2 * std::numbers::pi);
    const double amp = 0.25 / f;
    double tint[3];
    for (double& t : tint) t = rng.uniform(0.6, 1.0);
    for (int64_t y = 0; y < size; ++y)
      for (int64_t x = 0; x < size; ++x) {
        const double v = amp * std::sin(2 * std::numbers::pi * f * (std::cos(angle) * x + std::sin(angle) * y) / size + phase);
        for (int c = 0; c < 3; ++c) img[(c * size + y) * size + x] += tint[c] * v;
      }
  }
  for (auto& v : img.data()) v = std::clamp(0.5 + v, 0.0, 1.0);
  return img;
}

double psnr(const Tensor& a, const Tensor& b) {
  double mse = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) mse += (a[i] - b[i]) * (a[i] - b[i]);
  mse /= static_cast<double>(a.numel());
  return 10.0 * std::log10(1.0 / mse);
}

void write_bmp24(const fs::path& path, const image_io::Raster& r) {
  const uint32_t stride = (static_cast<uint32_t>(r.width) * 3 + 3) & ~3u;
  const uint32_t data_size = stride * static_cast<uint32_t>(r.height);
  std::vector<uint8_t> bytes(54 + data_size, 0);
  auto put32 = [&](size_t at, uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes[at + i] = static_cast<uint8_t>(v >> (8 * i));
  };
  bytes[0] = 'B';
  bytes[1] = 'M';
  put32(2, static_cast<uint32_t>(bytes.size()));
  put32(10, 54);
  put32(14, 40);
  put32(18, static_cast<uint32_t>(r.width));
  put32(22, static_cast<uint32_t>(r.height));
  bytes[26] = 1;
  bytes[28] = 24;
  put32(34, data_size);
  for (int64_t y = 0; y < r.height; ++y)
    for (int64_t x = 0; x < r.width; ++x) {
      const uint8_t* px = r.pixels.data() + (y * r.width + x) * 3;
      uint8_t* dst = bytes.data() + 54 + (r.height - 1 - y) * stride + x * 3;
      dst[0] = px[2];
      dst[1] = px[1];
      dst[2] = px[0];
    }
  std::ofstream(path, std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("synthetic splits are 80/10/10, disjoint and deterministic") {
  const auto handle = data::synth_images(100, {16, 16}, 3);
  const auto train = handle.with_split(data::Split::Train);
  const auto val = handle.with_split(data::Split::Val);
  const auto test = handle.with_split(data::Split::Test);
  CHECK(train.size() == 80);
  CHECK(val.size() == 10);
  CHECK(test.size() == 10);
  std::set<int64_t> seen;
  for (const auto* h : {&train, &val, &test})
    for (int64_t i : h->indices()) CHECK(seen.insert(i).second);
  CHECK(seen.size() == 100);

  const auto again = data::synth_images(100, {16, 16}, 3);
  CHECK(again.indices() == train.indices());
  CHECK(again.range(0, 80).pixels == train.range(0, 80).pixels);
  CHECK_FALSE(data::synth_images(100, {16, 16}, 4).range(0, 1).pixels == train.range(0, 1).pixels);

  const auto small = data::synth_images(10, {8, 8}, 1);
  CHECK(small.size() + small.with_split(data::Split::Val).size() + small.with_split(data::Split::Test).size() == 10);
  CHECK_THROWS_AS(data::synth_images(9, {8, 8}, 1), std::invalid_argument);

  const auto manifest = val.split_manifest();
  CHECK(manifest["splits"]["val"].size() == 10);
  CHECK(manifest["source"] == "synthetic");
}

TEST_CASE("synthetic images are non-degenerate and in range") {
  const auto handle = data::synth_images(1000, {64, 64}, 17);
  int64_t checked = 0;
  for (auto split : {data::Split::Train, data::Split::Val, data::Split::Test}) {
    const auto h = handle.with_split(split);
    const auto batch = h.range(0, h.size());
    CHECK(batch.pixels.shape() == Shape{h.size(), 3, 64, 64});
    const int64_t per = 3 * 64 * 64;
    for (int64_t b = 0; b < h.size(); ++b) {
      double mean = 0.0, sq = 0.0;
      for (int64_t i = 0; i < per; ++i) {
        const double v = batch.pixels[b * per + i];
        REQUIRE((v >= 0.0 && v <= 1.0));
        mean += v;
        sq += v * v;
      }
      mean /= per;
      CHECK(std::sqrt(sq / per - mean * mean) > 0.02);
      ++checked;
    }
  }
  CHECK(checked == 1000);
}

TEST_CASE("messages are fair, shaped and seeded") {
  const auto m = data::sample_messages(1000, 1000, 5);
  CHECK(m.bits.shape() == Shape{1000, 1000});
  double sum = 0.0;
  for (double v : m.bits.data()) {
    REQUIRE((v == 0.0 || v == 1.0));
    sum += v;
  }
  CHECK(std::abs(sum / 1e6 - 0.5) <= 0.002);
  CHECK(data::sample_messages(4, 30, 9).bits == data::sample_messages(4, 30, 9).bits);
  CHECK_FALSE(data::sample_messages(4, 30, 9).bits == data::sample_messages(4, 30, 10).bits);
  CHECK_THROWS_AS(data::sample_messages(0, 30, 1), std::invalid_argument);
  CHECK_THROWS_AS(data::sample_messages(4, 0, 1), std::invalid_argument);
}

TEST_CASE("batch streams shuffle per epoch and drop the remainder") {
  const auto handle = data::synth_images(125, {8, 8}, 2);  // 100 train images
  REQUIRE(handle.size() == 100);
  const auto a = data::batches(handle, 16, 1);
  const auto b = data::batches(handle, 16, 2);
  CHECK(a.size() == 6);
  std::multiset<int64_t> ma, mb;
  bool same_order = true;
  for (int64_t i = 0; i < a.size(); ++i) {
    ma.insert(a.positions(i).begin(), a.positions(i).end());
    mb.insert(b.positions(i).begin(), b.positions(i).end());
    same_order &= a.positions(i) == b.positions(i);
    CHECK(a[i].pixels.shape() == Shape{16, 3, 8, 8});
  }
  CHECK_FALSE(same_order);
  CHECK(ma.size() == 96);
  for (int64_t v : ma) CHECK(ma.count(v) == 1);
  const auto a2 = data::batches(handle, 16, 1);
  for (int64_t i = 0; i < a.size(); ++i) CHECK(a.positions(i) == a2.positions(i));
  CHECK_THROWS_AS(data::batches(handle, 101, 1), std::invalid_argument);
  // Full epochs under two seeds cover the same images when nothing is dropped.
  const auto c = data::batches(handle, 20, 3), d = data::batches(handle, 20, 4);
  std::multiset<int64_t> mc, md;
  for (int64_t i = 0; i < c.size(); ++i) {
    mc.insert(c.positions(i).begin(), c.positions(i).end());
    md.insert(d.positions(i).begin(), d.positions(i).end());
  }
  CHECK(mc == md);
}

TEST_CASE("folder loading decodes PNG, PPM and BMP and skips junk") {
  TempDir dir("folder");
  for (int i = 0; i < 12; ++i) {
    const auto raster = image_io::tensor_to_raster(pink_image(40 + i, static_cast<uint64_t>(i)));
    const auto stem = dir.path / ("img" + std::to_string(i));
    if (i % 3 == 0) image_io::write_png(stem.string() + ".png", raster);
    if (i % 3 == 1) image_io::write_ppm(stem.string() + ".ppm", raster);
    if (i % 3 == 2) write_bmp24(stem.string() + ".bmp", raster);
  }
  std::ofstream(dir.path / "notes.txt") << "not an image";
  std::ofstream(dir.path / "broken.png") << "\x89PNG\r\n\x1a\n garbage";

  const auto handle = data::load_folder(dir.path, {32, 32}, 1);
  CHECK(handle.skipped() == 2);
  const int64_t total = handle.size() + handle.with_split(data::Split::Val).size() + handle.with_split(data::Split::Test).size();
  CHECK(total == 12);
  CHECK(handle.size() == 9);
  const auto batch = handle.range(0, handle.size());
  CHECK(batch.pixels.shape() == Shape{9, 3, 32, 32});
  for (double v : batch.pixels.data()) CHECK((v >= 0.0 && v <= 1.0));
  const auto again = data::load_folder(dir.path, {32, 32}, 1);
  CHECK(again.indices() == handle.indices());
  CHECK(again.range(0, 9).pixels == batch.pixels);

  // Decoded pixels match what was written (BMP and PPM are lossless).
  const auto direct = image_io::read_image(dir.path / "img2.bmp");
  REQUIRE(direct);
  const auto original = image_io::tensor_to_raster(pink_image(42, 2));
  CHECK(direct->pixels == original.pixels);
  const auto ppm = image_io::read_image(dir.path / "img1.ppm");
  REQUIRE(ppm);
  CHECK(ppm->pixels == image_io::tensor_to_raster(pink_image(41, 1)).pixels);

  TempDir sparse("sparse");
  for (int i = 0; i < 5; ++i) image_io::write_png(sparse.path / ("a" + std::to_string(i) + ".png"), image_io::tensor_to_raster(pink_image(16, 1)));
  CHECK_THROWS_AS(data::load_folder(sparse.path, {16, 16}, 1), std::runtime_error);
  CHECK_THROWS_AS(data::load_folder(dir.path / "missing", {16, 16}, 1), std::runtime_error);
}

TEST_CASE("folder of 100 images splits 80/10/10") {
  TempDir dir("hundred");
  const auto raster = image_io::tensor_to_raster(pink_image(12, 3));
  for (int i = 0; i < 100; ++i) image_io::write_ppm(dir.path / ("p" + std::to_string(1000 + i) + ".ppm"), raster);
  const auto handle = data::load_folder(dir.path, {8, 8}, 5);
  CHECK(handle.size() == 80);
  CHECK(handle.with_split(data::Split::Val).size() == 10);
  CHECK(handle.with_split(data::Split::Test).size() == 10);
}

TEST_CASE("downscale then upscale keeps a natural-statistics image above 20 dB") {
  const Tensor original = image_io::raster_to_tensor(image_io::tensor_to_raster(pink_image(256, 77)), 3);
  const Tensor small = image_io::resize_bilinear(original, 64, 64);
  const Tensor back = image_io::resize_bilinear(small, 256, 256);
  CHECK(psnr(original, back) > 20.0);
}

TEST_CASE("bilinear resize reproduces constants and linear ramps") {
  Tensor ramp({1, 8, 8});
  for (int64_t y = 0; y < 8; ++y)
    for (int64_t x = 0; x < 8; ++x) ramp[y * 8 + x] = 0.1 * x;
  const Tensor up = image_io::resize_bilinear(ramp, 8, 16);
  // Half-pixel centers: output column j samples source x = (j + 0.5) / 2 - 0.5.
  for (int64_t j = 1; j < 15; ++j) CHECK(up[j] == doctest::Approx(0.1 * ((j + 0.5) / 2.0 - 0.5)));
  CHECK(image_io::resize_bilinear(Tensor({2, 5, 7}, 0.3), 11, 3) == Tensor({2, 11, 3}, 0.3));
}
