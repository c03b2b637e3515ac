#include "metafc/data.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <iostream>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <thread>

#include "metafc/image_io.hpp"
#include "metafc/rng.hpp"

namespace metafc::data {

namespace {

void assign_splits(DatasetStorage& storage, uint64_t seed) {
  const int64_t n = static_cast<int64_t>(storage.images.size());
  std::vector<int64_t> order(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  Rng rng(derive_seed(seed, "split"));
  for (int64_t i = n - 1; i > 0; --i) std::swap(order[static_cast<size_t>(i)], order[rng.below(static_cast<uint64_t>(i + 1))]);
  const int64_t n_train = n * 8 / 10;
  const int64_t n_val = n / 10;
  storage.split_index[0].assign(order.begin(), order.begin() + n_train);
  storage.split_index[1].assign(order.begin() + n_train, order.begin() + n_train + n_val);
  storage.split_index[2].assign(order.begin() + n_train + n_val, order.end());
}

double image_std(const Tensor& t) {
  double mean = 0.0;
  for (double v : t.data()) mean += v;
  mean /= static_cast<double>(t.numel());
  double var = 0.0;
  for (double v : t.data()) var += (v - mean) * (v - mean);
  return std::sqrt(var / static_cast<double>(t.numel()));
}

Tensor synth_one(Rng& rng, int64_t channels, int64_t h, int64_t w) {
  Tensor img({channels, h, w});
  const double dh = static_cast<double>(h), dw = static_cast<double>(w);

  // Smooth color gradient.
  const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double ca = std::cos(angle), sa = std::sin(angle);
  std::vector<double> c0(static_cast<size_t>(channels)), c1(static_cast<size_t>(channels));
  for (int64_t c = 0; c < channels; ++c) {
    c0[static_cast<size_t>(c)] = rng.uniform(0.1, 0.9);
    c1[static_cast<size_t>(c)] = rng.uniform(0.1, 0.9);
  }
  const double span = std::abs(ca) * dw + std::abs(sa) * dh;
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      double t = ((static_cast<double>(x) - dw / 2) * ca + (static_cast<double>(y) - dh / 2) * sa) / span + 0.5;
      for (int64_t c = 0; c < channels; ++c)
        img[(c * h + y) * w + x] = c0[static_cast<size_t>(c)] * (1 - t) + c1[static_cast<size_t>(c)] * t;
    }

  // Gaussian blobs.
  const int64_t blobs = 2 + static_cast<int64_t>(rng.below(5));
  for (int64_t k = 0; k < blobs; ++k) {
    const double cy = rng.uniform(0, dh), cx = rng.uniform(0, dw);
    const double radius = rng.uniform(0.05, 0.3) * std::min(dh, dw);
    std::vector<double> amp(static_cast<size_t>(channels));
    for (auto& a : amp) a = rng.uniform(-0.5, 0.5);
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        const double d2 = (static_cast<double>(y) - cy) * (static_cast<double>(y) - cy) +
                          (static_cast<double>(x) - cx) * (static_cast<double>(x) - cx);
        const double g = std::exp(-d2 / (2 * radius * radius));
        for (int64_t c = 0; c < channels; ++c) img[(c * h + y) * w + x] += amp[static_cast<size_t>(c)] * g;
      }
  }

  // Band-limited noise: a coarse random grid, bilinearly upsampled.
  const int64_t grids[] = {4, 8, 16};
  const int64_t grid = grids[rng.below(3)];
  const double noise_amp = rng.uniform(0.04, 0.15);
  Tensor coarse({channels, grid, grid});
  for (auto& v : coarse.data()) v = noise_amp * rng.normal();
  Tensor fine = image_io::resize_bilinear(coarse, h, w);
  for (int64_t i = 0; i < img.numel(); ++i) img[i] += fine[i];

  // Occasional oriented stripes for high-frequency content.
  if (rng.bernoulli(0.5)) {
    const double fy = rng.uniform(-0.25, 0.25), fx = rng.uniform(-0.25, 0.25);
    const double phase = rng.uniform(0, 2 * std::numbers::pi), amp = rng.uniform(0.03, 0.1);
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        const double s = amp * std::sin(2 * std::numbers::pi * (fy * static_cast<double>(y) + fx * static_cast<double>(x)) + phase);
        for (int64_t c = 0; c < channels; ++c) img[(c * h + y) * w + x] += s;
      }
  }

  for (auto& v : img.data()) v = std::clamp(v, 0.0, 1.0);
  return img;
}

}  // namespace

void validate_pixels(const Tensor& pixels, const char* what) {
  if (pixels.rank() != 4) {
    throw std::invalid_argument(std::string(what) + ": expected [B,C,H,W] pixels, got " + shape_str(pixels.shape()));
  }
  for (double v : pixels.data()) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument(std::string(what) + ": pixel value outside [0,1]");
  }
}

MessageBatch sample_messages(int64_t batch, int64_t length, uint64_t seed) {
  if (batch < 1 || length < 1) throw std::invalid_argument("sample_messages: batch and length must be >= 1");
  Rng rng(derive_seed(seed, "messages"));
  Tensor bits({batch, length});
  for (auto& b : bits.data()) b = static_cast<double>(rng.next() >> 63);
  return MessageBatch{std::move(bits)};
}

const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

DatasetHandle::DatasetHandle(std::shared_ptr<const DatasetStorage> storage, Split split)
    : storage_(std::move(storage)), split_(split) {}

const std::vector<int64_t>& DatasetHandle::indices() const {
  return storage_->split_index[static_cast<int>(split_)];
}

ImageBatch DatasetHandle::gather(std::span<const int64_t> positions) const {
  const auto& idx = indices();
  const int64_t c = storage_->channels, h = storage_->size.height, w = storage_->size.width;
  const int64_t per = c * h * w;
  Tensor pixels({static_cast<int64_t>(positions.size()), c, h, w});
  for (size_t b = 0; b < positions.size(); ++b) {
    const int64_t pos = positions[b];
    if (pos < 0 || pos >= static_cast<int64_t>(idx.size())) throw std::out_of_range("dataset position out of range");
    const Tensor& img = storage_->images[static_cast<size_t>(idx[static_cast<size_t>(pos)])];
    std::copy(img.ptr(), img.ptr() + per, pixels.ptr() + static_cast<int64_t>(b) * per);
  }
  return ImageBatch{std::move(pixels), ImageRole::Cover};
}

ImageBatch DatasetHandle::range(int64_t first, int64_t count) const {
  std::vector<int64_t> positions(static_cast<size_t>(count));
  for (int64_t i = 0; i < count; ++i) positions[static_cast<size_t>(i)] = first + i;
  return gather(positions);
}

nlohmann::json DatasetHandle::split_manifest() const {
  nlohmann::json j;
  j["source"] = storage_->source.kind == SourceKind::Folder ? "folder" : "synthetic";
  if (storage_->source.kind == SourceKind::Folder) j["path"] = storage_->source.path.string();
  j["seed"] = storage_->source.seed;
  j["image_size"] = {storage_->size.height, storage_->size.width};
  j["channels"] = storage_->channels;
  j["skipped"] = storage_->skipped;
  for (Split s : {Split::Train, Split::Val, Split::Test}) {
    nlohmann::json names = nlohmann::json::array();
    for (int64_t i : storage_->split_index[static_cast<int>(s)]) names.push_back(storage_->names[static_cast<size_t>(i)]);
    j["splits"][split_name(s)] = names;
  }
  return j;
}

int num_workers() {
  const char* env = std::getenv("METAFC_NUM_WORKERS");
  if (!env) return 1;
  try {
    return std::max(1, std::stoi(env));
  } catch (const std::exception&) {
    return 1;
  }
}

DatasetHandle load_folder(const std::filesystem::path& path, ImageSize size, uint64_t split_seed, int64_t channels) {
  if (!std::filesystem::is_directory(path)) throw std::runtime_error("dataset folder not found: " + path.string());
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(path))
    if (entry.is_regular_file()) files.push_back(entry.path());
  std::sort(files.begin(), files.end());

  std::vector<std::optional<Tensor>> decoded(files.size());
  std::vector<std::string> errors(files.size());
  std::atomic<size_t> next{0};
  auto work = [&] {
    for (size_t i = next++; i < files.size(); i = next++) {
      auto raster = image_io::read_image(files[i], &errors[i]);
      if (!raster) continue;
      decoded[i] = image_io::resize_bilinear(image_io::raster_to_tensor(*raster, channels), size.height, size.width);
    }
  };
  const int workers = std::min<int>(num_workers(), static_cast<int>(std::max<size_t>(files.size(), 1)));
  std::vector<std::thread> pool;
  for (int t = 1; t < workers; ++t) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();

  auto storage = std::make_shared<DatasetStorage>();
  storage->source = DatasetSource{SourceKind::Folder, path, 0, split_seed};
  storage->size = size;
  storage->channels = channels;
  for (size_t i = 0; i < files.size(); ++i) {
    if (!decoded[i]) {
      std::cerr << "warning: skipping " << files[i].string() << ": " << errors[i] << '\n';
      ++storage->skipped;
      continue;
    }
    storage->images.push_back(std::move(*decoded[i]));
    storage->names.push_back(files[i].filename().string());
  }
  if (storage->images.size() < 10) {
    throw std::runtime_error("dataset folder " + path.string() + " has " + std::to_string(storage->images.size()) +
                             " usable images; at least 10 are required");
  }
  assign_splits(*storage, split_seed);
  return DatasetHandle(std::move(storage), Split::Train);
}

DatasetHandle synth_images(int64_t n, ImageSize size, uint64_t seed, int64_t channels) {
  if (n < 10) throw std::invalid_argument("synth_images: n must be >= 10");
  if (size.height < 1 || size.width < 1 || channels < 1) throw std::invalid_argument("synth_images: invalid image shape");
  auto storage = std::make_shared<DatasetStorage>();
  storage->source = DatasetSource{SourceKind::Synthetic, {}, n, seed};
  storage->size = size;
  storage->channels = channels;
  storage->images.reserve(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, static_cast<uint64_t>(i)));
    Tensor img = synth_one(rng, channels, size.height, size.width);
    while (image_std(img) <= 0.02) img = synth_one(rng, channels, size.height, size.width);
    storage->images.push_back(std::move(img));
    storage->names.push_back("synth_" + std::to_string(i));
  }
  assign_splits(*storage, seed);
  return DatasetHandle(std::move(storage), Split::Train);
}

BatchStream::BatchStream(DatasetHandle handle, int64_t batch_size, uint64_t epoch_seed) : handle_(std::move(handle)) {
  const int64_t n = handle_.size();
  if (batch_size < 1) throw std::invalid_argument("batches: batch_size must be >= 1");
  if (batch_size > n) {
    throw std::invalid_argument("batches: batch_size " + std::to_string(batch_size) + " exceeds split size " + std::to_string(n));
  }
  std::vector<int64_t> order(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  Rng rng(derive_seed(epoch_seed, "shuffle"));
  for (int64_t i = n - 1; i > 0; --i) std::swap(order[static_cast<size_t>(i)], order[rng.below(static_cast<uint64_t>(i + 1))]);
  for (int64_t b = 0; b + batch_size <= n; b += batch_size) batches_.emplace_back(order.begin() + b, order.begin() + b + batch_size);
}

BatchStream batches(const DatasetHandle& handle, int64_t batch_size, uint64_t epoch_seed) {
  return BatchStream(handle, batch_size, epoch_seed);
}

}  // namespace metafc::data
