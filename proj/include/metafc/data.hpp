#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "metafc/tensor.hpp"

namespace metafc::data {

enum class ImageRole { Cover, Watermarked, Distorted };

// Pixels [B, C, H, W] in [0, 1].
struct ImageBatch {
  Tensor pixels;
  ImageRole role = ImageRole::Cover;

  int64_t batch() const { return pixels.dim(0); }
  int64_t channels() const { return pixels.dim(1); }
  int64_t height() const { return pixels.dim(2); }
  int64_t width() const { return pixels.dim(3); }
};

// Throws unless `pixels` is 4-d with every value in [0, 1].
void validate_pixels(const Tensor& pixels, const char* what);

// Bits [B, L] in {0, 1}.
struct MessageBatch {
  Tensor bits;

  int64_t batch() const { return bits.dim(0); }
  int64_t length() const { return bits.dim(1); }
};

MessageBatch sample_messages(int64_t batch, int64_t length, uint64_t seed);

struct ImageSize {
  int64_t height = 64;
  int64_t width = 64;
  friend bool operator==(const ImageSize&, const ImageSize&) = default;
};

enum class Split { Train, Val, Test };
const char* split_name(Split s);

enum class SourceKind { Folder, Synthetic };

struct DatasetSource {
  SourceKind kind = SourceKind::Synthetic;
  std::filesystem::path path;  // folder sources
  int64_t count = 0;           // synthetic sources
  uint64_t seed = 0;
};

// Decoded images shared by every split view of one source.
struct DatasetStorage {
  DatasetSource source;
  ImageSize size;
  int64_t channels = 3;
  std::vector<Tensor> images;     // each [C, H, W]
  std::vector<std::string> names;
  std::vector<int64_t> split_index[3];
  int64_t skipped = 0;
};

class DatasetHandle {
 public:
  DatasetHandle(std::shared_ptr<const DatasetStorage> storage, Split split);

  DatasetHandle with_split(Split split) const { return DatasetHandle(storage_, split); }
  Split split() const { return split_; }
  const DatasetSource& source() const { return storage_->source; }
  ImageSize image_size() const { return storage_->size; }
  int64_t channels() const { return storage_->channels; }
  int64_t size() const { return static_cast<int64_t>(indices().size()); }
  // Indices into the source, in split order.
  const std::vector<int64_t>& indices() const;
  int64_t skipped() const { return storage_->skipped; }

  // Batch made of the split-local positions given.
  ImageBatch gather(std::span<const int64_t> positions) const;
  // Batch of split-local positions [first, first + count).
  ImageBatch range(int64_t first, int64_t count) const;

  nlohmann::json split_manifest() const;

 private:
  std::shared_ptr<const DatasetStorage> storage_;
  Split split_;
};

// Loads every decodable PNG/PPM/PGM/BMP file under `path` (non-recursive),
// bilinearly resized to `size`. Undecodable files are skipped with a warning.
// The 80/10/10 split is a seeded permutation of the name-sorted file list.
DatasetHandle load_folder(const std::filesystem::path& path, ImageSize size, uint64_t split_seed,
                          int64_t channels = 3);

// Procedural images: gradients, Gaussian blobs, band-limited noise and stripes.
DatasetHandle synth_images(int64_t n, ImageSize size, uint64_t seed, int64_t channels = 3);

// Seeded per-epoch shuffle of a split; the final partial batch is dropped.
class BatchStream {
 public:
  BatchStream(DatasetHandle handle, int64_t batch_size, uint64_t epoch_seed);

  int64_t size() const { return static_cast<int64_t>(batches_.size()); }
  const std::vector<int64_t>& positions(int64_t i) const { return batches_.at(static_cast<size_t>(i)); }
  ImageBatch operator[](int64_t i) const { return handle_.gather(positions(i)); }

 private:
  DatasetHandle handle_;
  std::vector<std::vector<int64_t>> batches_;
};

BatchStream batches(const DatasetHandle& handle, int64_t batch_size, uint64_t epoch_seed);

// Worker count for decoding, from METAFC_NUM_WORKERS (default 1).
int num_workers();

}  // namespace metafc::data
