#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "metafc/tensor.hpp"

namespace metafc::image_io {

// Interleaved 8-bit raster.
struct Raster {
  int64_t width = 0;
  int64_t height = 0;
  int64_t channels = 0;  // 1 or 3
  std::vector<uint8_t> pixels;
};

// PNG, binary/ASCII PPM/PGM and uncompressed 24/32-bit BMP. Returns nullopt
// with `error` filled when the file cannot be decoded.
std::optional<Raster> read_image(const std::filesystem::path& path, std::string* error = nullptr);

void write_png(const std::filesystem::path& path, const Raster& raster);
void write_ppm(const std::filesystem::path& path, const Raster& raster);

// [C, H, W] in [0,1] with the requested channel count (gray is replicated,
// color is reduced to luma).
Tensor raster_to_tensor(const Raster& raster, int64_t channels);
// Rounds [C, H, W] values in [0,1] to 8 bits.
Raster tensor_to_raster(const Tensor& chw);

// Bilinear resampling with half-pixel centers, [C, H, W] -> [C, height, width].
Tensor resize_bilinear(const Tensor& chw, int64_t height, int64_t width);

}  // namespace metafc::image_io
