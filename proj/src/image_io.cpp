#include "metafc/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <stdexcept>

namespace metafc::image_io {

namespace {

std::optional<std::vector<uint8_t>> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  return std::vector<uint8_t>(std::istreambuf_iterator<char>(in), {});
}

std::optional<Raster> fail(std::string* error, const std::string& message) {
  if (error) *error = message;
  return std::nullopt;
}

std::optional<Raster> read_png(const std::filesystem::path& path, std::string* error) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) return fail(error, image.message);
  const bool gray = (image.format & PNG_FORMAT_FLAG_COLOR) == 0;
  image.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  Raster r;
  r.width = image.width;
  r.height = image.height;
  r.channels = gray ? 1 : 3;
  r.pixels.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, r.pixels.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    return fail(error, msg);
  }
  return r;
}

// Netpbm header token, skipping whitespace and comments.
bool next_token(const std::vector<uint8_t>& bytes, size_t& pos, std::string& token) {
  token.clear();
  while (pos < bytes.size()) {
    if (bytes[pos] == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
    } else if (std::isspace(bytes[pos])) {
      ++pos;
    } else {
      break;
    }
  }
  while (pos < bytes.size() && !std::isspace(bytes[pos]) && bytes[pos] != '#') token.push_back(static_cast<char>(bytes[pos++]));
  return !token.empty();
}

std::optional<Raster> read_pnm(const std::vector<uint8_t>& bytes, std::string* error) {
  size_t pos = 0;
  std::string magic, tok;
  if (!next_token(bytes, pos, magic)) return fail(error, "empty file");
  const bool ascii = magic == "P2" || magic == "P3";
  const bool color = magic == "P3" || magic == "P6";
  if (magic != "P2" && magic != "P3" && magic != "P5" && magic != "P6") return fail(error, "not a PGM/PPM file");
  long dims[3];
  for (long& d : dims) {
    if (!next_token(bytes, pos, tok)) return fail(error, "truncated header");
    try {
      d = std::stol(tok);
    } catch (const std::exception&) {
      return fail(error, "bad header value '" + tok + "'");
    }
  }
  const long width = dims[0], height = dims[1], maxval = dims[2];
  if (width <= 0 || height <= 0 || maxval <= 0 || maxval > 65535) return fail(error, "invalid dimensions");
  Raster r;
  r.width = width;
  r.height = height;
  r.channels = color ? 3 : 1;
  const size_t count = static_cast<size_t>(width * height * r.channels);
  r.pixels.resize(count);
  auto store = [&](size_t i, long v) {
    r.pixels[i] = static_cast<uint8_t>(std::lround(255.0 * static_cast<double>(std::clamp(v, 0L, maxval)) / static_cast<double>(maxval)));
  };
  if (ascii) {
    for (size_t i = 0; i < count; ++i) {
      if (!next_token(bytes, pos, tok)) return fail(error, "truncated pixel data");
      store(i, std::stol(tok));
    }
    return r;
  }
  ++pos;  // single whitespace after maxval
  const size_t width_bytes = maxval > 255 ? 2 : 1;
  if (bytes.size() < pos + count * width_bytes) return fail(error, "truncated pixel data");
  for (size_t i = 0; i < count; ++i) {
    long v = bytes[pos + i * width_bytes];
    if (width_bytes == 2) v = (v << 8) | bytes[pos + i * 2 + 1];
    store(i, v);
  }
  return r;
}

uint32_t le32(const std::vector<uint8_t>& b, size_t at) {
  return uint32_t(b[at]) | uint32_t(b[at + 1]) << 8 | uint32_t(b[at + 2]) << 16 | uint32_t(b[at + 3]) << 24;
}
uint16_t le16(const std::vector<uint8_t>& b, size_t at) { return uint16_t(b[at] | b[at + 1] << 8); }

std::optional<Raster> read_bmp(const std::vector<uint8_t>& bytes, std::string* error) {
  if (bytes.size() < 54 || bytes[0] != 'B' || bytes[1] != 'M') return fail(error, "not a BMP file");
  const uint32_t offset = le32(bytes, 10);
  const int32_t width = static_cast<int32_t>(le32(bytes, 18));
  const int32_t raw_height = static_cast<int32_t>(le32(bytes, 22));
  const uint16_t bpp = le16(bytes, 28);
  const uint32_t compression = le32(bytes, 30);
  if ((bpp != 24 && bpp != 32) || (compression != 0 && !(compression == 3 && bpp == 32))) {
    return fail(error, "unsupported BMP encoding (" + std::to_string(bpp) + " bpp, compression " +
                           std::to_string(compression) + ")");
  }
  if (width <= 0 || raw_height == 0) return fail(error, "invalid BMP dimensions");
  const bool top_down = raw_height < 0;
  const int64_t height = std::abs(static_cast<int64_t>(raw_height));
  const size_t stride = (static_cast<size_t>(width) * bpp / 8 + 3) & ~size_t(3);
  if (bytes.size() < offset + stride * static_cast<size_t>(height)) return fail(error, "truncated BMP pixel data");
  Raster r;
  r.width = width;
  r.height = height;
  r.channels = 3;
  r.pixels.resize(static_cast<size_t>(width * height * 3));
  for (int64_t y = 0; y < height; ++y) {
    const int64_t src_row = top_down ? y : height - 1 - y;
    const uint8_t* row = bytes.data() + offset + static_cast<size_t>(src_row) * stride;
    for (int64_t x = 0; x < width; ++x) {
      const uint8_t* px = row + x * (bpp / 8);
      uint8_t* dst = r.pixels.data() + (y * width + x) * 3;
      dst[0] = px[2];
      dst[1] = px[1];
      dst[2] = px[0];
    }
  }
  return r;
}

}  // namespace

std::optional<Raster> read_image(const std::filesystem::path& path, std::string* error) {
  auto bytes = slurp(path);
  if (!bytes) return fail(error, "cannot open file");
  if (bytes->size() >= 8 && png_sig_cmp(bytes->data(), 0, 8) == 0) return read_png(path, error);
  if (bytes->size() >= 2 && (*bytes)[0] == 'P') return read_pnm(*bytes, error);
  if (bytes->size() >= 2 && (*bytes)[0] == 'B' && (*bytes)[1] == 'M') return read_bmp(*bytes, error);
  return fail(error, "unrecognized image format");
}

void write_png(const std::filesystem::path& path, const Raster& raster) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(raster.width);
  image.height = static_cast<png_uint_32>(raster.height);
  image.format = raster.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.c_str(), 0, raster.pixels.data(), 0, nullptr)) {
    throw std::runtime_error("cannot write " + path.string() + ": " + image.message);
  }
}

void write_ppm(const std::filesystem::path& path, const Raster& raster) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << (raster.channels == 1 ? "P5" : "P6") << '\n' << raster.width << ' ' << raster.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(raster.pixels.data()), static_cast<std::streamsize>(raster.pixels.size()));
}

Tensor raster_to_tensor(const Raster& raster, int64_t channels) {
  const int64_t h = raster.height, w = raster.width, src_c = raster.channels;
  Tensor t({channels, h, w});
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      const uint8_t* px = raster.pixels.data() + (y * w + x) * src_c;
      for (int64_t c = 0; c < channels; ++c) {
        double v;
        if (src_c == channels) v = px[c];
        else if (src_c == 1) v = px[0];
        else v = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
        t[(c * h + y) * w + x] = v / 255.0;
      }
    }
  }
  return t;
}

Raster tensor_to_raster(const Tensor& chw) {
  Raster r;
  r.channels = chw.dim(0);
  r.height = chw.dim(1);
  r.width = chw.dim(2);
  r.pixels.resize(static_cast<size_t>(chw.numel()));
  for (int64_t c = 0; c < r.channels; ++c)
    for (int64_t y = 0; y < r.height; ++y)
      for (int64_t x = 0; x < r.width; ++x) {
        const double v = std::clamp(chw[(c * r.height + y) * r.width + x], 0.0, 1.0);
        r.pixels[static_cast<size_t>((y * r.width + x) * r.channels + c)] = static_cast<uint8_t>(std::lround(v * 255.0));
      }
  return r;
}

Tensor resize_bilinear(const Tensor& chw, int64_t height, int64_t width) {
  const int64_t c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
  Tensor out({c, height, width});
  const double sy = static_cast<double>(h) / static_cast<double>(height);
  const double sx = static_cast<double>(w) / static_cast<double>(width);
  for (int64_t y = 0; y < height; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const int64_t y0 = static_cast<int64_t>(fy);
    const int64_t y1 = std::min(y0 + 1, h - 1);
    const double ty = fy - static_cast<double>(y0);
    for (int64_t x = 0; x < width; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const int64_t x0 = static_cast<int64_t>(fx);
      const int64_t x1 = std::min(x0 + 1, w - 1);
      const double tx = fx - static_cast<double>(x0);
      for (int64_t k = 0; k < c; ++k) {
        const double* p = chw.ptr() + k * h * w;
        const double top = p[y0 * w + x0] * (1 - tx) + p[y0 * w + x1] * tx;
        const double bottom = p[y1 * w + x0] * (1 - tx) + p[y1 * w + x1] * tx;
        out[(k * height + y) * width + x] = top * (1 - ty) + bottom * ty;
      }
    }
  }
  return out;
}

}  // namespace metafc::image_io
