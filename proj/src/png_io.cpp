#include "pointseg/png_io.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include <zlib.h>

#include "pointseg/errors.hpp"

namespace pointseg::png {

namespace {

void put_u32_be(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

void put_chunk(std::vector<std::uint8_t>& out, const char type[4],
               const std::vector<std::uint8_t>& payload) {
  put_u32_be(out, static_cast<std::uint32_t>(payload.size()));
  const std::size_t crc_start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  const std::uint32_t crc = static_cast<std::uint32_t>(
      crc32(0, out.data() + crc_start, static_cast<uInt>(out.size() - crc_start)));
  put_u32_be(out, crc);
}

}  // namespace

void write_rgb(const std::filesystem::path& path, const std::vector<std::uint8_t>& rgb,
               std::int64_t width, std::int64_t height) {
  if (static_cast<std::int64_t>(rgb.size()) != width * height * 3)
    throw ConfigError("write_rgb: buffer size does not match dimensions");

  // raw scanlines with filter byte 0
  std::vector<std::uint8_t> raw;
  raw.reserve(static_cast<std::size_t>(height * (width * 3 + 1)));
  for (std::int64_t y = 0; y < height; ++y) {
    raw.push_back(0);
    const auto* row = rgb.data() + y * width * 3;
    raw.insert(raw.end(), row, row + width * 3);
  }
  uLongf comp_len = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> comp(comp_len);
  if (compress2(comp.data(), &comp_len, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw IoError("png: deflate failed");
  comp.resize(comp_len);

  std::vector<std::uint8_t> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  std::vector<std::uint8_t> ihdr;
  put_u32_be(ihdr, static_cast<std::uint32_t>(width));
  put_u32_be(ihdr, static_cast<std::uint32_t>(height));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(2);   // color type: truecolor
  ihdr.push_back(0);   // compression
  ihdr.push_back(0);   // filter
  ihdr.push_back(0);   // interlace
  put_chunk(out, "IHDR", ihdr);
  put_chunk(out, "IDAT", comp);
  put_chunk(out, "IEND", {});

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

std::vector<std::uint8_t> overlay_rgb(const Tensor& frame, const Tensor& pred,
                                      const Tensor& gt) {
  const std::int64_t h = frame.dim(0), w = frame.dim(1);
  if (pred.shape() != frame.shape() || (gt.defined() && gt.shape() != frame.shape()))
    throw ConfigError("overlay: shape mismatch");
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(h * w * 3));
  for (std::int64_t i = 0; i < h * w; ++i) {
    const bool p = pred[i] == 1.0;
    const bool g = gt.defined() && gt[i] == 1.0;
    std::uint8_t r, gch, b;
    if (p && g) {
      r = 255; gch = 255; b = 0;    // overlap: yellow
    } else if (p) {
      r = 255; gch = 0; b = 0;      // prediction: red
    } else if (g) {
      r = 0; gch = 255; b = 0;      // ground truth: green
    } else {
      const auto v = static_cast<std::uint8_t>(std::lround(std::clamp(frame[i], 0.0, 1.0) * 255.0));
      r = gch = b = v;
    }
    rgb[static_cast<std::size_t>(3 * i + 0)] = r;
    rgb[static_cast<std::size_t>(3 * i + 1)] = gch;
    rgb[static_cast<std::size_t>(3 * i + 2)] = b;
  }
  return rgb;
}

}  // namespace pointseg::png
