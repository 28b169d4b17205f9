#pragma once

// Minimal 8-bit PPM (P6) image support. Pixels live in [0,1] floats in
// memory; files are byte-quantized, so a written image re-reads to exactly
// round(v*255)/255.

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "ramdg/common.hpp"

namespace ramdg {

struct Image {
  size_t h = 0, w = 0;
  std::vector<float> px;  // h * w * 3, row-major, channels interleaved

  Image() = default;
  Image(size_t h_, size_t w_, float fill = 0.f) : h(h_), w(w_), px(h_ * w_ * 3, fill) {}

  float& at(size_t y, size_t x, size_t c) { return px[(y * w + x) * 3 + c]; }
  const float& at(size_t y, size_t x, size_t c) const { return px[(y * w + x) * 3 + c]; }

  bool same_content(const Image& o) const { return h == o.h && w == o.w && px == o.px; }
};

inline uint8_t quantize_byte(float v) {
  float c = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
  return uint8_t(std::lround(double(c) * 255.0));
}

inline void write_ppm(const std::string& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write image: " + path);
  out << "P6\n" << img.w << " " << img.h << "\n255\n";
  std::vector<uint8_t> bytes(img.px.size());
  for (size_t i = 0; i < img.px.size(); ++i) bytes[i] = quantize_byte(img.px[i]);
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw DataError("write failed: " + path);
}

namespace detail {

inline uint32_t crc32(const uint8_t* data, size_t n, uint32_t crc = 0) {
  static const auto table = [] {
    std::array<uint32_t, 256> t{};
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  crc ^= 0xffffffffu;
  for (size_t i = 0; i < n; ++i) crc = table[(crc ^ data[i]) & 0xffu] ^ (crc >> 8);
  return crc ^ 0xffffffffu;
}

inline uint32_t adler32(const uint8_t* data, size_t n) {
  uint32_t a = 1, b = 0;
  for (size_t i = 0; i < n; ++i) {
    a = (a + data[i]) % 65521u;
    b = (b + a) % 65521u;
  }
  return (b << 16) | a;
}

inline void put_be32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(uint8_t(v >> 24));
  out.push_back(uint8_t(v >> 16));
  out.push_back(uint8_t(v >> 8));
  out.push_back(uint8_t(v));
}

inline void png_chunk(std::vector<uint8_t>& out, const char* tag,
                      const std::vector<uint8_t>& body) {
  put_be32(out, uint32_t(body.size()));
  size_t start = out.size();
  out.insert(out.end(), tag, tag + 4);
  out.insert(out.end(), body.begin(), body.end());
  put_be32(out, crc32(out.data() + start, out.size() - start));
}

}  // namespace detail

/// Encodes the image as an RGB PNG using stored (uncompressed) deflate
/// blocks, so no compression library is needed. Intended for small frames
/// embedded in reports and overlays.
inline std::vector<uint8_t> png_bytes(const Image& img) {
  if (img.h == 0 || img.w == 0) throw DataError("png_bytes: empty image");
  std::vector<uint8_t> raw;
  raw.reserve(img.h * (1 + img.w * 3));
  for (size_t y = 0; y < img.h; ++y) {
    raw.push_back(0);  // per-row filter: none
    for (size_t x = 0; x < img.w; ++x)
      for (size_t c = 0; c < 3; ++c) raw.push_back(quantize_byte(img.at(y, x, c)));
  }

  std::vector<uint8_t> idat = {0x78, 0x01};  // zlib header, no compression preset
  for (size_t off = 0; off < raw.size(); off += 65535) {
    size_t len = std::min<size_t>(65535, raw.size() - off);
    idat.push_back(off + len == raw.size() ? 1 : 0);  // BFINAL + stored type
    idat.push_back(uint8_t(len & 0xff));
    idat.push_back(uint8_t(len >> 8));
    idat.push_back(uint8_t(~len & 0xff));
    idat.push_back(uint8_t(~(len >> 8) & 0xff));
    idat.insert(idat.end(), raw.begin() + long(off), raw.begin() + long(off + len));
  }
  detail::put_be32(idat, detail::adler32(raw.data(), raw.size()));

  std::vector<uint8_t> ihdr;
  detail::put_be32(ihdr, uint32_t(img.w));
  detail::put_be32(ihdr, uint32_t(img.h));
  ihdr.insert(ihdr.end(), {8, 2, 0, 0, 0});  // 8-bit, truecolor, default flags

  std::vector<uint8_t> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  detail::png_chunk(out, "IHDR", ihdr);
  detail::png_chunk(out, "IDAT", idat);
  detail::png_chunk(out, "IEND", {});
  return out;
}

inline std::string base64(const uint8_t* data, size_t n) {
  static const char* alphabet =
      "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((n + 2) / 3 * 4);
  for (size_t i = 0; i < n; i += 3) {
    uint32_t v = uint32_t(data[i]) << 16;
    if (i + 1 < n) v |= uint32_t(data[i + 1]) << 8;
    if (i + 2 < n) v |= uint32_t(data[i + 2]);
    out.push_back(alphabet[(v >> 18) & 63]);
    out.push_back(alphabet[(v >> 12) & 63]);
    out.push_back(i + 1 < n ? alphabet[(v >> 6) & 63] : '=');
    out.push_back(i + 2 < n ? alphabet[v & 63] : '=');
  }
  return out;
}

inline Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image: " + path);
  std::string magic;
  in >> magic;
  if (magic != "P6") throw DataError("not a P6 PPM file: " + path);
  auto next_int = [&]() -> long {
    // skips whitespace and # comments per the PPM spec
    while (true) {
      int c = in.peek();
      if (c == '#') {
        std::string line;
        std::getline(in, line);
      } else if (std::isspace(c)) {
        in.get();
      } else {
        break;
      }
    }
    long v;
    in >> v;
    if (!in) throw DataError("malformed PPM header: " + path);
    return v;
  };
  long w = next_int(), h = next_int(), maxval = next_int();
  if (w <= 0 || h <= 0 || maxval != 255) throw DataError("unsupported PPM dimensions: " + path);
  in.get();  // single whitespace after maxval
  Image img{size_t(h), size_t(w)};
  std::vector<uint8_t> bytes(img.px.size());
  in.read(reinterpret_cast<char*>(bytes.data()), std::streamsize(bytes.size()));
  if (in.gcount() != std::streamsize(bytes.size())) throw DataError("truncated PPM data: " + path);
  for (size_t i = 0; i < bytes.size(); ++i) img.px[i] = float(bytes[i]) / 255.f;
  return img;
}

}  // namespace ramdg
