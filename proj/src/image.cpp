#include "pvit6d/image.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace pvit6d {

void Image::clamp01() {
  for (auto& v : px) v = std::clamp(v, 0.0, 1.0);
}

namespace {

uint32_t crc_table_entry(uint32_t n) {
  for (int k = 0; k < 8; ++k) n = (n & 1) ? 0xedb88320u ^ (n >> 1) : n >> 1;
  return n;
}

uint32_t crc32_of(const uint8_t* data, size_t len, uint32_t crc = 0) {
  static uint32_t table[256];
  static bool init = false;
  if (!init) {
    for (uint32_t i = 0; i < 256; ++i) table[i] = crc_table_entry(i);
    init = true;
  }
  crc ^= 0xffffffffu;
  for (size_t i = 0; i < len; ++i)
    crc = table[(crc ^ data[i]) & 0xff] ^ (crc >> 8);
  return crc ^ 0xffffffffu;
}

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(uint8_t(v >> 24));
  out.push_back(uint8_t(v >> 16));
  out.push_back(uint8_t(v >> 8));
  out.push_back(uint8_t(v));
}

uint32_t get_u32(const uint8_t* p) {
  return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) |
         (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

void append_chunk(std::vector<uint8_t>& out, const char type[4],
                  const std::vector<uint8_t>& payload) {
  put_u32(out, uint32_t(payload.size()));
  const size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  put_u32(out, crc32_of(out.data() + start, out.size() - start));
}

}  // namespace

void write_png(const std::string& path, const Image& img) {
  // raw scanlines, filter byte 0
  std::vector<uint8_t> raw;
  raw.reserve(size_t(img.h) * (size_t(img.w) * 3 + 1));
  for (int y = 0; y < img.h; ++y) {
    raw.push_back(0);
    for (int x = 0; x < img.w; ++x)
      for (int c = 0; c < 3; ++c)
        raw.push_back(uint8_t(
            std::lround(std::clamp(img.at(y, x, c), 0.0, 1.0) * 255.0)));
  }
  uLongf comp_len = compressBound(uLong(raw.size()));
  std::vector<uint8_t> comp(comp_len);
  if (compress2(comp.data(), &comp_len, raw.data(), uLong(raw.size()), 6) !=
      Z_OK)
    throw FormatError("write_png: zlib compression failed: " + path);
  comp.resize(comp_len);

  std::vector<uint8_t> out = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  std::vector<uint8_t> ihdr;
  put_u32(ihdr, uint32_t(img.w));
  put_u32(ihdr, uint32_t(img.h));
  ihdr.insert(ihdr.end(), {8, 2, 0, 0, 0});  // 8-bit, RGB
  append_chunk(out, "IHDR", ihdr);
  append_chunk(out, "IDAT", comp);
  append_chunk(out, "IEND", {});

  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("write_png: cannot open " + path);
  f.write(reinterpret_cast<const char*>(out.data()),
          std::streamsize(out.size()));
}

Image read_png(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("read_png: cannot open " + path);
  std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)),
                           std::istreambuf_iterator<char>());
  if (buf.size() < 8 || std::memcmp(buf.data(), "\x89PNG\r\n\x1a\n", 8) != 0)
    throw FormatError("read_png: not a PNG file: " + path);

  size_t at = 8;
  int w = 0, h = 0, bit_depth = 0, color_type = 0;
  std::vector<uint8_t> idat;
  while (at + 8 <= buf.size()) {
    const uint32_t len = get_u32(buf.data() + at);
    const std::string type(buf.begin() + long(at) + 4, buf.begin() + long(at) + 8);
    const uint8_t* payload = buf.data() + at + 8;
    if (at + 12 + len > buf.size())
      throw FormatError("read_png: truncated chunk in " + path);
    if (type == "IHDR") {
      w = int(get_u32(payload));
      h = int(get_u32(payload + 4));
      bit_depth = payload[8];
      color_type = payload[9];
      if (payload[12] != 0)
        throw FormatError("read_png: interlaced PNG unsupported: " + path);
    } else if (type == "IDAT") {
      idat.insert(idat.end(), payload, payload + len);
    } else if (type == "IEND") {
      break;
    }
    at += 12 + len;
  }
  if (bit_depth != 8 || (color_type != 2 && color_type != 6))
    throw FormatError("read_png: only 8-bit RGB(A) supported: " + path);
  const int ch = color_type == 2 ? 3 : 4;

  const size_t stride = size_t(w) * ch + 1;
  std::vector<uint8_t> raw(size_t(h) * stride);
  uLongf raw_len = uLongf(raw.size());
  if (uncompress(raw.data(), &raw_len, idat.data(), uLong(idat.size())) !=
          Z_OK ||
      raw_len != raw.size())
    throw FormatError("read_png: zlib inflate failed: " + path);

  // undo per-row filters
  std::vector<uint8_t> prev(size_t(w) * ch, 0);
  Image img(h, w);
  for (int y = 0; y < h; ++y) {
    uint8_t* row = raw.data() + size_t(y) * stride;
    const int filter = row[0];
    uint8_t* cur = row + 1;
    for (int i = 0; i < w * ch; ++i) {
      const int a = i >= ch ? cur[i - ch] : 0;
      const int b = prev[size_t(i)];
      const int c = i >= ch ? prev[size_t(i - ch)] : 0;
      int v = cur[i];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: {
          const int p = a + b - c;
          const int pa = std::abs(p - a), pb = std::abs(p - b),
                    pc = std::abs(p - c);
          v += (pa <= pb && pa <= pc) ? a : (pb <= pc ? b : c);
          break;
        }
        default:
          throw FormatError("read_png: bad filter byte in " + path);
      }
      cur[i] = uint8_t(v);
    }
    std::memcpy(prev.data(), cur, size_t(w) * ch);
    for (int x = 0; x < w; ++x)
      for (int cch = 0; cch < 3; ++cch)
        img.at(y, x, cch) = cur[x * ch + cch] / 255.0;
  }
  return img;
}

void sample_bilinear(const Image& img, double y, double x, double out[3]) {
  const int y0 = int(std::floor(y)), x0 = int(std::floor(x));
  const double fy = y - y0, fx = x - x0;
  auto fetch = [&](int yy, int xx, int c) -> double {
    if (yy < 0 || yy >= img.h || xx < 0 || xx >= img.w) return 0.0;
    return img.at(yy, xx, c);
  };
  for (int c = 0; c < 3; ++c) {
    out[c] = (1 - fy) * ((1 - fx) * fetch(y0, x0, c) + fx * fetch(y0, x0 + 1, c)) +
             fy * ((1 - fx) * fetch(y0 + 1, x0, c) + fx * fetch(y0 + 1, x0 + 1, c));
  }
}

Image resize_region(const Image& src, double y0, double x0, double y1,
                    double x1, int out_h, int out_w) {
  Image out(out_h, out_w);
  const double sy = (y1 - y0) / out_h;
  const double sx = (x1 - x0) / out_w;
  double rgb[3];
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x) {
      // sample at output pixel centers mapped into the source rect
      sample_bilinear(src, y0 + (y + 0.5) * sy - 0.5, x0 + (x + 0.5) * sx - 0.5,
                      rgb);
      out.set(y, x, rgb[0], rgb[1], rgb[2]);
    }
  return out;
}

Image to_grayscale_heatmap(const std::vector<double>& values, int h, int w) {
  Image img(h, w);
  double lo = values[0], hi = values[0];
  for (double v : values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double range = hi > lo ? hi - lo : 1.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double v = (values[size_t(y) * w + x] - lo) / range;
      img.set(y, x, v, v, v);
    }
  return img;
}

Image overlay_heatmap(const Image& base, const std::vector<double>& values,
                      int map_h, int map_w) {
  const Image heat = to_grayscale_heatmap(values, map_h, map_w);
  Image up = resize_region(heat, 0, 0, map_h, map_w, base.h, base.w);
  Image out = base;
  for (int y = 0; y < base.h; ++y)
    for (int x = 0; x < base.w; ++x) {
      const double a = up.at(y, x, 0);
      out.at(y, x, 0) = 0.5 * out.at(y, x, 0) + 0.5 * a;  // red channel
      out.at(y, x, 1) *= 0.5;
      out.at(y, x, 2) *= 0.5;
    }
  return out;
}

}  // namespace pvit6d
