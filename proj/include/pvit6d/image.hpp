#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pvit6d/errors.hpp"

namespace pvit6d {

// RGB image, values in [0, 1], row-major.
struct Image {
  int h = 0, w = 0;
  std::vector<double> px;  // h * w * 3

  Image() = default;
  Image(int h_, int w_) : h(h_), w(w_), px(size_t(h_) * w_ * 3, 0.0) {}

  double& at(int y, int x, int c) { return px[(size_t(y) * w + x) * 3 + c]; }
  double at(int y, int x, int c) const {
    return px[(size_t(y) * w + x) * 3 + c];
  }
  void set(int y, int x, double r, double g, double b) {
    at(y, x, 0) = r;
    at(y, x, 1) = g;
    at(y, x, 2) = b;
  }
  void clamp01();
};

// Minimal PNG codec (8-bit RGB, non-interlaced) over zlib. The reader
// supports the subset the writer emits plus per-row filters 0-4, which
// covers BOP-style rgb files written by common encoders.
void write_png(const std::string& path, const Image& img);
Image read_png(const std::string& path);

// Bilinear sample with zero outside the image.
void sample_bilinear(const Image& img, double y, double x, double out[3]);

// Bilinear resize of an arbitrary source rectangle (in source pixel
// coordinates, may extend outside the image; outside reads as zero).
Image resize_region(const Image& src, double y0, double x0, double y1,
                    double x1, int out_h, int out_w);

Image to_grayscale_heatmap(const std::vector<double>& values, int h, int w);
Image overlay_heatmap(const Image& base, const std::vector<double>& values,
                      int map_h, int map_w);

}  // namespace pvit6d
