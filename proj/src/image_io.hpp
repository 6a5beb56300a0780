#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "core/tensor.hpp"

namespace nseg {

// 8-bit raster image, interleaved row-major. channels is 1 (mask) or 3 (RGB).
struct Raster {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<uint8_t> px;

  uint8_t& at(int y, int x, int c) {
    return px[static_cast<size_t>((y * width + x) * channels + c)];
  }
  uint8_t at(int y, int x, int c) const {
    return px[static_cast<size_t>((y * width + x) * channels + c)];
  }
  static Raster make(int w, int h, int c, uint8_t fill = 0);
};

// Binary PPM (P6, 3-channel) and PGM (P5, 1-channel) with maxval 255.
Raster read_raster(const std::string& path);
void write_raster(const std::string& path, const Raster& img);

// Image <-> tensor. Tensors are [C,H,W] in [0,1].
Tensor raster_to_tensor(const Raster& img);
Raster tensor_to_raster(const Tensor& chw);

// Resampling. Bilinear for images; nearest-neighbour for masks (the only
// label-preserving choice).
Tensor resize_bilinear_chw(const Tensor& chw, int out_h, int out_w);
Raster resize_nearest(const Raster& img, int out_h, int out_w);

}  // namespace nseg
