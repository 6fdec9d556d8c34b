#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gradinv/tensor.hpp"

namespace gradinv::io {

/// Tiles one or more rows of equally sized [C,H,W] images (C = 1 or 3) into
/// a binary PGM (P5) or PPM (P6) file: 8-bit, row-major, with a 1-pixel
/// black separator at the right and bottom edge of every tile. Inputs must
/// already be de-normalized and clamped to [0,1].
void write_image_grid(const std::vector<std::vector<Tensor>>& rows, const std::string& path);
void write_image_grid(const std::vector<Tensor>& images, const std::string& path);

struct PnmImage {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;  // row-major, interleaved
};

/// Minimal P5/P6 reader (whitespace-separated header, maxval 255).
PnmImage read_pnm(const std::string& path);

}  // namespace gradinv::io
