#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "uvtex/tensor.hpp"

namespace uvtex {

// 8-bit RGB PNG <-> float image (3,H,W) in [-1,1].
// Quantization: byte = round((clamp(v,-1,1)+1)/2 * 255); v = byte/255*2 - 1.
void write_png_rgb(const std::string& path, const Tensor& img);
Tensor read_png_rgb(const std::string& path);

// 8-bit grayscale PNG for label maps.
void write_png_gray(const std::string& path, const std::vector<uint8_t>& pixels, int h, int w);
std::vector<uint8_t> read_png_gray(const std::string& path, int* h, int* w);

}  // namespace uvtex
