#include "uvtex/image_io.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <memory>

namespace uvtex {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void write_png8(const std::string& path, const std::vector<uint8_t>& pixels, int h, int w,
                int channels) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  require(fp != nullptr, "cannot open for writing: " + path);

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  require(png != nullptr, "png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw ContractViolation("png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ContractViolation("png write failed: " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(static_cast<size_t>(h));
  for (int y = 0; y < h; ++y)
    rows[y] = const_cast<png_bytep>(pixels.data() + static_cast<size_t>(y) * w * channels);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

std::vector<uint8_t> read_png8(const std::string& path, int* out_h, int* out_w, int channels) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  require(fp != nullptr, "cannot open for reading: " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  require(png != nullptr, "png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw ContractViolation("png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ContractViolation("png read failed: " + path);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);

  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  const png_byte color = png_get_color_type(png, info);
  const png_byte depth = png_get_bit_depth(png, info);

  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (channels == 3 && (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA))
    png_set_gray_to_rgb(png);
  if (channels == 1 && (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA ||
                        color == PNG_COLOR_TYPE_PALETTE))
    png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  png_read_update_info(png, info);
  require(static_cast<int>(png_get_rowbytes(png, info)) == w * channels,
          "unexpected png row size: " + path);

  std::vector<uint8_t> pixels(static_cast<size_t>(h) * w * channels);
  std::vector<png_bytep> rows(static_cast<size_t>(h));
  for (int y = 0; y < h; ++y) rows[y] = pixels.data() + static_cast<size_t>(y) * w * channels;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  *out_h = h;
  *out_w = w;
  return pixels;
}

}  // namespace

void write_png_rgb(const std::string& path, const Tensor& img) {
  require(img.shape().rank == 3 && img.shape().d[0] == 3, "write_png_rgb expects (3,H,W), got " +
                                                              img.shape().str());
  const int h = img.shape().d[1], w = img.shape().d[2];
  const double* p = img.ptr();
  const std::ptrdiff_t plane = static_cast<std::ptrdiff_t>(h) * w;
  std::vector<uint8_t> pixels(static_cast<size_t>(h) * w * 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        double v = p[c * plane + y * w + x];
        v = std::min(1.0, std::max(-1.0, v));
        pixels[(static_cast<size_t>(y) * w + x) * 3 + c] =
            static_cast<uint8_t>(std::lround((v + 1.0) * 0.5 * 255.0));
      }
  write_png8(path, pixels, h, w, 3);
}

Tensor read_png_rgb(const std::string& path) {
  int h = 0, w = 0;
  std::vector<uint8_t> pixels = read_png8(path, &h, &w, 3);
  Tensor img = Tensor::zeros({3, h, w});
  double* p = img.ptr();
  const std::ptrdiff_t plane = static_cast<std::ptrdiff_t>(h) * w;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        p[c * plane + y * w + x] =
            pixels[(static_cast<size_t>(y) * w + x) * 3 + c] / 255.0 * 2.0 - 1.0;
  return img;
}

void write_png_gray(const std::string& path, const std::vector<uint8_t>& pixels, int h, int w) {
  require(static_cast<int>(pixels.size()) == h * w, "gray pixel buffer size mismatch");
  write_png8(path, pixels, h, w, 1);
}

std::vector<uint8_t> read_png_gray(const std::string& path, int* h, int* w) {
  return read_png8(path, h, w, 1);
}

}  // namespace uvtex
