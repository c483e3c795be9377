#include "meas/degrade/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>

namespace meas::degrade {

namespace {

std::uint8_t quantize(float v) {
  const float clamped = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround(clamped * 255.0f));
}

}  // namespace

void Image::clamp01() {
  for (auto& v : data) v = std::clamp(v, 0.0f, 1.0f);
}

Image load_image(const std::string& path) {
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw DataError("cannot read PNG '" + path + "': " + png.message);
  }
  png.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, buffer.data(), 0, nullptr)) {
    const std::string message = png.message;
    png_image_free(&png);
    throw DataError("cannot decode PNG '" + path + "': " + message);
  }
  Image image(png.height, png.width);
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t x = 0; x < image.width; ++x) {
      for (std::size_t c = 0; c < Image::kChannels; ++c) {
        image.at(c, y, x) = float(buffer[(y * image.width + x) * 3 + c]) / 255.0f;
      }
    }
  }
  return image;
}

void save_image(const Image& image, const std::string& path) {
  if (image.height == 0 || image.width == 0) throw DataError("save_image: empty image");
  std::vector<std::uint8_t> buffer(image.height * image.width * 3);
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t x = 0; x < image.width; ++x) {
      for (std::size_t c = 0; c < Image::kChannels; ++c) {
        buffer[(y * image.width + x) * 3 + c] = quantize(image.at(c, y, x));
      }
    }
  }
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.c_str(), 0, buffer.data(), 0, nullptr)) {
    throw DataError("cannot write PNG '" + path + "': " + png.message);
  }
}

void save_indexed_png(std::span<const std::uint8_t> indices, std::size_t height, std::size_t width,
                      std::size_t palette_size, const std::string& path) {
  if (indices.size() != height * width) throw DataError("save_indexed_png: index buffer size mismatch");
  if (palette_size == 0 || palette_size > 256) throw DataError("save_indexed_png: palette size out of range");
  std::vector<std::uint8_t> palette(palette_size * 3);
  for (std::size_t i = 0; i < palette_size; ++i) {
    // Evenly spaced hues, full saturation.
    const double h = 6.0 * double(i) / double(palette_size);
    const double f = h - std::floor(h);
    double rgb[3];
    switch (int(h)) {
      case 0: rgb[0] = 1; rgb[1] = f; rgb[2] = 0; break;
      case 1: rgb[0] = 1 - f; rgb[1] = 1; rgb[2] = 0; break;
      case 2: rgb[0] = 0; rgb[1] = 1; rgb[2] = f; break;
      case 3: rgb[0] = 0; rgb[1] = 1 - f; rgb[2] = 1; break;
      case 4: rgb[0] = f; rgb[1] = 0; rgb[2] = 1; break;
      default: rgb[0] = 1; rgb[1] = 0; rgb[2] = 1 - f; break;
    }
    for (int c = 0; c < 3; ++c) palette[i * 3 + c] = static_cast<std::uint8_t>(std::lround(rgb[c] * 255));
  }
  for (auto idx : indices) {
    if (idx >= palette_size) throw DataError("save_indexed_png: index outside palette");
  }
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(width);
  png.height = static_cast<png_uint_32>(height);
  png.format = PNG_FORMAT_RGB_COLORMAP;
  png.colormap_entries = static_cast<png_uint_32>(palette_size);
  if (!png_image_write_to_file(&png, path.c_str(), 0, indices.data(), 0, palette.data())) {
    throw DataError("cannot write PNG '" + path + "': " + png.message);
  }
}

template <typename T>
Tensor<T> to_tensor(std::span<const Image> images) {
  if (images.empty()) throw DataError("to_tensor: no images");
  const std::size_t h = images[0].height, w = images[0].width;
  std::vector<T> values;
  values.reserve(images.size() * Image::kChannels * h * w);
  for (const auto& img : images) {
    if (img.height != h || img.width != w) throw DataError("to_tensor: images differ in size");
    values.insert(values.end(), img.data.begin(), img.data.end());
  }
  return Tensor<T>::from_data({images.size(), Image::kChannels, h, w}, std::move(values));
}

template <typename T>
Tensor<T> to_tensor(const Image& image) {
  return to_tensor<T>(std::span<const Image>(&image, 1));
}

template <typename T>
Image from_tensor(const Tensor<T>& batch, std::size_t index) {
  if (batch.rank() != 4 || batch.dim(1) != Image::kChannels || index >= batch.dim(0)) {
    throw ShapeError("from_tensor: expected [B,3,H,W] with index < B, got " + shape_str(batch.shape()));
  }
  Image image(batch.dim(2), batch.dim(3));
  const std::size_t n = image.size();
  const auto src = batch.data().subspan(index * n, n);
  for (std::size_t i = 0; i < n; ++i) image.data[i] = static_cast<float>(src[i]);
  return image;
}

template Tensor<float> to_tensor<float>(std::span<const Image>);
template Tensor<double> to_tensor<double>(std::span<const Image>);
template Tensor<float> to_tensor<float>(const Image&);
template Tensor<double> to_tensor<double>(const Image&);
template Image from_tensor<float>(const Tensor<float>&, std::size_t);
template Image from_tensor<double>(const Tensor<double>&, std::size_t);

}  // namespace meas::degrade
