#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "meas/numerics/tensor.hpp"

namespace meas::degrade {

/// Three-channel planar image, values nominally in [0,1].
struct Image {
  static constexpr std::size_t kChannels = 3;

  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> data;  // [3, height, width]

  Image() = default;
  Image(std::size_t h, std::size_t w, float fill = 0.0f)
      : height(h), width(w), data(kChannels * h * w, fill) {}

  float& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * height + y) * width + x]; }
  float at(std::size_t c, std::size_t y, std::size_t x) const { return data[(c * height + y) * width + x]; }
  std::size_t size() const { return data.size(); }
  bool same_shape(const Image& other) const { return height == other.height && width == other.width; }

  void clamp01();
};

/// Reads an 8-bit PNG. Grayscale is replicated to three channels and alpha
/// is dropped.
Image load_image(const std::string& path);
/// Writes an 8-bit RGB PNG (values clamped to [0,1], rounded to nearest).
void save_image(const Image& image, const std::string& path);
/// Writes a palette PNG from per-pixel indices (row-major) with an
/// automatically generated distinct-colour palette.
void save_indexed_png(std::span<const std::uint8_t> indices, std::size_t height, std::size_t width,
                      std::size_t palette_size, const std::string& path);

/// Stacks equally sized images into a [B,3,H,W] tensor.
template <typename T>
Tensor<T> to_tensor(std::span<const Image> images);
template <typename T>
Tensor<T> to_tensor(const Image& image);
/// Extracts sample `index` of a [B,3,H,W] tensor.
template <typename T>
Image from_tensor(const Tensor<T>& batch, std::size_t index = 0);

}  // namespace meas::degrade
