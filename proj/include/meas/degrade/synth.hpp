#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "meas/degrade/image.hpp"

namespace meas::degrade {

enum class Task { noise, rain, haze, blur, lowlight };

const char* task_name(Task task);
Task parse_task(const std::string& name);
std::vector<Task> all_tasks();

/// Counter-based generator: a pure function of (seed, counter).
std::uint64_t hash64(std::uint64_t seed, std::uint64_t counter);
double hash_uniform(std::uint64_t seed, std::uint64_t counter);
/// Standard normal draw tied to an absolute pixel coordinate, so noise on a
/// crop equals the crop of noise on the full frame.
double pixel_normal(std::uint64_t seed, std::size_t channel, std::size_t y, std::size_t x);

/// clamp(clean + n), n ~ N(0, (sigma/255)^2) i.i.d.; (origin_y, origin_x) is
/// the position of the image inside the frame the noise field is defined on.
Image add_gaussian_noise(const Image& clean, double sigma_255, std::uint64_t seed,
                         std::size_t origin_y = 0, std::size_t origin_x = 0);
/// clean * t + airlight * (1 - t).
Image synth_haze(const Image& clean, double transmission, double airlight);
/// Additive bright straight streaks of the given orientation, clamped.
Image synth_rain(const Image& clean, std::size_t streak_count, double angle_deg, double intensity,
                 std::uint64_t seed, double min_length = 4.0, double max_length = 12.0);
/// Normalized 1-D Gaussian taps, radius ceil(3 sigma); {1} for sigma == 0.
std::vector<double> gaussian_kernel_1d(double sigma);
/// Separable Gaussian blur with replicated borders.
Image synth_blur(const Image& clean, double kernel_sigma);
/// scale * clean^gamma.
Image synth_lowlight(const Image& clean, double gamma, double scale);

struct ImagePair {
  Image clean;
  Image degraded;
  Task task = Task::noise;  // diagnostic only; never a model input
};

enum class Flip { none, horizontal, vertical };

Image crop(const Image& image, std::size_t y0, std::size_t x0, std::size_t height, std::size_t width);
Image flip(const Image& image, Flip mode);

/// Same random window and flip applied to both members.
ImagePair random_crop_flip(const ImagePair& pair, std::size_t crop_size, std::uint64_t seed,
                           bool allow_flip = true);

struct DegradationParams {
  std::vector<double> noise_sigmas{5, 25, 50};
  std::size_t rain_streaks_min = 8;
  std::size_t rain_streaks_max = 24;
  double rain_angle_min = -20.0;
  double rain_angle_max = 20.0;
  double rain_intensity = 0.4;
  double rain_length_min = 4.0;
  double rain_length_max = 12.0;
  double haze_t_min = 0.4;
  double haze_t_max = 0.8;
  double airlight_min = 0.7;
  double airlight_max = 1.0;
  double blur_sigma_min = 1.0;
  double blur_sigma_max = 2.0;
  double lowlight_gamma_min = 1.5;
  double lowlight_gamma_max = 2.5;
  double lowlight_scale_min = 0.3;
  double lowlight_scale_max = 0.6;
};

/// Description of a reproducible (clean, degraded) sample stream.
struct DatasetSpec {
  std::string source = "procedural";  // or a directory of PNG files
  std::vector<Task> tasks{Task::noise, Task::rain, Task::haze, Task::blur, Task::lowlight};
  DegradationParams params;
  std::size_t image_size = 48;  // procedural source side length
  std::size_t crop_size = 32;
  bool flip = true;
  std::uint64_t seed = 0;
  std::size_t count = 0;  // size of a finite evaluation set

  void validate() const;
};

/// Procedural scene: a smooth base (gradient or value noise) under one to four
/// sharp-edged discs or rotated squares filled flat, checkered or striped.
Image procedural_image(std::size_t size, std::uint64_t seed);

/// Loads and caches the source images of a dataset.
class SampleSource {
 public:
  explicit SampleSource(const DatasetSpec& spec);
  /// Sample `index` of the stream; a pure function of (spec, index).
  ImagePair sample(std::size_t index) const;
  /// Sample `index` with the task forced (used for per-task evaluation).
  ImagePair sample(std::size_t index, Task task) const;
  const DatasetSpec& spec() const { return spec_; }

 private:
  Image source_image(std::uint64_t key) const;
  Image apply(const Image& clean, Task task, std::uint64_t key) const;

  DatasetSpec spec_;
  std::vector<Image> files_;
};

}  // namespace meas::degrade
