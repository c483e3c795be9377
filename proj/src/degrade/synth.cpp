#include "meas/degrade/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>

namespace meas::degrade {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Sequential draws from a counter-based stream.
class Stream {
 public:
  explicit Stream(std::uint64_t key) : key_(key) {}
  double uniform() { return hash_uniform(key_, counter_++); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::size_t index(std::size_t n) { return std::min(n - 1, std::size_t(uniform() * double(n))); }
  std::uint64_t next_key() { return hash64(key_, counter_++); }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

void require_unit_range(const Image& image, const char* op) {
  for (float v : image.data) {
    if (!(v >= 0.0f && v <= 1.0f)) throw ArgumentError(std::string(op) + ": input values must lie in [0,1]");
  }
}

}  // namespace

const char* task_name(Task task) {
  switch (task) {
    case Task::noise: return "noise";
    case Task::rain: return "rain";
    case Task::haze: return "haze";
    case Task::blur: return "blur";
    case Task::lowlight: return "lowlight";
  }
  return "unknown";
}

Task parse_task(const std::string& name) {
  for (Task t : all_tasks()) {
    if (name == task_name(t)) return t;
  }
  throw UsageError("unknown degradation task '" + name + "'");
}

std::vector<Task> all_tasks() { return {Task::noise, Task::rain, Task::haze, Task::blur, Task::lowlight}; }

std::uint64_t hash64(std::uint64_t seed, std::uint64_t counter) {
  return splitmix64(splitmix64(seed) ^ (counter * 0xD6E8FEB86659FD93ull));
}

double hash_uniform(std::uint64_t seed, std::uint64_t counter) {
  // 53 random mantissa bits, strictly inside (0,1).
  return (double(hash64(seed, counter) >> 11) + 0.5) * 0x1.0p-53;
}

double pixel_normal(std::uint64_t seed, std::size_t channel, std::size_t y, std::size_t x) {
  const std::uint64_t counter = (std::uint64_t(channel) << 56) ^ (std::uint64_t(y) << 28) ^ std::uint64_t(x);
  const double u1 = hash_uniform(seed, 2 * counter);
  const double u2 = hash_uniform(seed, 2 * counter + 1);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

Image add_gaussian_noise(const Image& clean, double sigma_255, std::uint64_t seed, std::size_t origin_y,
                         std::size_t origin_x) {
  if (!(sigma_255 >= 0.0)) throw ArgumentError("add_gaussian_noise: sigma must be >= 0");
  require_unit_range(clean, "add_gaussian_noise");
  Image out = clean;
  if (sigma_255 == 0.0) return out;
  const double sigma = sigma_255 / 255.0;
  for (std::size_t c = 0; c < Image::kChannels; ++c) {
    for (std::size_t y = 0; y < clean.height; ++y) {
      for (std::size_t x = 0; x < clean.width; ++x) {
        const double n = sigma * pixel_normal(seed, c, y + origin_y, x + origin_x);
        out.at(c, y, x) = float(std::clamp(double(clean.at(c, y, x)) + n, 0.0, 1.0));
      }
    }
  }
  return out;
}

Image synth_haze(const Image& clean, double transmission, double airlight) {
  if (!(transmission > 0.0 && transmission <= 1.0)) throw ArgumentError("synth_haze: transmission must be in (0,1]");
  if (!(airlight >= 0.0 && airlight <= 1.0)) throw ArgumentError("synth_haze: airlight must be in [0,1]");
  Image out = clean;
  for (auto& v : out.data) v = float(double(v) * transmission + airlight * (1.0 - transmission));
  out.clamp01();
  return out;
}

Image synth_rain(const Image& clean, std::size_t streak_count, double angle_deg, double intensity,
                 std::uint64_t seed, double min_length, double max_length) {
  if (intensity < 0.0) throw ArgumentError("synth_rain: intensity must be >= 0");
  if (min_length <= 0.0 || max_length < min_length) throw ArgumentError("synth_rain: invalid length range");
  Image out = clean;
  if (streak_count == 0 || intensity == 0.0) return out;
  const double angle = angle_deg * std::numbers::pi / 180.0;
  // Streaks fall downward, tilted by the angle from vertical.
  const double dx = std::sin(angle), dy = std::cos(angle);
  std::vector<std::uint8_t> mask(clean.height * clean.width);
  Stream rng(seed);
  for (std::size_t s = 0; s < streak_count; ++s) {
    const double x0 = rng.uniform(-0.2, 1.2) * double(clean.width);
    const double y0 = rng.uniform(-0.2, 1.0) * double(clean.height);
    const double length = rng.uniform(min_length, max_length);
    const double strength = intensity * rng.uniform(0.6, 1.0);
    std::fill(mask.begin(), mask.end(), 0);
    for (double t = 0.0; t <= length; t += 0.5) {
      const long px = std::lround(x0 + t * dx);
      const long py = std::lround(y0 + t * dy);
      if (px < 0 || py < 0 || px >= long(clean.width) || py >= long(clean.height)) continue;
      const std::size_t idx = std::size_t(py) * clean.width + std::size_t(px);
      if (mask[idx]) continue;
      mask[idx] = 1;
      for (std::size_t c = 0; c < Image::kChannels; ++c) out.data[c * clean.height * clean.width + idx] += float(strength);
    }
  }
  out.clamp01();
  return out;
}

std::vector<double> gaussian_kernel_1d(double sigma) {
  if (!(sigma >= 0.0)) throw ArgumentError("gaussian kernel: sigma must be >= 0");
  if (sigma == 0.0) return {1.0};
  const auto radius = static_cast<std::size_t>(std::ceil(3.0 * sigma));
  std::vector<double> taps(2 * radius + 1);
  double total = 0.0;
  for (std::size_t i = 0; i < taps.size(); ++i) {
    const double d = double(i) - double(radius);
    taps[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    total += taps[i];
  }
  for (auto& t : taps) t /= total;
  return taps;
}

Image synth_blur(const Image& clean, double kernel_sigma) {
  const auto taps = gaussian_kernel_1d(kernel_sigma);
  const long radius = long(taps.size() / 2);
  const long h = long(clean.height), w = long(clean.width);
  Image tmp(clean.height, clean.width), out(clean.height, clean.width);
  for (std::size_t c = 0; c < Image::kChannels; ++c) {
    for (long y = 0; y < h; ++y) {
      for (long x = 0; x < w; ++x) {
        double acc = 0.0;
        for (long t = -radius; t <= radius; ++t) {
          acc += taps[std::size_t(t + radius)] * clean.at(c, std::size_t(y), std::size_t(std::clamp(x + t, 0L, w - 1)));
        }
        tmp.at(c, std::size_t(y), std::size_t(x)) = float(acc);
      }
    }
    for (long y = 0; y < h; ++y) {
      for (long x = 0; x < w; ++x) {
        double acc = 0.0;
        for (long t = -radius; t <= radius; ++t) {
          acc += taps[std::size_t(t + radius)] * tmp.at(c, std::size_t(std::clamp(y + t, 0L, h - 1)), std::size_t(x));
        }
        out.at(c, std::size_t(y), std::size_t(x)) = float(acc);
      }
    }
  }
  out.clamp01();
  return out;
}

Image synth_lowlight(const Image& clean, double gamma, double scale) {
  if (!(gamma >= 1.0)) throw ArgumentError("synth_lowlight: gamma must be >= 1");
  if (!(scale > 0.0 && scale <= 1.0)) throw ArgumentError("synth_lowlight: scale must be in (0,1]");
  Image out = clean;
  for (auto& v : out.data) v = float(scale * std::pow(std::clamp(double(v), 0.0, 1.0), gamma));
  return out;
}

Image crop(const Image& image, std::size_t y0, std::size_t x0, std::size_t height, std::size_t width) {
  if (y0 + height > image.height || x0 + width > image.width) {
    throw ArgumentError("crop: window exceeds image bounds");
  }
  Image out(height, width);
  for (std::size_t c = 0; c < Image::kChannels; ++c)
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) out.at(c, y, x) = image.at(c, y0 + y, x0 + x);
  return out;
}

Image flip(const Image& image, Flip mode) {
  if (mode == Flip::none) return image;
  Image out(image.height, image.width);
  for (std::size_t c = 0; c < Image::kChannels; ++c) {
    for (std::size_t y = 0; y < image.height; ++y) {
      for (std::size_t x = 0; x < image.width; ++x) {
        const std::size_t sy = mode == Flip::vertical ? image.height - 1 - y : y;
        const std::size_t sx = mode == Flip::horizontal ? image.width - 1 - x : x;
        out.at(c, y, x) = image.at(c, sy, sx);
      }
    }
  }
  return out;
}

ImagePair random_crop_flip(const ImagePair& pair, std::size_t crop_size, std::uint64_t seed, bool allow_flip) {
  if (!pair.clean.same_shape(pair.degraded)) throw ArgumentError("random_crop_flip: pair members differ in shape");
  if (crop_size == 0 || crop_size > pair.clean.height || crop_size > pair.clean.width) {
    throw ArgumentError("random_crop_flip: crop " + std::to_string(crop_size) + " larger than image " +
                        std::to_string(pair.clean.height) + "x" + std::to_string(pair.clean.width));
  }
  Stream rng(seed);
  const std::size_t y0 = rng.index(pair.clean.height - crop_size + 1);
  const std::size_t x0 = rng.index(pair.clean.width - crop_size + 1);
  Flip mode = Flip::none;
  if (allow_flip) {
    static constexpr Flip kModes[] = {Flip::none, Flip::horizontal, Flip::vertical};
    mode = kModes[rng.index(3)];
  }
  ImagePair out;
  out.task = pair.task;
  out.clean = flip(crop(pair.clean, y0, x0, crop_size, crop_size), mode);
  out.degraded = flip(crop(pair.degraded, y0, x0, crop_size, crop_size), mode);
  return out;
}

void DatasetSpec::validate() const {
  if (tasks.empty()) throw UsageError("dataset: no tasks selected");
  if (crop_size == 0) throw UsageError("dataset: crop size must be positive");
  if (source == "procedural" && crop_size > image_size) {
    throw UsageError("dataset: crop size " + std::to_string(crop_size) + " exceeds image size " +
                     std::to_string(image_size));
  }
  if (params.noise_sigmas.empty()) throw UsageError("dataset: empty noise sigma list");
  if (params.rain_streaks_max < params.rain_streaks_min) throw UsageError("dataset: rain streak range inverted");
}

Image procedural_image(std::size_t size, std::uint64_t seed) {
  using Color = std::array<double, 3>;
  Stream rng(seed);
  Image img(size, size);
  auto color = [&rng]() { return Color{rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)}; };
  auto put = [&img](std::size_t y, std::size_t x, const Color& c0, const Color& c1, double t) {
    for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = float(c0[c] * (1.0 - t) + c1[c] * t);
  };
  const double n = double(size);

  // smooth base layer
  if (rng.index(2) == 0) {  // linear gradient
    const auto a = color(), b = color();
    const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi), ct = std::cos(theta), st = std::sin(theta);
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double t = std::clamp(0.5 + ((double(x) - n / 2) * ct + (double(y) - n / 2) * st) / n, 0.0, 1.0);
        put(y, x, a, b, t);
      }
  } else {  // value noise: bilinear interpolation of a coarse grid
    const std::size_t grid = 2 + rng.index(4);
    std::vector<double> coarse((grid + 1) * (grid + 1) * 3);
    for (auto& v : coarse) v = rng.uniform(0.1, 0.9);
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double gy = double(y) / n * double(grid), gx = double(x) / n * double(grid);
        const auto iy = std::size_t(gy), ix = std::size_t(gx);
        const double fy = gy - double(iy), fx = gx - double(ix);
        for (std::size_t c = 0; c < 3; ++c) {
          auto at = [&](std::size_t yy, std::size_t xx) { return coarse[(yy * (grid + 1) + xx) * 3 + c]; };
          const double top = at(iy, ix) * (1 - fx) + at(iy, ix + 1) * fx;
          const double bottom = at(iy + 1, ix) * (1 - fx) + at(iy + 1, ix + 1) * fx;
          img.at(c, y, x) = float(top * (1 - fy) + bottom * fy);
        }
      }
  }

  // sharp-edged foreground objects
  const std::size_t objects = 1 + rng.index(4);
  for (std::size_t o = 0; o < objects; ++o) {
    const auto a = color(), b = color();
    const double cx = rng.uniform(0.0, n), cy = rng.uniform(0.0, n);
    const double r = rng.uniform(n / 8, n / 3);
    const double theta = rng.uniform(0.0, std::numbers::pi), ct = std::cos(theta), st = std::sin(theta);
    const std::size_t shape = rng.index(2);  // disc or rotated square
    const std::size_t fill = rng.index(3);   // flat, checkerboard, sinusoidal stripes
    const std::size_t cell = 2 + rng.index(6);
    const double period = rng.uniform(3.0, 10.0);
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double dx = double(x) - cx, dy = double(y) - cy;
        const double u = dx * ct + dy * st, v = -dx * st + dy * ct;
        const bool inside = shape == 0 ? std::hypot(dx, dy) <= r : std::max(std::abs(u), std::abs(v)) <= r * 0.8;
        if (!inside) continue;
        double t = 0.0;
        if (fill == 1) {
          t = double((long(std::floor(u / double(cell))) + long(std::floor(v / double(cell)))) & 1);
        } else if (fill == 2) {
          t = 0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * u / period);
        }
        put(y, x, a, b, t);
      }
  }
  img.clamp01();
  return img;
}

SampleSource::SampleSource(const DatasetSpec& spec) : spec_(spec) {
  spec_.validate();
  if (spec_.source == "procedural") return;
  namespace fs = std::filesystem;
  if (!fs::is_directory(spec_.source)) throw DataError("dataset source '" + spec_.source + "' is not a directory");
  std::vector<fs::path> paths;
  for (const auto& entry : fs::directory_iterator(spec_.source)) {
    if (entry.is_regular_file() && entry.path().extension() == ".png") paths.push_back(entry.path());
  }
  std::sort(paths.begin(), paths.end());
  for (const auto& p : paths) {
    Image img = load_image(p.string());
    if (img.height < spec_.crop_size || img.width < spec_.crop_size) {
      throw DataError("image '" + p.string() + "' is smaller than the crop size");
    }
    files_.push_back(std::move(img));
  }
  if (files_.empty()) throw DataError("dataset source '" + spec_.source + "' contains no PNG files");
}

Image SampleSource::source_image(std::uint64_t key) const {
  if (files_.empty()) return procedural_image(spec_.image_size, key);
  return files_[hash64(key, 1) % files_.size()];
}

Image SampleSource::apply(const Image& clean, Task task, std::uint64_t key) const {
  Stream rng(hash64(key, 2));
  const auto& p = spec_.params;
  switch (task) {
    case Task::noise:
      return add_gaussian_noise(clean, p.noise_sigmas[rng.index(p.noise_sigmas.size())], rng.next_key());
    case Task::rain: {
      const std::size_t streaks = p.rain_streaks_min + rng.index(p.rain_streaks_max - p.rain_streaks_min + 1);
      const double angle = rng.uniform(p.rain_angle_min, p.rain_angle_max);
      return synth_rain(clean, streaks, angle, p.rain_intensity, rng.next_key(), p.rain_length_min, p.rain_length_max);
    }
    case Task::haze:
      return synth_haze(clean, rng.uniform(p.haze_t_min, p.haze_t_max), rng.uniform(p.airlight_min, p.airlight_max));
    case Task::blur:
      return synth_blur(clean, rng.uniform(p.blur_sigma_min, p.blur_sigma_max));
    case Task::lowlight:
      return synth_lowlight(clean, rng.uniform(p.lowlight_gamma_min, p.lowlight_gamma_max),
                            rng.uniform(p.lowlight_scale_min, p.lowlight_scale_max));
  }
  throw ArgumentError("unknown task");
}

ImagePair SampleSource::sample(std::size_t index) const {
  const std::uint64_t key = hash64(spec_.seed, index);
  const Task task = spec_.tasks[hash64(key, 3) % spec_.tasks.size()];
  return sample(index, task);
}

ImagePair SampleSource::sample(std::size_t index, Task task) const {
  const std::uint64_t key = hash64(spec_.seed, index);
  ImagePair pair;
  pair.task = task;
  pair.clean = source_image(key);
  pair.degraded = apply(pair.clean, task, key);
  const bool needs_crop = pair.clean.height != spec_.crop_size || pair.clean.width != spec_.crop_size;
  if (needs_crop || spec_.flip) pair = random_crop_flip(pair, spec_.crop_size, hash64(key, 4), spec_.flip);
  return pair;
}

}  // namespace meas::degrade
