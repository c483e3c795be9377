#include "meas/metrics/metrics.hpp"

#include <cmath>
#include <limits>

#include "meas/numerics/errors.hpp"

namespace meas::metrics {

namespace {

void require_same_shape(const char* op, const degrade::Image& a, const degrade::Image& b) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": images differ in size (" + std::to_string(a.height) + "x" +
                     std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" + std::to_string(b.width) + ")");
  }
}

// Valid-mode separable filtering of one plane: [h,w] -> [h-10, w-10].
std::vector<double> filter_valid(const std::vector<double>& plane, std::size_t h, std::size_t w,
                                 const std::vector<double>& taps) {
  const std::size_t n = taps.size(), oh = h - n + 1, ow = w - n + 1;
  std::vector<double> rows(h * ow, 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (std::size_t t = 0; t < n; ++t) acc += taps[t] * plane[y * w + x + t];
      rows[y * ow + x] = acc;
    }
  std::vector<double> out(oh * ow, 0.0);
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (std::size_t t = 0; t < n; ++t) acc += taps[t] * rows[(y + t) * ow + x];
      out[y * ow + x] = acc;
    }
  return out;
}

}  // namespace

double psnr(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("psnr: arrays differ in length");
  if (a.empty()) throw ShapeError("psnr: empty images");
  double sse = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    sse += d * d;
  }
  if (sse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(double(a.size()) / sse);
}

double psnr(const degrade::Image& a, const degrade::Image& b) {
  require_same_shape("psnr", a, b);
  const std::vector<double> x(a.data.begin(), a.data.end()), y(b.data.begin(), b.data.end());
  return psnr(std::span<const double>(x), std::span<const double>(y));
}

std::vector<double> ssim_window_1d() {
  std::vector<double> taps(kSsimWindow);
  const double r = double(kSsimWindow / 2);
  double total = 0.0;
  for (std::size_t i = 0; i < kSsimWindow; ++i) {
    const double d = double(i) - r;
    taps[i] = std::exp(-d * d / (2.0 * kSsimSigma * kSsimSigma));
    total += taps[i];
  }
  for (auto& t : taps) t /= total;
  return taps;
}

double ssim(const degrade::Image& a, const degrade::Image& b) {
  require_same_shape("ssim", a, b);
  if (a.height < kSsimWindow || a.width < kSsimWindow) {
    throw ShapeError("ssim: images must be at least " + std::to_string(kSsimWindow) + "x" +
                     std::to_string(kSsimWindow));
  }
  const auto taps = ssim_window_1d();
  const std::size_t h = a.height, w = a.width, plane = h * w;
  double total = 0.0;
  for (std::size_t c = 0; c < degrade::Image::kChannels; ++c) {
    std::vector<double> x(plane), y(plane), xx(plane), yy(plane), xy(plane);
    for (std::size_t i = 0; i < plane; ++i) {
      x[i] = a.data[c * plane + i];
      y[i] = b.data[c * plane + i];
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mx = filter_valid(x, h, w, taps), my = filter_valid(y, h, w, taps);
    const auto sxx = filter_valid(xx, h, w, taps), syy = filter_valid(yy, h, w, taps), sxy = filter_valid(xy, h, w, taps);
    double sum = 0.0;
    for (std::size_t i = 0; i < mx.size(); ++i) {
      const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cxy = sxy[i] - mx[i] * my[i];
      sum += ((2 * (mx[i] * my[i]) + kSsimC1) * (2 * cxy + kSsimC2)) /
             ((mx[i] * mx[i] + my[i] * my[i] + kSsimC1) * (vx + vy + kSsimC2));
    }
    total += sum / double(mx.size());
  }
  return total / double(degrade::Image::kChannels);
}

}  // namespace meas::metrics
