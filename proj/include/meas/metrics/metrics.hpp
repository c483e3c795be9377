#pragma once

#include <span>
#include <vector>

#include "meas/degrade/image.hpp"

namespace meas::metrics {

/// 10*log10(1/MSE), peak 1. Identical images give +infinity.
double psnr(const degrade::Image& a, const degrade::Image& b);
/// Same on raw intensity arrays.
double psnr(std::span<const double> a, std::span<const double> b);

/// Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), C1 = 0.01^2,
/// C2 = 0.03^2, mean over the valid window positions of each channel, then
/// averaged over channels.
double ssim(const degrade::Image& a, const degrade::Image& b);

inline constexpr std::size_t kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

/// Normalized 1-D taps of the SSIM window; the 2-D window is their outer product.
std::vector<double> ssim_window_1d();

}  // namespace meas::metrics
