#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <type_traits>

// Dense row-major building blocks. Loops are written so the compiler can
// vectorize the innermost dimension without reassociating reductions, which
// keeps every result bit-reproducible.
namespace meas::kernels {

template <typename T>
inline void axpy(std::size_t n, T a, const T* x, T* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

template <typename T>
inline T dot(std::size_t n, const T* x, const T* y) {
  constexpr std::size_t kLanes = 16;
  T acc[kLanes] = {};
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes) {
    for (std::size_t l = 0; l < kLanes; ++l) acc[l] += x[i + l] * y[i + l];
  }
  T tail = 0;
  for (; i < n; ++i) tail += x[i] * y[i];
  for (std::size_t w = kLanes / 2; w > 0; w /= 2) {
    for (std::size_t l = 0; l < w; ++l) acc[l] += acc[l + w];
  }
  return acc[0] + tail;
}

template <typename T>
inline T row_sum(std::size_t n, const T* x) {
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) s += x[i];
  return s;
}

// Fixed 16-lane tree reduction; same order on every run.
template <typename T>
inline T lane_sum(std::size_t n, const T* x) {
  constexpr std::size_t kLanes = 16;
  T acc[kLanes] = {};
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes) {
    for (std::size_t l = 0; l < kLanes; ++l) acc[l] += x[i + l];
  }
  T tail = 0;
  for (; i < n; ++i) tail += x[i];
  for (std::size_t w = kLanes / 2; w > 0; w /= 2) {
    for (std::size_t l = 0; l < w; ++l) acc[l] += acc[l + w];
  }
  return acc[0] + tail;
}

template <typename T>
inline T lane_max(std::size_t n, const T* x) {
  constexpr std::size_t kLanes = 16;
  if (n < kLanes) {
    T m = x[0];
    for (std::size_t i = 1; i < n; ++i) m = x[i] > m ? x[i] : m;
    return m;
  }
  T acc[kLanes];
  for (std::size_t l = 0; l < kLanes; ++l) acc[l] = x[l];
  std::size_t i = kLanes;
  for (; i + kLanes <= n; i += kLanes) {
    for (std::size_t l = 0; l < kLanes; ++l) acc[l] = x[i + l] > acc[l] ? x[i + l] : acc[l];
  }
  T m = acc[0];
  for (std::size_t l = 1; l < kLanes; ++l) m = acc[l] > m ? acc[l] : m;
  for (; i < n; ++i) m = x[i] > m ? x[i] : m;
  return m;
}

// y[i] = exp(x[i] - shift) for arguments <= 0 (softmax numerators).
// float: Cody-Waite reduction plus a degree-6 polynomial, max relative error
// about 2e-7, written branch-free so the loop vectorizes.
inline void exp_shifted(std::size_t n, const float* x, float shift, float* y) {
  constexpr float kLog2e = 1.44269504088896341f;
  constexpr float kLn2Hi = 0.693359375f;
  constexpr float kLn2Lo = -2.12194440e-4f;
  constexpr float kRound = 12582912.0f;  // 1.5 * 2^23
  for (std::size_t i = 0; i < n; ++i) {
    float v = x[i] - shift;
    v = v < -87.0f ? -87.0f : v;  // keeps the exponent field normal
    const float t = v * kLog2e + kRound;
    const float k = t - kRound;
    const float r = v - k * kLn2Hi - k * kLn2Lo;
    float p = 1.9875691500e-4f;
    p = p * r + 1.3981999507e-3f;
    p = p * r + 8.3334519073e-3f;
    p = p * r + 4.1665795894e-2f;
    p = p * r + 1.6666665459e-1f;
    p = p * r + 5.0000001201e-1f;
    const float e = p * r * r + r + 1.0f;
    const std::int32_t bits = (static_cast<std::int32_t>(k) + 127) << 23;
    float scale;
    std::memcpy(&scale, &bits, sizeof(scale));
    y[i] = e * scale;
  }
}

inline void exp_shifted(std::size_t n, const double* x, double shift, double* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] = std::exp(x[i] - shift);
}

// Y[M,N] += A[M,K] * B[K,N]
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* y) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) axpy(n, a[i * k + p], b + p * n, y + i * n);
  }
}

// Y[K,N] += A[M,K]^T * B[M,N]
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* y) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) axpy(n, a[i * k + p], b + i * n, y + p * n);
  }
}

// Y[M,K] += A[M,N] * B[K,N]^T
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* y) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) y[i * k + p] += dot(n, a + i * n, b + p * n);
  }
}

}  // namespace meas::kernels
