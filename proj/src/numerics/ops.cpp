#include "meas/numerics/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "kernels.hpp"

namespace meas {

namespace {

using kernels::axpy;
using kernels::dot;

template <typename T>
std::span<T> grad_of(const Tensor<T>& t) {
  if (!t.defined() || !t.requires_grad()) return {};
  return t.grad_mut();
}

template <typename T>
bool recording(std::initializer_list<const Tensor<T>*> inputs) {
  if (!grad_enabled()) return false;
  for (const auto* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

template <typename T>
void require_rank(const char* op, const Tensor<T>& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
  }
}

template <typename T>
void require_vector(const char* op, const Tensor<T>& t, std::size_t n) {
  if (t.defined() && (t.rank() != 1 || t.dim(0) != n)) {
    throw ShapeError(std::string(op) + ": expected vector of length " + std::to_string(n) +
                     ", got " + shape_str(t.shape()));
  }
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

template <typename T>
inline T gelu_value(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(kInvSqrt2)));
}

template <typename T>
inline T gelu_derivative(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(kInvSqrt2)));
  return cdf + x * T(kInvSqrt2Pi) * std::exp(T(-0.5) * x * x);
}

// In-place max-subtracted softmax over a contiguous row.
template <typename T>
void softmax_row(std::size_t n, T* row) {
  const T peak = kernels::lane_max(n, row);
  kernels::exp_shifted(n, row, peak, row);
  const T inv = T(1) / kernels::lane_sum(n, row);
  for (std::size_t i = 0; i < n; ++i) row[i] *= inv;
}

// ---------------------------------------------------------------------------
// Position-wise MLP on a [C, n] column block.

template <typename T>
struct MlpCache {
  std::vector<T> pre;  // [hidden, n]
  std::vector<T> act;  // [hidden, n]
};

template <typename T>
void mlp_forward(const MlpParams<T>& p, std::size_t channels, std::size_t hidden, std::size_t n,
                 const T* x, T* y, MlpCache<T>& cache) {
  cache.pre.assign(hidden * n, T(0));
  cache.act.resize(hidden * n);
  const T* w1 = p.w1.data().data();
  const T* b1 = p.b1.data().data();
  const T* w2 = p.w2.data().data();
  const T* b2 = p.b2.data().data();
  for (std::size_t h = 0; h < hidden; ++h) std::fill_n(cache.pre.data() + h * n, n, b1[h]);
  kernels::gemm_nn(hidden, n, channels, w1, x, cache.pre.data());
  for (std::size_t i = 0; i < hidden * n; ++i) cache.act[i] = gelu_value(cache.pre[i]);
  for (std::size_t c = 0; c < channels; ++c) {
    T* row = y + c * n;
    for (std::size_t i = 0; i < n; ++i) row[i] += b2[c];
  }
  kernels::gemm_nn(channels, n, hidden, w2, cache.act.data(), y);
}

template <typename T>
void mlp_backward(const MlpParams<T>& p, std::size_t channels, std::size_t hidden, std::size_t n,
                  const T* x, const T* dy, const MlpCache<T>& cache, T* dx) {
  const T* w1 = p.w1.data().data();
  const T* w2 = p.w2.data().data();
  std::vector<T> dpre(hidden * n, T(0));
  kernels::gemm_tn(channels, n, hidden, w2, dy, dpre.data());
  if (auto g = grad_of(p.w2); !g.empty()) {
    kernels::gemm_nt(channels, n, hidden, dy, cache.act.data(), g.data());
  }
  if (auto g = grad_of(p.b2); !g.empty()) {
    for (std::size_t c = 0; c < channels; ++c) g[c] += kernels::row_sum(n, dy + c * n);
  }
  for (std::size_t i = 0; i < hidden * n; ++i) dpre[i] *= gelu_derivative(cache.pre[i]);
  if (auto g = grad_of(p.w1); !g.empty()) {
    kernels::gemm_nt(hidden, n, channels, dpre.data(), x, g.data());
  }
  if (auto g = grad_of(p.b1); !g.empty()) {
    for (std::size_t h = 0; h < hidden; ++h) g[h] += kernels::row_sum(n, dpre.data() + h * n);
  }
  if (dx != nullptr) kernels::gemm_tn(hidden, n, channels, w1, dpre.data(), dx);
}

template <typename T>
std::size_t validate_mlp(const char* op, const MlpParams<T>& p, std::size_t channels) {
  require_rank(op, p.w1, 2);
  require_rank(op, p.w2, 2);
  const std::size_t hidden = p.w1.dim(0);
  if (p.w1.dim(1) != channels || p.w2.dim(0) != channels || p.w2.dim(1) != hidden) {
    throw ShapeError(std::string(op) + ": MLP weights " + shape_str(p.w1.shape()) + ", " +
                     shape_str(p.w2.shape()) + " do not fit " + std::to_string(channels) +
                     " channels");
  }
  require_vector(op, p.b1, hidden);
  require_vector(op, p.b2, channels);
  return hidden;
}

// Shared convolution path for k x k and 1x1 kernels.
template <typename T>
Tensor<T> conv_impl(const char* op, const Tensor<T>& x, const Tensor<T>& weight,
                    const Tensor<T>& bias, std::size_t k) {
  const std::size_t batch = x.dim(0), cin = x.dim(1), height = x.dim(2), width = x.dim(3);
  const std::size_t cout = weight.dim(0);
  const std::size_t hw = height * width;
  const std::size_t rows = cin * k * k;
  const std::size_t pad = k / 2;
  const bool rec = recording({&x, &weight, &bias});

  std::vector<T> out(batch * cout * hw, T(0));
  // im2col buffers, kept for the backward pass when k > 1.
  std::vector<T> cols(k > 1 ? batch * rows * hw : 0, T(0));
  const T* xd = x.data().data();
  const T* wd = weight.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    const T* src = xd + b * cin * hw;
    const T* lhs = src;
    if (k > 1) {
      T* col = cols.data() + b * rows * hw;
      for (std::size_t ci = 0; ci < cin; ++ci) {
        for (std::size_t ky = 0; ky < k; ++ky) {
          for (std::size_t kx = 0; kx < k; ++kx) {
            T* dst = col + ((ci * k + ky) * k + kx) * hw;
            for (std::size_t y = 0; y < height; ++y) {
              const std::ptrdiff_t sy = std::ptrdiff_t(y + ky) - std::ptrdiff_t(pad);
              if (sy < 0 || sy >= std::ptrdiff_t(height)) continue;
              const std::ptrdiff_t shift = std::ptrdiff_t(kx) - std::ptrdiff_t(pad);
              const std::size_t x0 = shift < 0 ? std::size_t(-shift) : 0;
              const std::size_t x1 = shift > 0 ? width - std::min(width, std::size_t(shift)) : width;
              for (std::size_t xx = x0; xx < x1; ++xx) {
                dst[y * width + xx] = src[(ci * height + std::size_t(sy)) * width + xx + shift];
              }
            }
          }
        }
      }
      lhs = col;
    }
    T* dst = out.data() + b * cout * hw;
    if (bias.defined()) {
      for (std::size_t o = 0; o < cout; ++o) std::fill_n(dst + o * hw, hw, bias.data()[o]);
    }
    kernels::gemm_nn(cout, hw, rows, wd, lhs, dst);
  }

  std::function<void(const Node<T>&)> bw;
  if (rec) {
    bw = [x, weight, bias, k, cols = std::move(cols), batch, cin, cout, height, width, hw, rows,
          pad](const Node<T>& self) {
      const T* gy = self.grad.data();
      auto gx = grad_of(x);
      auto gw = grad_of(weight);
      auto gb = grad_of(bias);
      std::vector<T> dcols(rows * hw);
      for (std::size_t b = 0; b < batch; ++b) {
        const T* dy = gy + b * cout * hw;
        const T* lhs = k > 1 ? cols.data() + b * rows * hw : x.data().data() + b * cin * hw;
        if (!gw.empty()) kernels::gemm_nt(cout, hw, rows, dy, lhs, gw.data());
        if (!gb.empty()) {
          for (std::size_t o = 0; o < cout; ++o) gb[o] += kernels::row_sum(hw, dy + o * hw);
        }
        if (gx.empty()) continue;
        T* dx = gx.data() + b * cin * hw;
        if (k == 1) {
          kernels::gemm_tn(cout, hw, rows, weight.data().data(), dy, dx);
          continue;
        }
        std::fill(dcols.begin(), dcols.end(), T(0));
        kernels::gemm_tn(cout, hw, rows, weight.data().data(), dy, dcols.data());
        for (std::size_t ci = 0; ci < cin; ++ci) {
          for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
              const T* src = dcols.data() + ((ci * k + ky) * k + kx) * hw;
              for (std::size_t y = 0; y < height; ++y) {
                const std::ptrdiff_t sy = std::ptrdiff_t(y + ky) - std::ptrdiff_t(pad);
                if (sy < 0 || sy >= std::ptrdiff_t(height)) continue;
                const std::ptrdiff_t shift = std::ptrdiff_t(kx) - std::ptrdiff_t(pad);
                const std::size_t x0 = shift < 0 ? std::size_t(-shift) : 0;
                const std::size_t x1 = shift > 0 ? width - std::min(width, std::size_t(shift)) : width;
                for (std::size_t xx = x0; xx < x1; ++xx) {
                  dx[(ci * height + std::size_t(sy)) * width + xx + shift] += src[y * width + xx];
                }
              }
            }
          }
        }
      }
    };
  }
  return detail::make_result<T>(op, {batch, cout, height, width}, std::move(out),
                                {x, weight, bias}, std::move(bw));
}

template <typename T>
Tensor<T> elementwise_binary(const char* op, const Tensor<T>& a, const Tensor<T>& b, int kind) {
  require_same_shape(op, a, b);
  const std::size_t n = a.numel();
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  std::vector<T> out(n);
  switch (kind) {
    case 0: for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] + bd[i]; break;
    case 1: for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] - bd[i]; break;
    case 2: for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] * bd[i]; break;
    default: for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] / bd[i]; break;
  }
  return detail::make_result<T>(op, a.shape(), std::move(out), {a, b}, [a, b, kind](const Node<T>& self) {
    const auto& g = self.grad;
    auto ga = grad_of(a);
    auto gb = grad_of(b);
    const auto av = a.data();
    const auto bv = b.data();
    switch (kind) {
      case 0:
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i];
        break;
      case 1:
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
        break;
      case 2:
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv[i];
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av[i];
        break;
      default:
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] / bv[i];
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
        break;
    }
  });
}

template <typename T, typename F, typename D>
Tensor<T> elementwise_unary(const char* op, const Tensor<T>& a, F value, D derivative) {
  const auto in = a.data();
  std::vector<T> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = value(in[i]);
  return detail::make_result<T>(op, a.shape(), std::move(out), {a}, [a, derivative](const Node<T>& self) {
    auto ga = grad_of(a);
    const auto in = a.data();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * derivative(in[i]);
  });
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return elementwise_binary("add", a, b, 0); }
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return elementwise_binary("sub", a, b, 1); }
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return elementwise_binary("mul", a, b, 2); }
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) { return elementwise_binary("div", a, b, 3); }

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return elementwise_unary("scale", a, [factor](T v) { return v * factor; },
                           [factor](T) { return factor; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T value) {
  return elementwise_unary("add_scalar", a, [value](T v) { return v + value; },
                           [](T) { return T(1); });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& a) {
  return elementwise_unary("abs", a, [](T v) { return std::abs(v); },
                           [](T v) { return v > 0 ? T(1) : (v < 0 ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  return elementwise_unary("gelu", a, [](T v) { return gelu_value(v); },
                           [](T v) { return gelu_derivative(v); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return elementwise_unary("relu", a, [](T v) { return v > 0 ? v : T(0); },
                           [](T v) { return v > 0 ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  return detail::make_result<T>("reshape", std::move(shape), std::move(out), {a}, [a](const Node<T>& self) {
    auto ga = grad_of(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_rank("transpose", a, 2);
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  std::vector<T> out(a.numel());
  const auto in = a.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = in[r * cols + c];
  return detail::make_result<T>("transpose", {cols, rows}, std::move(out), {a}, [a, rows, cols](const Node<T>& self) {
    auto ga = grad_of(a);
    if (ga.empty()) return;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += self.grad[c * rows + r];
  });
}

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  for (const auto& p : parts) require_rank("concat_channels", p, 4);
  const std::size_t batch = parts[0].dim(0), height = parts[0].dim(2), width = parts[0].dim(3);
  const std::size_t hw = height * width;
  std::size_t channels = 0;
  for (const auto& p : parts) {
    if (p.dim(0) != batch || p.dim(2) != height || p.dim(3) != width) {
      throw ShapeError("concat_channels: " + shape_str(p.shape()) + " incompatible with " +
                       shape_str(parts[0].shape()));
    }
    channels += p.dim(1);
  }
  std::vector<T> out(batch * channels * hw);
  for (std::size_t b = 0; b < batch; ++b) {
    std::size_t offset = 0;
    for (const auto& p : parts) {
      const std::size_t c = p.dim(1);
      std::copy_n(p.data().data() + b * c * hw, c * hw, out.data() + (b * channels + offset) * hw);
      offset += c;
    }
  }
  return detail::make_result<T>("concat_channels", {batch, channels, height, width}, std::move(out), parts,
                                [parts, batch, channels, hw](const Node<T>& self) {
    for (std::size_t b = 0; b < batch; ++b) {
      std::size_t offset = 0;
      for (const auto& p : parts) {
        const std::size_t c = p.dim(1);
        if (auto g = grad_of(p); !g.empty()) {
          const T* src = self.grad.data() + (b * channels + offset) * hw;
          T* dst = g.data() + b * c * hw;
          for (std::size_t i = 0; i < c * hw; ++i) dst[i] += src[i];
        }
        offset += c;
      }
    }
  });
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  require_rank("slice_channels", x, 4);
  const std::size_t batch = x.dim(0), channels = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (begin >= end || end > channels) {
    throw ShapeError("slice_channels: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for " + shape_str(x.shape()));
  }
  const std::size_t n = end - begin;
  std::vector<T> out(batch * n * hw);
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy_n(x.data().data() + (b * channels + begin) * hw, n * hw, out.data() + b * n * hw);
  }
  return detail::make_result<T>("slice_channels", {batch, n, x.dim(2), x.dim(3)}, std::move(out), {x},
                                [x, batch, channels, hw, begin, n](const Node<T>& self) {
    auto gx = grad_of(x);
    for (std::size_t b = 0; b < batch; ++b) {
      T* dst = gx.data() + (b * channels + begin) * hw;
      const T* src = self.grad.data() + b * n * hw;
      for (std::size_t i = 0; i < n * hw; ++i) dst[i] += src[i];
    }
  });
}

template <typename T>
Tensor<T> slice_batch(const Tensor<T>& x, std::size_t index) {
  if (x.rank() == 0 || index >= x.dim(0)) {
    throw ShapeError("slice_batch: index " + std::to_string(index) + " out of range for " +
                     shape_str(x.shape()));
  }
  const std::size_t row = x.numel() / x.dim(0);
  std::vector<T> out(x.data().begin() + index * row, x.data().begin() + (index + 1) * row);
  Shape shape = x.shape();
  shape[0] = 1;
  return detail::make_result<T>("slice_batch", std::move(shape), std::move(out), {x},
                                [x, index, row](const Node<T>& self) {
    auto gx = grad_of(x);
    for (std::size_t i = 0; i < row; ++i) gx[index * row + i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = 0;
  for (T v : a.data()) total += v;
  return detail::make_result<T>("sum", {1}, {total}, {a}, [a](const Node<T>& self) {
    auto ga = grad_of(a);
    for (auto& g : ga) g += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  T total = 0;
  for (T v : a.data()) total += v;
  const T n = T(a.numel());
  return detail::make_result<T>("mean", {1}, {total / n}, {a}, [a, n](const Node<T>& self) {
    auto ga = grad_of(a);
    for (auto& g : ga) g += self.grad[0] / n;
  });
}

template <typename T>
Tensor<T> std_pop(const Tensor<T>& a) {
  const auto in = a.data();
  const T n = T(in.size());
  T mu = 0;
  for (T v : in) mu += v;
  mu /= n;
  T var = 0;
  for (T v : in) var += (v - mu) * (v - mu);
  var /= n;
  const T sigma = std::sqrt(var);
  return detail::make_result<T>("std_pop", {1}, {sigma}, {a}, [a, mu, sigma, n](const Node<T>& self) {
    auto ga = grad_of(a);
    // Zero spread: the derivative does not exist; use the zero subgradient.
    if (ga.empty() || sigma == T(0)) return;
    const auto in = a.data();
    const T coef = self.grad[0] / (n * sigma);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += coef * (in[i] - mu);
  });
}

// ---------------------------------------------------------------------------
// Dense algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<T> out(m * n, T(0));
  kernels::gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data());
  return detail::make_result<T>("matmul", {m, n}, std::move(out), {a, b}, [a, b, m, n, k](const Node<T>& self) {
    if (auto ga = grad_of(a); !ga.empty()) kernels::gemm_nt(m, n, k, self.grad.data(), b.data().data(), ga.data());
    if (auto gb = grad_of(b); !gb.empty()) kernels::gemm_tn(m, n, k, a.data().data(), self.grad.data(), gb.data());
  });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank("linear", x, 2);
  require_rank("linear", weight, 2);
  const std::size_t batch = x.dim(0), in = x.dim(1), out_features = weight.dim(0);
  if (weight.dim(1) != in) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
  }
  require_vector("linear", bias, out_features);
  std::vector<T> out(batch * out_features, T(0));
  if (bias.defined()) {
    for (std::size_t b = 0; b < batch; ++b) std::copy_n(bias.data().data(), out_features, out.data() + b * out_features);
  }
  kernels::gemm_nt(batch, in, out_features, x.data().data(), weight.data().data(), out.data());
  return detail::make_result<T>("linear", {batch, out_features}, std::move(out), {x, weight, bias},
                                [x, weight, bias, batch, in, out_features](const Node<T>& self) {
    const T* gy = self.grad.data();
    if (auto gx = grad_of(x); !gx.empty()) kernels::gemm_nn(batch, in, out_features, gy, weight.data().data(), gx.data());
    if (auto gw = grad_of(weight); !gw.empty()) kernels::gemm_tn(batch, in, out_features, gy, x.data().data(), gw.data());
    if (auto gb = grad_of(bias); !gb.empty()) {
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t o = 0; o < out_features; ++o) gb[o] += gy[b * out_features + o];
    }
  });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_str(x.shape()));
  }
  const auto& shape = x.shape();
  const std::size_t n = shape[axis];
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  std::vector<T> out(x.data().begin(), x.data().end());
  std::vector<T> row(n);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      T* base = out.data() + o * n * inner + i;
      for (std::size_t j = 0; j < n; ++j) row[j] = base[j * inner];
      softmax_row(n, row.data());
      for (std::size_t j = 0; j < n; ++j) base[j * inner] = row[j];
    }
  }
  return detail::make_result<T>("softmax", shape, std::move(out), {x}, [x, n, outer, inner](const Node<T>& self) {
    auto gx = grad_of(x);
    const T* y = self.data.data();
    const T* gy = self.grad.data();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * n * inner + i;
        T s = 0;
        for (std::size_t j = 0; j < n; ++j) s += y[base + j * inner] * gy[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t idx = base + j * inner;
          gx[idx] += y[idx] * (gy[idx] - s);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Spatial

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  require_rank("global_avg_pool", x, 4);
  const std::size_t batch = x.dim(0), channels = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (hw == 0) throw ShapeError("global_avg_pool: empty spatial extent");
  std::vector<T> out(batch * channels);
  for (std::size_t i = 0; i < batch * channels; ++i) {
    out[i] = kernels::row_sum(hw, x.data().data() + i * hw) / T(hw);
  }
  return detail::make_result<T>("global_avg_pool", {batch, channels, 1, 1}, std::move(out), {x},
                                [x, hw](const Node<T>& self) {
    auto gx = grad_of(x);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T g = self.grad[i] / T(hw);
      for (std::size_t p = 0; p < hw; ++p) gx[i * hw + p] += g;
    }
  });
}

template <typename T>
Tensor<T> broadcast_spatial(const Tensor<T>& x, std::size_t height, std::size_t width) {
  require_rank("broadcast_spatial", x, 2);
  if (height == 0 || width == 0) throw ShapeError("broadcast_spatial: empty target extent");
  const std::size_t rows = x.numel(), hw = height * width;
  std::vector<T> out(rows * hw);
  for (std::size_t i = 0; i < rows; ++i) std::fill_n(out.data() + i * hw, hw, x.data()[i]);
  return detail::make_result<T>("broadcast_spatial", {x.dim(0), x.dim(1), height, width}, std::move(out), {x},
                                [x, rows, hw](const Node<T>& self) {
    auto gx = grad_of(x);
    for (std::size_t i = 0; i < rows; ++i) gx[i] += kernels::row_sum(hw, self.grad.data() + i * hw);
  });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank("conv2d", x, 4);
  require_rank("conv2d", weight, 4);
  const std::size_t k = weight.dim(2);
  if (weight.dim(1) != x.dim(1) || weight.dim(3) != k || k % 2 == 0) {
    throw ShapeError("conv2d: weight " + shape_str(weight.shape()) + " incompatible with input " +
                     shape_str(x.shape()) + " (square odd kernels only)");
  }
  require_vector("conv2d", bias, weight.dim(0));
  return conv_impl("conv2d", x, weight, bias, k);
}

template <typename T>
Tensor<T> pointwise_conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank("pointwise_conv2d", x, 4);
  require_rank("pointwise_conv2d", weight, 2);
  if (weight.dim(1) != x.dim(1)) {
    throw ShapeError("pointwise_conv2d: weight " + shape_str(weight.shape()) + " incompatible with input " +
                     shape_str(x.shape()));
  }
  require_vector("pointwise_conv2d", bias, weight.dim(0));
  return conv_impl("pointwise_conv2d", x, weight, bias, 1);
}

template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank("depthwise_conv2d", x, 4);
  const std::size_t batch = x.dim(0), channels = x.dim(1), height = x.dim(2), width = x.dim(3);
  const bool per_sample = weight.rank() == 4;
  if (!(weight.rank() == 3 || per_sample)) {
    throw ShapeError("depthwise_conv2d: weight must be [C,k,k] or [B,C,k,k], got " + shape_str(weight.shape()));
  }
  const std::size_t off = per_sample ? 1 : 0;
  const std::size_t k = weight.dim(off + 1);
  if (weight.dim(off) != channels || weight.dim(off + 2) != k || k % 2 == 0 ||
      (per_sample && weight.dim(0) != batch)) {
    throw ShapeError("depthwise_conv2d: weight " + shape_str(weight.shape()) + " incompatible with input " +
                     shape_str(x.shape()));
  }
  require_vector("depthwise_conv2d", bias, channels);
  const std::size_t hw = height * width, kk = k * k, pad = k / 2;

  // Visits every valid (output row, input row, x-range) for one kernel tap.
  auto for_tap = [height, width, pad](std::size_t ky, std::size_t kx, auto&& fn) {
    const std::ptrdiff_t shift = std::ptrdiff_t(kx) - std::ptrdiff_t(pad);
    const std::size_t x0 = shift < 0 ? std::size_t(-shift) : 0;
    const std::size_t x1 = shift > 0 ? width - std::min(width, std::size_t(shift)) : width;
    if (x0 >= x1) return;
    for (std::size_t y = 0; y < height; ++y) {
      const std::ptrdiff_t sy = std::ptrdiff_t(y + ky) - std::ptrdiff_t(pad);
      if (sy < 0 || sy >= std::ptrdiff_t(height)) continue;
      fn(y * width + x0, std::size_t(sy) * width + std::size_t(std::ptrdiff_t(x0) + shift), x1 - x0);
    }
  };

  std::vector<T> out(batch * channels * hw, T(0));
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      const T* src = x.data().data() + (b * channels + c) * hw;
      T* dst = out.data() + (b * channels + c) * hw;
      if (bias.defined()) std::fill_n(dst, hw, bias.data()[c]);
      const T* taps = weight.data().data() + ((per_sample ? b * channels : 0) + c) * kk;
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          const T w = taps[ky * k + kx];
          for_tap(ky, kx, [&](std::size_t o, std::size_t i, std::size_t n) { axpy(n, w, src + i, dst + o); });
        }
      }
    }
  }
  return detail::make_result<T>("depthwise_conv2d", x.shape(), std::move(out), {x, weight, bias},
                                [x, weight, bias, per_sample, batch, channels, hw, k, kk, for_tap](const Node<T>& self) {
    auto gx = grad_of(x);
    auto gw = grad_of(weight);
    auto gb = grad_of(bias);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t c = 0; c < channels; ++c) {
        const T* src = x.data().data() + (b * channels + c) * hw;
        const T* dy = self.grad.data() + (b * channels + c) * hw;
        if (!gb.empty()) gb[c] += kernels::row_sum(hw, dy);
        const std::size_t tap_base = ((per_sample ? b * channels : 0) + c) * kk;
        const T* taps = weight.data().data() + tap_base;
        T* dx = gx.empty() ? nullptr : gx.data() + (b * channels + c) * hw;
        for (std::size_t ky = 0; ky < k; ++ky) {
          for (std::size_t kx = 0; kx < k; ++kx) {
            const T w = taps[ky * k + kx];
            T gtap = 0;
            for_tap(ky, kx, [&](std::size_t o, std::size_t i, std::size_t n) {
              if (dx != nullptr) axpy(n, w, dy + o, dx + i);
              gtap += dot(n, dy + o, src + i);
            });
            if (!gw.empty()) gw[tap_base + ky * k + kx] += gtap;
          }
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BatchNormStats<T>& stats, bool training, T momentum, T eps) {
  if (x.rank() < 2) throw ShapeError("batch_norm: rank >= 2 required, got " + shape_str(x.shape()));
  const std::size_t batch = x.dim(0), channels = x.dim(1);
  const std::size_t inner = x.numel() / (batch * channels);
  require_vector("batch_norm", gamma, channels);
  require_vector("batch_norm", beta, channels);
  require_vector("batch_norm", stats.running_mean, channels);
  require_vector("batch_norm", stats.running_var, channels);
  const std::size_t count = batch * inner;
  if (training && count < 2) {
    throw ArgumentError("batch_norm: training mode needs more than one value per channel (got shape " +
                        shape_str(x.shape()) + ")");
  }
  const T* xd = x.data().data();
  std::vector<T> mu(channels), inv_std(channels);
  if (training) {
    auto rm = stats.running_mean.data_mut();
    auto rv = stats.running_var.data_mut();
    for (std::size_t c = 0; c < channels; ++c) {
      T s = 0;
      for (std::size_t b = 0; b < batch; ++b) s += kernels::row_sum(inner, xd + (b * channels + c) * inner);
      const T m = s / T(count);
      T v = 0;
      for (std::size_t b = 0; b < batch; ++b) {
        const T* row = xd + (b * channels + c) * inner;
        for (std::size_t i = 0; i < inner; ++i) v += (row[i] - m) * (row[i] - m);
      }
      const T biased = v / T(count);
      mu[c] = m;
      inv_std[c] = T(1) / std::sqrt(biased + eps);
      rm[c] = (T(1) - momentum) * rm[c] + momentum * m;
      rv[c] = (T(1) - momentum) * rv[c] + momentum * v / T(count - 1);
    }
  } else {
    for (std::size_t c = 0; c < channels; ++c) {
      mu[c] = stats.running_mean.data()[c];
      inv_std[c] = T(1) / std::sqrt(stats.running_var.data()[c] + eps);
    }
  }
  std::vector<T> xhat(x.numel()), out(x.numel());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t base = (b * channels + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        xhat[base + i] = (xd[base + i] - mu[c]) * inv_std[c];
        out[base + i] = gamma.data()[c] * xhat[base + i] + beta.data()[c];
      }
    }
  }
  return detail::make_result<T>("batch_norm", x.shape(), std::move(out), {x, gamma, beta},
                                [x, gamma, beta, training, batch, channels, inner, count,
                                 xhat = std::move(xhat), inv_std](const Node<T>& self) {
    auto gx = grad_of(x);
    auto gg = grad_of(gamma);
    auto gbeta = grad_of(beta);
    const T* gy = self.grad.data();
    for (std::size_t c = 0; c < channels; ++c) {
      T sum_g = 0, sum_gx = 0;
      for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t base = (b * channels + c) * inner;
        for (std::size_t i = 0; i < inner; ++i) {
          sum_g += gy[base + i];
          sum_gx += gy[base + i] * xhat[base + i];
        }
      }
      if (!gg.empty()) gg[c] += sum_gx;
      if (!gbeta.empty()) gbeta[c] += sum_g;
      if (gx.empty()) continue;
      const T g = gamma.data()[c];
      for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t base = (b * channels + c) * inner;
        for (std::size_t i = 0; i < inner; ++i) {
          if (training) {
            gx[base + i] += g * inv_std[c] / T(count) *
                            (T(count) * gy[base + i] - sum_g - xhat[base + i] * sum_gx);
          } else {
            gx[base + i] += g * inv_std[c] * gy[base + i];
          }
        }
      }
    }
  });
}

template <typename T>
Tensor<T> layer_norm_channels(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  require_rank("layer_norm_channels", x, 4);
  const std::size_t batch = x.dim(0), channels = x.dim(1), hw = x.dim(2) * x.dim(3);
  require_vector("layer_norm_channels", gamma, channels);
  require_vector("layer_norm_channels", beta, channels);
  std::vector<T> xhat(x.numel()), out(x.numel()), inv_std(batch * hw);
  std::vector<T> mu(hw), var(hw);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* src = x.data().data() + b * channels * hw;
    std::fill(mu.begin(), mu.end(), T(0));
    std::fill(var.begin(), var.end(), T(0));
    for (std::size_t c = 0; c < channels; ++c) axpy(hw, T(1), src + c * hw, mu.data());
    for (auto& m : mu) m /= T(channels);
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t p = 0; p < hw; ++p) {
        const T d = src[c * hw + p] - mu[p];
        var[p] += d * d;
      }
    }
    T* istd = inv_std.data() + b * hw;
    for (std::size_t p = 0; p < hw; ++p) istd[p] = T(1) / std::sqrt(var[p] / T(channels) + eps);
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t base = (b * channels + c) * hw;
      for (std::size_t p = 0; p < hw; ++p) {
        xhat[base + p] = (src[c * hw + p] - mu[p]) * istd[p];
        out[base + p] = gamma.data()[c] * xhat[base + p] + beta.data()[c];
      }
    }
  }
  return detail::make_result<T>("layer_norm_channels", x.shape(), std::move(out), {x, gamma, beta},
                                [x, gamma, beta, batch, channels, hw, xhat = std::move(xhat),
                                 inv_std = std::move(inv_std)](const Node<T>& self) {
    auto gx = grad_of(x);
    auto gg = grad_of(gamma);
    auto gbeta = grad_of(beta);
    const T* gy = self.grad.data();
    std::vector<T> sum_d(hw), sum_dx(hw);
    for (std::size_t b = 0; b < batch; ++b) {
      std::fill(sum_d.begin(), sum_d.end(), T(0));
      std::fill(sum_dx.begin(), sum_dx.end(), T(0));
      for (std::size_t c = 0; c < channels; ++c) {
        const std::size_t base = (b * channels + c) * hw;
        const T g = gamma.data()[c];
        if (!gg.empty()) gg[c] += dot(hw, gy + base, xhat.data() + base);
        if (!gbeta.empty()) gbeta[c] += kernels::row_sum(hw, gy + base);
        for (std::size_t p = 0; p < hw; ++p) {
          const T d = gy[base + p] * g;
          sum_d[p] += d;
          sum_dx[p] += d * xhat[base + p];
        }
      }
      if (gx.empty()) continue;
      const T* istd = inv_std.data() + b * hw;
      for (std::size_t c = 0; c < channels; ++c) {
        const std::size_t base = (b * channels + c) * hw;
        const T g = gamma.data()[c];
        for (std::size_t p = 0; p < hw; ++p) {
          const T d = gy[base + p] * g;
          gx[base + p] += istd[p] / T(channels) *
                          (T(channels) * d - sum_d[p] - xhat[base + p] * sum_dx[p]);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Attention

template <typename T>
Tensor<T> self_attention(const Tensor<T>& x, const Tensor<T>& w_qkv, const Tensor<T>& b_qkv,
                         const Tensor<T>& w_out, const Tensor<T>& b_out, std::size_t heads) {
  require_rank("self_attention", x, 4);
  const std::size_t batch = x.dim(0), channels = x.dim(1), tokens = x.dim(2) * x.dim(3);
  if (tokens == 0) throw ShapeError("self_attention: no tokens");
  if (heads == 0 || channels % heads != 0) {
    throw ShapeError("self_attention: " + std::to_string(channels) + " channels not divisible by " +
                     std::to_string(heads) + " heads");
  }
  require_rank("self_attention", w_qkv, 2);
  require_rank("self_attention", w_out, 2);
  if (w_qkv.dim(0) != 3 * channels || w_qkv.dim(1) != channels || w_out.dim(0) != channels ||
      w_out.dim(1) != channels) {
    throw ShapeError("self_attention: projection weights do not match " + std::to_string(channels) + " channels");
  }
  require_vector("self_attention", b_qkv, 3 * channels);
  require_vector("self_attention", b_out, channels);
  const bool rec = recording({&x, &w_qkv, &b_qkv, &w_out, &b_out});

  const std::size_t head_dim = channels / heads;
  const T scale_factor = T(1) / std::sqrt(T(head_dim));
  const std::size_t c3 = 3 * channels;
  const std::size_t probs_per_sample = heads * tokens * tokens;

  std::vector<T> qkv(batch * c3 * tokens, T(0));
  std::vector<T> attended(batch * channels * tokens, T(0));
  std::vector<T> probs(rec ? batch * probs_per_sample : tokens * tokens);
  std::vector<T> out(batch * channels * tokens, T(0));

  for (std::size_t b = 0; b < batch; ++b) {
    const T* xb = x.data().data() + b * channels * tokens;
    T* qkv_b = qkv.data() + b * c3 * tokens;
    for (std::size_t r = 0; r < c3; ++r) std::fill_n(qkv_b + r * tokens, tokens, b_qkv.data()[r]);
    kernels::gemm_nn(c3, tokens, channels, w_qkv.data().data(), xb, qkv_b);
    const T* q = qkv_b;
    const T* kmat = qkv_b + channels * tokens;
    const T* v = qkv_b + 2 * channels * tokens;
    T* o = attended.data() + b * channels * tokens;
    for (std::size_t h = 0; h < heads; ++h) {
      T* p = rec ? probs.data() + b * probs_per_sample + h * tokens * tokens : probs.data();
      for (std::size_t i = 0; i < tokens; ++i) {
        T* row = p + i * tokens;
        std::fill_n(row, tokens, T(0));
        for (std::size_t d = 0; d < head_dim; ++d) {
          const std::size_t r = h * head_dim + d;
          axpy(tokens, q[r * tokens + i] * scale_factor, kmat + r * tokens, row);
        }
        softmax_row(tokens, row);
        for (std::size_t d = 0; d < head_dim; ++d) {
          const std::size_t r = h * head_dim + d;
          o[r * tokens + i] = dot(tokens, row, v + r * tokens);
        }
      }
    }
    T* yb = out.data() + b * channels * tokens;
    for (std::size_t c = 0; c < channels; ++c) std::fill_n(yb + c * tokens, tokens, b_out.data()[c]);
    kernels::gemm_nn(channels, tokens, channels, w_out.data().data(), o, yb);
  }

  std::function<void(const Node<T>&)> bw;
  if (rec) {
    bw = [x, w_qkv, b_qkv, w_out, b_out, batch, channels, tokens, heads, head_dim, scale_factor, c3,
          probs_per_sample, qkv = std::move(qkv), attended = std::move(attended),
          probs = std::move(probs)](const Node<T>& self) {
      auto gx = grad_of(x);
      auto gwq = grad_of(w_qkv);
      auto gbq = grad_of(b_qkv);
      auto gwo = grad_of(w_out);
      auto gbo = grad_of(b_out);
      std::vector<T> d_att(channels * tokens), d_qkv(c3 * tokens), d_row(tokens);
      for (std::size_t b = 0; b < batch; ++b) {
        const T* dy = self.grad.data() + b * channels * tokens;
        const T* o = attended.data() + b * channels * tokens;
        if (!gwo.empty()) kernels::gemm_nt(channels, tokens, channels, dy, o, gwo.data());
        if (!gbo.empty()) {
          for (std::size_t c = 0; c < channels; ++c) gbo[c] += kernels::row_sum(tokens, dy + c * tokens);
        }
        std::fill(d_att.begin(), d_att.end(), T(0));
        kernels::gemm_tn(channels, tokens, channels, w_out.data().data(), dy, d_att.data());

        const T* qkv_b = qkv.data() + b * c3 * tokens;
        const T* q = qkv_b;
        const T* kmat = qkv_b + channels * tokens;
        const T* v = qkv_b + 2 * channels * tokens;
        std::fill(d_qkv.begin(), d_qkv.end(), T(0));
        T* dq = d_qkv.data();
        T* dk = d_qkv.data() + channels * tokens;
        T* dv = d_qkv.data() + 2 * channels * tokens;
        for (std::size_t h = 0; h < heads; ++h) {
          const T* p = probs.data() + b * probs_per_sample + h * tokens * tokens;
          for (std::size_t i = 0; i < tokens; ++i) {
            const T* prow = p + i * tokens;
            std::fill(d_row.begin(), d_row.end(), T(0));
            for (std::size_t d = 0; d < head_dim; ++d) {
              const std::size_t r = h * head_dim + d;
              const T g = d_att[r * tokens + i];
              axpy(tokens, g, v + r * tokens, d_row.data());
              axpy(tokens, g, prow, dv + r * tokens);
            }
            const T s = dot(tokens, prow, d_row.data());
            for (std::size_t j = 0; j < tokens; ++j) d_row[j] = prow[j] * (d_row[j] - s) * scale_factor;
            for (std::size_t d = 0; d < head_dim; ++d) {
              const std::size_t r = h * head_dim + d;
              dq[r * tokens + i] += dot(tokens, d_row.data(), kmat + r * tokens);
              axpy(tokens, q[r * tokens + i], d_row.data(), dk + r * tokens);
            }
          }
        }
        const T* xb = x.data().data() + b * channels * tokens;
        if (!gwq.empty()) kernels::gemm_nt(c3, tokens, channels, d_qkv.data(), xb, gwq.data());
        if (!gbq.empty()) {
          for (std::size_t r = 0; r < c3; ++r) gbq[r] += kernels::row_sum(tokens, d_qkv.data() + r * tokens);
        }
        if (!gx.empty()) {
          kernels::gemm_tn(c3, tokens, channels, w_qkv.data().data(), d_qkv.data(), gx.data() + b * channels * tokens);
        }
      }
    };
  }
  return detail::make_result<T>("self_attention", x.shape(), std::move(out), {x, w_qkv, b_qkv, w_out, b_out},
                                std::move(bw));
}

// ---------------------------------------------------------------------------
// Position-wise MLPs and sparse expert mixing

template <typename T>
Tensor<T> channel_mlp(const Tensor<T>& x, const MlpParams<T>& mlp) {
  require_rank("channel_mlp", x, 4);
  const std::size_t batch = x.dim(0), channels = x.dim(1), hw = x.dim(2) * x.dim(3);
  const std::size_t hidden = validate_mlp("channel_mlp", mlp, channels);
  std::vector<T> out(x.numel(), T(0));
  auto caches = std::make_shared<std::vector<MlpCache<T>>>(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    mlp_forward(mlp, channels, hidden, hw, x.data().data() + b * channels * hw,
                out.data() + b * channels * hw, (*caches)[b]);
  }
  return detail::make_result<T>("channel_mlp", x.shape(), std::move(out), {x, mlp.w1, mlp.b1, mlp.w2, mlp.b2},
                                [x, mlp, caches, batch, channels, hidden, hw](const Node<T>& self) {
    auto gx = grad_of(x);
    for (std::size_t b = 0; b < batch; ++b) {
      mlp_backward(mlp, channels, hidden, hw, x.data().data() + b * channels * hw,
                   self.grad.data() + b * channels * hw, (*caches)[b],
                   gx.empty() ? nullptr : gx.data() + b * channels * hw);
    }
  });
}

template <typename T>
Tensor<T> pixel_expert_mix(const Tensor<T>& x, const Tensor<T>& weights,
                           std::span<const std::int32_t> selection, std::size_t k,
                           std::span<const MlpParams<T>> experts) {
  require_rank("pixel_expert_mix", x, 4);
  require_rank("pixel_expert_mix", weights, 4);
  const std::size_t batch = x.dim(0), channels = x.dim(1), hw = x.dim(2) * x.dim(3);
  const std::size_t n_experts = experts.size();
  if (weights.dim(0) != batch || weights.dim(1) != n_experts || weights.dim(2) != x.dim(2) ||
      weights.dim(3) != x.dim(3)) {
    throw ShapeError("pixel_expert_mix: weights " + shape_str(weights.shape()) + " vs input " +
                     shape_str(x.shape()) + " with " + std::to_string(n_experts) + " experts");
  }
  if (k == 0 || k > n_experts) {
    throw ArgumentError("pixel_expert_mix: k=" + std::to_string(k) + " outside [1," +
                        std::to_string(n_experts) + "]");
  }
  if (selection.size() != batch * hw * k) {
    throw ShapeError("pixel_expert_mix: selection holds " + std::to_string(selection.size()) +
                     " ids, expected " + std::to_string(batch * hw * k));
  }
  for (auto id : selection) {
    if (id < 0 || std::size_t(id) >= n_experts) {
      throw ArgumentError("pixel_expert_mix: expert id " + std::to_string(id) + " out of range");
    }
  }
  std::vector<std::size_t> hidden(n_experts);
  for (std::size_t j = 0; j < n_experts; ++j) hidden[j] = validate_mlp("pixel_expert_mix", experts[j], channels);

  struct Group {
    std::vector<std::size_t> pixels;
    std::vector<T> in, out;  // [C, n]
    MlpCache<T> cache;
  };
  auto groups = std::make_shared<std::vector<Group>>(batch * n_experts);
  std::vector<T> out(x.numel(), T(0));
  const T* xd = x.data().data();
  const T* wd = weights.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t p = 0; p < hw; ++p) {
      for (std::size_t s = 0; s < k; ++s) {
        const auto j = std::size_t(selection[(b * hw + p) * k + s]);
        (*groups)[b * n_experts + j].pixels.push_back(p);
      }
    }
    for (std::size_t j = 0; j < n_experts; ++j) {
      Group& g = (*groups)[b * n_experts + j];
      const std::size_t n = g.pixels.size();
      if (n == 0) continue;
      g.in.resize(channels * n);
      g.out.assign(channels * n, T(0));
      for (std::size_t c = 0; c < channels; ++c) {
        const T* src = xd + (b * channels + c) * hw;
        for (std::size_t m = 0; m < n; ++m) g.in[c * n + m] = src[g.pixels[m]];
      }
      mlp_forward(experts[j], channels, hidden[j], n, g.in.data(), g.out.data(), g.cache);
      const T* wrow = wd + (b * n_experts + j) * hw;
      for (std::size_t c = 0; c < channels; ++c) {
        T* dst = out.data() + (b * channels + c) * hw;
        for (std::size_t m = 0; m < n; ++m) dst[g.pixels[m]] += wrow[g.pixels[m]] * g.out[c * n + m];
      }
    }
  }

  std::vector<Tensor<T>> inputs{x, weights};
  std::vector<MlpParams<T>> params(experts.begin(), experts.end());
  for (const auto& e : params) {
    inputs.insert(inputs.end(), {e.w1, e.b1, e.w2, e.b2});
  }
  return detail::make_result<T>("pixel_expert_mix", x.shape(), std::move(out), std::move(inputs),
                                [x, weights, params, groups, hidden, batch, channels, hw, n_experts](const Node<T>& self) {
    auto gx = grad_of(x);
    auto gw = grad_of(weights);
    const T* wd = weights.data().data();
    std::vector<T> dy, dx;
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t j = 0; j < n_experts; ++j) {
        const Group& g = (*groups)[b * n_experts + j];
        const std::size_t n = g.pixels.size();
        if (n == 0) continue;
        const T* wrow = wd + (b * n_experts + j) * hw;
        dy.assign(channels * n, T(0));
        for (std::size_t c = 0; c < channels; ++c) {
          const T* src = self.grad.data() + (b * channels + c) * hw;
          for (std::size_t m = 0; m < n; ++m) {
            const T go = src[g.pixels[m]];
            dy[c * n + m] = wrow[g.pixels[m]] * go;
            if (!gw.empty()) gw[(b * n_experts + j) * hw + g.pixels[m]] += go * g.out[c * n + m];
          }
        }
        dx.assign(gx.empty() ? 0 : channels * n, T(0));
        mlp_backward(params[j], channels, hidden[j], n, g.in.data(), dy.data(), g.cache,
                     gx.empty() ? nullptr : dx.data());
        if (gx.empty()) continue;
        for (std::size_t c = 0; c < channels; ++c) {
          T* dst = gx.data() + (b * channels + c) * hw;
          for (std::size_t m = 0; m < n; ++m) dst[g.pixels[m]] += dx[c * n + m];
        }
      }
    }
  });
}

template <typename T>
std::vector<std::size_t> topk_indices(std::span<const T> values, std::size_t k) {
  if (k == 0 || k > values.size()) {
    throw ArgumentError("topk: k=" + std::to_string(k) + " outside [1," + std::to_string(values.size()) + "]");
  }
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), std::size_t(0));
  std::partial_sort(idx.begin(), idx.begin() + std::ptrdiff_t(k), idx.end(), [&](std::size_t a, std::size_t b) {
    return values[a] > values[b] || (values[a] == values[b] && a < b);
  });
  idx.resize(k);
  return idx;
}

#define MEAS_INSTANTIATE_OPS(T)                                                                    \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> scale(const Tensor<T>&, T);                                                   \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                              \
  template Tensor<T> abs(const Tensor<T>&);                                                        \
  template Tensor<T> gelu(const Tensor<T>&);                                                       \
  template Tensor<T> relu(const Tensor<T>&);                                                       \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                             \
  template Tensor<T> transpose(const Tensor<T>&);                                                  \
  template Tensor<T> sum(const Tensor<T>&);                                                        \
  template Tensor<T> mean(const Tensor<T>&);                                                       \
  template Tensor<T> std_pop(const Tensor<T>&);                                                    \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                       \
  template Tensor<T> concat_channels(const std::vector<Tensor<T>>&);                               \
  template Tensor<T> slice_channels(const Tensor<T>&, std::size_t, std::size_t);                   \
  template Tensor<T> slice_batch(const Tensor<T>&, std::size_t);                                   \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                            \
  template Tensor<T> broadcast_spatial(const Tensor<T>&, std::size_t, std::size_t);                \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> pointwise_conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);       \
  template Tensor<T> depthwise_conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);       \
  template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,              \
                                BatchNormStats<T>&, bool, T, T);                                   \
  template Tensor<T> layer_norm_channels(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T); \
  template Tensor<T> self_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,          \
                                    const Tensor<T>&, const Tensor<T>&, std::size_t);              \
  template Tensor<T> channel_mlp(const Tensor<T>&, const MlpParams<T>&);                           \
  template Tensor<T> pixel_expert_mix(const Tensor<T>&, const Tensor<T>&,                          \
                                      std::span<const std::int32_t>, std::size_t,                  \
                                      std::span<const MlpParams<T>>);                              \
  template std::vector<std::size_t> topk_indices(std::span<const T>, std::size_t);

MEAS_INSTANTIATE_OPS(float)
MEAS_INSTANTIATE_OPS(double)

}  // namespace meas
