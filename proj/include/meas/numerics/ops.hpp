#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "meas/numerics/tensor.hpp"

// Differentiable primitives. Feature maps are [batch, channel, height, width].
// Every op checks its output for NaN/Inf and names itself in the error.
namespace meas {

// Elementwise, identical shapes.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T value);
template <typename T> Tensor<T> abs(const Tensor<T>& a);
template <typename T> Tensor<T> gelu(const Tensor<T>& a);
template <typename T> Tensor<T> relu(const Tensor<T>& a);

template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);
/// 2-D transpose.
template <typename T> Tensor<T> transpose(const Tensor<T>& a);

// Reductions to a single-element tensor of shape [1].
template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);
/// Population standard deviation (normalized by N).
template <typename T> Tensor<T> std_pop(const Tensor<T>& a);

/// [M,K] x [K,N] -> [M,N].
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// x:[B,in], weight:[out,in], bias:[out] or undefined -> [B,out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

template <typename T> Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);

template <typename T> Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts);
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::size_t begin, std::size_t end);
/// Row `index` along the leading axis, kept as extent 1.
template <typename T> Tensor<T> slice_batch(const Tensor<T>& x, std::size_t index);

/// [B,C,H,W] -> [B,C,1,1].
template <typename T> Tensor<T> global_avg_pool(const Tensor<T>& x);
/// [B,C] -> [B,C,H,W] with every position equal to the input row.
template <typename T>
Tensor<T> broadcast_spatial(const Tensor<T>& x, std::size_t height, std::size_t width);

/// Stride 1, zero padding k/2 (odd k), so H and W are preserved.
/// weight:[Cout,Cin,k,k], bias:[Cout] or undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);
/// 1x1 convolution. weight:[Cout,Cin], bias:[Cout] or undefined.
template <typename T>
Tensor<T> pointwise_conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);
/// Per-channel spatial convolution, zero padding. weight is either [C,k,k]
/// (shared by the batch) or [B,C,k,k] (one kernel set per sample).
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

template <typename T>
struct BatchNormStats {
  Tensor<T> running_mean;  // [C]
  Tensor<T> running_var;   // [C]
};

/// Per-channel normalization over (B,H,W). In training mode batch statistics
/// are used (biased variance) and the running statistics are updated with
/// `momentum` (unbiased variance, as is customary); eval mode uses them.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BatchNormStats<T>& stats, bool training, T momentum = T(0.1),
                     T eps = T(1e-5));

/// Normalizes each pixel's channel vector; gamma, beta: [C].
template <typename T>
Tensor<T> layer_norm_channels(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                              T eps = T(1e-5));

/// Multi-head scaled dot-product self-attention over the H*W positions of
/// each sample, followed by the output projection. No positional encoding.
/// w_qkv:[3C,C], b_qkv:[3C], w_out:[C,C], b_out:[C].
template <typename T>
Tensor<T> self_attention(const Tensor<T>& x, const Tensor<T>& w_qkv, const Tensor<T>& b_qkv,
                         const Tensor<T>& w_out, const Tensor<T>& b_out, std::size_t heads);

/// Parameters of a two-layer position-wise MLP C -> hidden -> C with GELU.
template <typename T>
struct MlpParams {
  Tensor<T> w1;  // [hidden, C]
  Tensor<T> b1;  // [hidden]
  Tensor<T> w2;  // [C, hidden]
  Tensor<T> b2;  // [C]
};

/// Applies the MLP to the channel vector at every spatial position.
template <typename T> Tensor<T> channel_mlp(const Tensor<T>& x, const MlpParams<T>& mlp);

/// Sparse mixture over experts at every pixel:
///   out[b,:,p] = sum_k weights[b, j_k, p] * expert_{j_k}(x[b,:,p])
/// where `selection` lists the K expert ids per (b,p) in [B,H,W,K] order.
/// Only selected experts are evaluated. Gradients reach x, the selected
/// weight entries, and the selected experts' parameters.
template <typename T>
Tensor<T> pixel_expert_mix(const Tensor<T>& x, const Tensor<T>& weights,
                           std::span<const std::int32_t> selection, std::size_t k,
                           std::span<const MlpParams<T>> experts);

/// Indices of the k largest values, descending; ties go to the lower index.
template <typename T>
std::vector<std::size_t> topk_indices(std::span<const T> values, std::size_t k);

}  // namespace meas
