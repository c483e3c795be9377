#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "meas/experts/experts.hpp"
#include "meas/numerics/tensor.hpp"

namespace meas::mese {

enum class BalanceVariant { paper, cv2 };

const char* variant_name(BalanceVariant variant);
BalanceVariant parse_variant(const std::string& name);

constexpr double kBalanceEpsilon = 1e-10;

/// Hard top-K choice per pixel, taken from a soft routing map W [B,N,H,W].
template <typename T>
struct PixelSelection {
  std::size_t batch = 0, experts = 0, height = 0, width = 0, k = 0;
  std::vector<std::int32_t> indices;  // [B,H,W,K], descending weight per pixel
  std::vector<T> weights;             // [B,H,W,K], raw softmax values
  Tensor<T> mask;                     // W̃ [B,N,H,W] in {0,1}, constant

  std::size_t pixels() const { return height * width; }
};

/// [P̃, F] along channels, prompt first.
template <typename T>
Tensor<T> fuse_task_content(const Tensor<T>& prompt_map, const Tensor<T>& features);

/// W = softmax over experts of the per-pixel product F_c · p_e; p_e is [2C,N].
template <typename T>
Tensor<T> route_pixels(const Tensor<T>& fused, const Tensor<T>& expert_prompts);

template <typename T>
PixelSelection<T> select_topk_pixels(const Tensor<T>& routing, std::size_t k);

/// out(x,y) = sum_k w^{j_k}(x,y) E^{j_k}(f(x,y)); only selected experts run.
template <typename T>
Tensor<T> apply_pixel_experts(const Tensor<T>& features, const Tensor<T>& routing,
                              const PixelSelection<T>& selection, const experts::ExpertBank<T>& bank);

/// S(n) = sum over pixels of W(n,·,·): [B,N,H,W] -> [B,N], differentiable.
template <typename T>
Tensor<T> expert_importance(const Tensor<T>& routing);

/// S̃(n) = number of pixels selecting n: [B,N], constant.
template <typename T>
Tensor<T> expert_counts(const PixelSelection<T>& selection);

/// Per image: sigma_S/(mu_S^2 + eps) + sigma_S̃/(mu_S̃^2 + eps) (the `paper`
/// variant) or the squared coefficient of variation sigma^2/(mu^2 + eps)
/// (`cv2`), averaged over the batch. Population std. S̃ carries no gradient.
template <typename T>
Tensor<T> balance_loss(const Tensor<T>& importance, const Tensor<T>& counts,
                       BalanceVariant variant = BalanceVariant::paper, double eps = kBalanceEpsilon);

}  // namespace meas::mese
