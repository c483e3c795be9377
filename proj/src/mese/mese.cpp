#include "meas/mese/mese.hpp"

#include <cmath>

#include "meas/numerics/errors.hpp"
#include "meas/numerics/ops.hpp"

namespace meas::mese {

const char* variant_name(BalanceVariant variant) {
  return variant == BalanceVariant::paper ? "paper" : "cv2";
}

BalanceVariant parse_variant(const std::string& name) {
  if (name == "paper") return BalanceVariant::paper;
  if (name == "cv2") return BalanceVariant::cv2;
  throw UsageError("unknown balance variant '" + name + "' (expected paper or cv2)");
}

template <typename T>
Tensor<T> fuse_task_content(const Tensor<T>& prompt_map, const Tensor<T>& features) {
  if (prompt_map.rank() != 4 || features.rank() != 4 || prompt_map.dim(0) != features.dim(0) ||
      prompt_map.dim(2) != features.dim(2) || prompt_map.dim(3) != features.dim(3)) {
    throw ShapeError("fuse_task_content: prompt " + shape_str(prompt_map.shape()) + " vs features " +
                     shape_str(features.shape()));
  }
  return concat_channels<T>({prompt_map, features});
}

template <typename T>
Tensor<T> route_pixels(const Tensor<T>& fused, const Tensor<T>& expert_prompts) {
  if (fused.rank() != 4 || expert_prompts.rank() != 2 || expert_prompts.dim(0) != fused.dim(1)) {
    throw ShapeError("route_pixels: features " + shape_str(fused.shape()) + " vs expert prompts " +
                     shape_str(expert_prompts.shape()));
  }
  return softmax(pointwise_conv2d(fused, transpose(expert_prompts), Tensor<T>()), 1);
}

template <typename T>
PixelSelection<T> select_topk_pixels(const Tensor<T>& routing, std::size_t k) {
  if (routing.rank() != 4) throw ShapeError("select_topk_pixels: expected [B,N,H,W], got " + shape_str(routing.shape()));
  PixelSelection<T> sel;
  sel.batch = routing.dim(0);
  sel.experts = routing.dim(1);
  sel.height = routing.dim(2);
  sel.width = routing.dim(3);
  sel.k = k;
  if (k == 0 || k > sel.experts) {
    throw ArgumentError("select_topk_pixels: K=" + std::to_string(k) + " outside [1," + std::to_string(sel.experts) + "]");
  }
  const std::size_t hw = sel.pixels(), n = sel.experts;
  sel.indices.resize(sel.batch * hw * k);
  sel.weights.resize(sel.batch * hw * k);
  std::vector<T> mask(routing.numel(), T(0));
  std::vector<T> column(n);
  const auto w = routing.data();
  for (std::size_t b = 0; b < sel.batch; ++b) {
    for (std::size_t p = 0; p < hw; ++p) {
      for (std::size_t j = 0; j < n; ++j) column[j] = w[(b * n + j) * hw + p];
      const auto top = topk_indices<T>(column, k);
      for (std::size_t s = 0; s < k; ++s) {
        const std::size_t slot = (b * hw + p) * k + s;
        sel.indices[slot] = std::int32_t(top[s]);
        sel.weights[slot] = column[top[s]];
        mask[(b * n + top[s]) * hw + p] = T(1);
      }
    }
  }
  sel.mask = Tensor<T>::from_data(routing.shape(), std::move(mask));
  return sel;
}

template <typename T>
Tensor<T> apply_pixel_experts(const Tensor<T>& features, const Tensor<T>& routing,
                              const PixelSelection<T>& selection, const experts::ExpertBank<T>& bank) {
  return pixel_expert_mix<T>(features, routing, selection.indices, selection.k, bank.experts);
}

template <typename T>
Tensor<T> expert_importance(const Tensor<T>& routing) {
  if (routing.rank() != 4) throw ShapeError("expert_importance: expected [B,N,H,W], got " + shape_str(routing.shape()));
  const auto pooled = reshape(global_avg_pool(routing), {routing.dim(0), routing.dim(1)});
  return scale(pooled, T(routing.dim(2) * routing.dim(3)));
}

template <typename T>
Tensor<T> expert_counts(const PixelSelection<T>& selection) {
  std::vector<T> counts(selection.batch * selection.experts, T(0));
  const std::size_t hw = selection.pixels();
  for (std::size_t b = 0; b < selection.batch; ++b) {
    for (std::size_t i = 0; i < hw * selection.k; ++i) {
      counts[b * selection.experts + std::size_t(selection.indices[b * hw * selection.k + i])] += T(1);
    }
  }
  return Tensor<T>::from_data({selection.batch, selection.experts}, std::move(counts));
}

namespace {

// sigma/(mu^2+eps) or sigma^2/(mu^2+eps) on a differentiable row.
template <typename T>
Tensor<T> dispersion(const Tensor<T>& row, BalanceVariant variant, double eps) {
  const auto mu = mean(row);
  auto sigma = std_pop(row);
  if (variant == BalanceVariant::cv2) sigma = mul(sigma, sigma);
  return div(sigma, add_scalar(mul(mu, mu), T(eps)));
}

// Same quantity on constant values, in double.
double dispersion_value(std::span<const double> v, BalanceVariant variant, double eps) {
  double mu = 0.0;
  for (double x : v) mu += x;
  mu /= double(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mu) * (x - mu);
  var /= double(v.size());
  const double spread = variant == BalanceVariant::cv2 ? var : std::sqrt(var);
  return spread / (mu * mu + eps);
}

}  // namespace

template <typename T>
Tensor<T> balance_loss(const Tensor<T>& importance, const Tensor<T>& counts, BalanceVariant variant, double eps) {
  if (importance.rank() != 2 || counts.shape() != importance.shape()) {
    throw ShapeError("balance_loss: importance " + shape_str(importance.shape()) + " vs counts " +
                     shape_str(counts.shape()));
  }
  if (!(eps > 0.0)) throw ArgumentError("balance_loss: eps must be positive");
  const std::size_t batch = importance.dim(0), n = importance.dim(1);
  Tensor<T> total;
  double count_term = 0.0;
  std::vector<double> row(n);
  for (std::size_t b = 0; b < batch; ++b) {
    const auto term = dispersion(reshape(slice_batch(importance, b), {n}), variant, eps);
    total = total.defined() ? add(total, term) : term;
    for (std::size_t j = 0; j < n; ++j) row[j] = double(counts.data()[b * n + j]);
    count_term += dispersion_value(row, variant, eps);
  }
  return scale(add_scalar(total, T(count_term)), T(1.0 / double(batch)));
}

#define MEAS_INSTANTIATE_MESE(T)                                                                            \
  template struct PixelSelection<T>;                                                                        \
  template Tensor<T> fuse_task_content<T>(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> route_pixels<T>(const Tensor<T>&, const Tensor<T>&);                                   \
  template PixelSelection<T> select_topk_pixels<T>(const Tensor<T>&, std::size_t);                          \
  template Tensor<T> apply_pixel_experts<T>(const Tensor<T>&, const Tensor<T>&, const PixelSelection<T>&,   \
                                            const experts::ExpertBank<T>&);                                 \
  template Tensor<T> expert_importance<T>(const Tensor<T>&);                                                \
  template Tensor<T> expert_counts<T>(const PixelSelection<T>&);                                            \
  template Tensor<T> balance_loss<T>(const Tensor<T>&, const Tensor<T>&, BalanceVariant, double);

MEAS_INSTANTIATE_MESE(float)
MEAS_INSTANTIATE_MESE(double)

}  // namespace meas::mese
