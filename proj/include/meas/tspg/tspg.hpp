#pragma once

#include <string>

#include "meas/numerics/params.hpp"
#include "meas/numerics/tensor.hpp"

namespace meas::tspg {

/// Task-query convolution and the basic prompt bank P_t [C,C].
template <typename T>
struct TspgParams {
  Tensor<T> conv_w;   // [C,3,3,3]
  Tensor<T> conv_b;   // [C]
  Tensor<T> prompts;  // P_t, [C,M] with M = C

  std::size_t channels() const { return prompts.dim(0); }
  void register_into(ParamRegistry<T>& registry, const std::string& prefix = "tspg.") const;
};

template <typename T>
TspgParams<T> make_tspg(std::size_t channels, Initializer& init);

/// q = softmax(GAP(conv(image))) over channels: [B,3,H,W] -> [B,C].
template <typename T>
Tensor<T> generate_task_query(const Tensor<T>& image, const TspgParams<T>& params);

/// p̃ = q · P_t: [B,C] x [C,M] -> [B,M].
template <typename T>
Tensor<T> compose_prompt(const Tensor<T>& query, const Tensor<T>& prompts);

/// [B,C] -> [B,C,H,W].
template <typename T>
Tensor<T> broadcast_prompt(const Tensor<T>& prompt, std::size_t height, std::size_t width);

}  // namespace meas::tspg
