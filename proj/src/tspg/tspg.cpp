#include "meas/tspg/tspg.hpp"

#include "meas/numerics/errors.hpp"
#include "meas/numerics/ops.hpp"

namespace meas::tspg {

template <typename T>
void TspgParams<T>::register_into(ParamRegistry<T>& registry, const std::string& prefix) const {
  registry.add(prefix + "conv.weight", conv_w);
  registry.add(prefix + "conv.bias", conv_b);
  registry.add(prefix + "P_t", prompts);
}

template <typename T>
TspgParams<T> make_tspg(std::size_t channels, Initializer& init) {
  if (channels == 0) throw ArgumentError("tspg: channel count must be positive");
  TspgParams<T> p;
  p.conv_w = init.fan_in_uniform<T>({channels, 3, 3, 3}, 27);
  p.conv_b = Tensor<T>::zeros({channels});
  p.prompts = init.normal_tensor<T>({channels, channels}, 0.02);
  return p;
}

template <typename T>
Tensor<T> generate_task_query(const Tensor<T>& image, const TspgParams<T>& params) {
  if (image.rank() != 4 || image.dim(1) != 3) {
    throw ShapeError("generate_task_query: expected [B,3,H,W], got " + shape_str(image.shape()));
  }
  const auto pooled = global_avg_pool(conv2d(image, params.conv_w, params.conv_b));
  return softmax(reshape(pooled, {image.dim(0), params.channels()}), 1);
}

template <typename T>
Tensor<T> compose_prompt(const Tensor<T>& query, const Tensor<T>& prompts) {
  if (query.rank() != 2 || prompts.rank() != 2 || query.dim(1) != prompts.dim(0)) {
    throw ShapeError("compose_prompt: cannot multiply " + shape_str(query.shape()) + " by " +
                     shape_str(prompts.shape()));
  }
  return matmul(query, prompts);
}

template <typename T>
Tensor<T> broadcast_prompt(const Tensor<T>& prompt, std::size_t height, std::size_t width) {
  return broadcast_spatial(prompt, height, width);
}

#define MEAS_INSTANTIATE_TSPG(T)                                                         \
  template struct TspgParams<T>;                                                         \
  template TspgParams<T> make_tspg<T>(std::size_t, Initializer&);                        \
  template Tensor<T> generate_task_query<T>(const Tensor<T>&, const TspgParams<T>&);     \
  template Tensor<T> compose_prompt<T>(const Tensor<T>&, const Tensor<T>&);              \
  template Tensor<T> broadcast_prompt<T>(const Tensor<T>&, std::size_t, std::size_t);

MEAS_INSTANTIATE_TSPG(float)
MEAS_INSTANTIATE_TSPG(double)

}  // namespace meas::tspg
