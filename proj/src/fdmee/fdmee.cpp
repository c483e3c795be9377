#include "meas/fdmee/fdmee.hpp"

#include "meas/numerics/errors.hpp"

namespace meas::fdmee {

template <typename T>
void FilterGenerator<T>::register_into(ParamRegistry<T>& registry, const std::string& prefix) const {
  registry.add(prefix + "conv.weight", conv_w);
  registry.add(prefix + "conv.bias", conv_b);
  registry.add(prefix + "bn.weight", bn_gamma);
  registry.add(prefix + "bn.bias", bn_beta);
  registry.add(prefix + "bn.running_mean", bn_stats.running_mean, false);
  registry.add(prefix + "bn.running_var", bn_stats.running_var, false);
}

template <typename T>
FilterGenerator<T> make_filter_generator(std::size_t channels, std::size_t kernel, Initializer& init) {
  if (channels == 0) throw ArgumentError("filter generator: channel count must be positive");
  if (kernel == 0 || kernel % 2 == 0) throw ArgumentError("filter generator: kernel size must be odd");
  const std::size_t taps = channels * kernel * kernel;
  FilterGenerator<T> g;
  g.channels = channels;
  g.kernel = kernel;
  g.conv_w = init.fan_in_uniform<T>({taps, channels}, channels);
  g.conv_b = Tensor<T>::zeros({taps});
  g.bn_gamma = Tensor<T>::full({taps}, T(1));
  g.bn_beta = Tensor<T>::zeros({taps});
  g.bn_stats = {Tensor<T>::zeros({taps}), Tensor<T>::full({taps}, T(1))};
  return g;
}

template <typename T>
Tensor<T> make_lowpass_filter(const Tensor<T>& features, FilterGenerator<T>& generator, bool training) {
  if (features.rank() != 4 || features.dim(1) != generator.channels) {
    throw ShapeError("make_lowpass_filter: expected [B," + std::to_string(generator.channels) + ",H,W], got " +
                     shape_str(features.shape()));
  }
  const std::size_t batch = features.dim(0), c = generator.channels, kk = generator.kernel * generator.kernel;
  const auto logits = pointwise_conv2d(global_avg_pool(features), generator.conv_w, generator.conv_b);
  const auto normed = batch_norm(logits, generator.bn_gamma, generator.bn_beta, generator.bn_stats, training);
  const auto taps = softmax(reshape(normed, {batch, c, kk}), 2);
  return reshape(taps, {batch, c, generator.kernel, generator.kernel});
}

template <typename T>
FrequencyPair<T> split_frequencies(const Tensor<T>& features, const Tensor<T>& taps) {
  FrequencyPair<T> pair;
  pair.low = depthwise_conv2d(features, taps, Tensor<T>());
  pair.high = sub(features, pair.low);
  return pair;
}

template <typename T>
void BranchParams<T>::register_into(ParamRegistry<T>& registry, const std::string& prefix) const {
  registry.add(prefix + "ln.weight", ln_gamma);
  registry.add(prefix + "ln.bias", ln_beta);
  registry.add(prefix + "dconv_up.weight", dconv_up_w);
  registry.add(prefix + "dconv_up.bias", dconv_up_b);
  registry.add(prefix + "linear.weight", linear_w);
  registry.add(prefix + "linear.bias", linear_b);
  registry.add(prefix + "dconv_low.weight", dconv_low_w);
  registry.add(prefix + "dconv_low.bias", dconv_low_b);
  registry.add(prefix + "pconv.weight", pconv_w);
  registry.add(prefix + "pconv.bias", pconv_b);
}

template <typename T>
BranchParams<T> make_branch(std::size_t channels, std::size_t experts, Initializer& init) {
  if (channels == 0 || experts == 0) throw ArgumentError("branch: channels and experts must be positive");
  BranchParams<T> p;
  p.ln_gamma = Tensor<T>::full({channels}, T(1));
  p.ln_beta = Tensor<T>::zeros({channels});
  p.dconv_up_w = init.fan_in_uniform<T>({channels, 3, 3}, 9);
  p.dconv_up_b = Tensor<T>::zeros({channels});
  p.linear_w = init.fan_in_uniform<T>({experts, channels}, channels);
  p.linear_b = Tensor<T>::zeros({experts});
  p.dconv_low_w = init.fan_in_uniform<T>({channels, 3, 3}, 9);
  p.dconv_low_b = Tensor<T>::zeros({channels});
  p.pconv_w = init.fan_in_uniform<T>({channels, channels}, channels);
  p.pconv_b = Tensor<T>::zeros({channels});
  return p;
}

template <typename T>
GlobalScores<T> global_expert_scores(const Tensor<T>& features, const BranchParams<T>& branch) {
  GlobalScores<T> out;
  out.normalized = layer_norm_channels(features, branch.ln_gamma, branch.ln_beta);
  out.dconv = depthwise_conv2d(out.normalized, branch.dconv_up_w, branch.dconv_up_b);
  const auto pooled = reshape(global_avg_pool(out.dconv), {features.dim(0), features.dim(1)});
  out.scores = softmax(linear(pooled, branch.linear_w, branch.linear_b), 1);
  return out;
}

template <typename T>
Tensor<T> lower_path(const Tensor<T>& normalized, const BranchParams<T>& branch) {
  const auto d = depthwise_conv2d(normalized, branch.dconv_low_w, branch.dconv_low_b);
  return pointwise_conv2d(d, branch.pconv_w, branch.pconv_b);
}

template <typename T>
Tensor<T> interact(const Tensor<T>& pointwise, const Tensor<T>& depthwise) {
  return add(mul(pointwise, depthwise), pointwise);
}

template <typename T>
GlobalSelection select_global(const Tensor<T>& scores, std::size_t k) {
  if (scores.rank() != 2) throw ShapeError("select_global: expected [B,N], got " + shape_str(scores.shape()));
  const std::size_t batch = scores.dim(0), n = scores.dim(1);
  if (k == 0 || k > n) {
    throw ArgumentError("select_global: K=" + std::to_string(k) + " outside [1," + std::to_string(n) + "]");
  }
  GlobalSelection sel;
  sel.batch = batch;
  sel.k = k;
  for (std::size_t b = 0; b < batch; ++b) {
    for (auto j : topk_indices<T>(scores.data().subspan(b * n, n), k)) sel.indices.push_back(std::int32_t(j));
  }
  return sel;
}

template <typename T>
Tensor<T> ensemble_global(const Tensor<T>& features, const Tensor<T>& scores, const GlobalSelection& selection,
                          const experts::ExpertBank<T>& bank) {
  if (features.rank() != 4 || scores.rank() != 2 || scores.dim(0) != features.dim(0) ||
      scores.dim(1) != bank.size() || selection.batch != features.dim(0)) {
    throw ShapeError("ensemble_global: features " + shape_str(features.shape()) + ", scores " +
                     shape_str(scores.shape()) + ", bank of " + std::to_string(bank.size()));
  }
  // A whole-map expert is the position-wise MLP at every pixel, so the
  // sparse pixel mixer applies with spatially constant weights and choices.
  const std::size_t h = features.dim(2), w = features.dim(3), hw = h * w, k = selection.k;
  std::vector<std::int32_t> per_pixel(selection.batch * hw * k);
  for (std::size_t b = 0; b < selection.batch; ++b)
    for (std::size_t p = 0; p < hw; ++p)
      for (std::size_t s = 0; s < k; ++s) per_pixel[(b * hw + p) * k + s] = selection.indices[b * k + s];
  return pixel_expert_mix<T>(features, broadcast_spatial(scores, h, w), per_pixel, k, bank.experts);
}

template <typename T>
Tensor<T> ensemble_global(const Tensor<T>& features, const Tensor<T>& scores, std::size_t k,
                          const experts::ExpertBank<T>& bank) {
  return ensemble_global(features, scores, select_global(scores, k), bank);
}

#define MEAS_INSTANTIATE_FDMEE(T)                                                                              \
  template struct FilterGenerator<T>;                                                                          \
  template struct BranchParams<T>;                                                                             \
  template FilterGenerator<T> make_filter_generator<T>(std::size_t, std::size_t, Initializer&);                \
  template Tensor<T> make_lowpass_filter<T>(const Tensor<T>&, FilterGenerator<T>&, bool);                      \
  template FrequencyPair<T> split_frequencies<T>(const Tensor<T>&, const Tensor<T>&);                          \
  template BranchParams<T> make_branch<T>(std::size_t, std::size_t, Initializer&);                             \
  template GlobalScores<T> global_expert_scores<T>(const Tensor<T>&, const BranchParams<T>&);                  \
  template Tensor<T> lower_path<T>(const Tensor<T>&, const BranchParams<T>&);                                  \
  template Tensor<T> interact<T>(const Tensor<T>&, const Tensor<T>&);                                          \
  template GlobalSelection select_global<T>(const Tensor<T>&, std::size_t);                                    \
  template Tensor<T> ensemble_global<T>(const Tensor<T>&, const Tensor<T>&, const GlobalSelection&,            \
                                        const experts::ExpertBank<T>&);                                        \
  template Tensor<T> ensemble_global<T>(const Tensor<T>&, const Tensor<T>&, std::size_t,                       \
                                        const experts::ExpertBank<T>&);

MEAS_INSTANTIATE_FDMEE(float)
MEAS_INSTANTIATE_FDMEE(double)

}  // namespace meas::fdmee
