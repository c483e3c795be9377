#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "meas/experts/experts.hpp"
#include "meas/numerics/ops.hpp"
#include "meas/numerics/params.hpp"

namespace meas::fdmee {

/// Generator of the input-conditioned low-pass filter:
/// GAP -> 1x1 conv (C -> C*k*k) -> batch norm -> softmax over each channel's taps.
template <typename T>
struct FilterGenerator {
  std::size_t channels = 0;
  std::size_t kernel = 3;
  Tensor<T> conv_w;  // [C*k*k, C]
  Tensor<T> conv_b;  // [C*k*k]
  Tensor<T> bn_gamma, bn_beta;
  BatchNormStats<T> bn_stats;  // persisted buffers

  void register_into(ParamRegistry<T>& registry, const std::string& prefix) const;
};

template <typename T>
FilterGenerator<T> make_filter_generator(std::size_t channels, std::size_t kernel, Initializer& init);

/// Per-sample depthwise taps [B,C,k,k]: nonnegative, unit sum per channel.
/// `training` selects batch statistics in the norm layer (needs B >= 2).
template <typename T>
Tensor<T> make_lowpass_filter(const Tensor<T>& features, FilterGenerator<T>& generator, bool training);

template <typename T>
struct FrequencyPair {
  Tensor<T> low;
  Tensor<T> high;
};

/// low = taps * F (per channel, zero padding); high = F - low.
template <typename T>
FrequencyPair<T> split_frequencies(const Tensor<T>& features, const Tensor<T>& taps);

/// Parameters of one frequency branch. The layer norm feeds both the upper
/// (scoring) path and the lower (PConv) path.
template <typename T>
struct BranchParams {
  Tensor<T> ln_gamma, ln_beta;        // [C]
  Tensor<T> dconv_up_w, dconv_up_b;   // [C,3,3], [C]
  Tensor<T> linear_w, linear_b;       // [N,C], [N]
  Tensor<T> dconv_low_w, dconv_low_b; // [C,3,3], [C]
  Tensor<T> pconv_w, pconv_b;         // [C,C], [C]

  void register_into(ParamRegistry<T>& registry, const std::string& prefix) const;
};

template <typename T>
BranchParams<T> make_branch(std::size_t channels, std::size_t experts, Initializer& init);

template <typename T>
struct GlobalScores {
  Tensor<T> scores;      // [B,N], rows on the simplex
  Tensor<T> dconv;       // F̃^d, upper-branch DConv output
  Tensor<T> normalized;  // LN output, shared with the lower path
};

/// LN -> DConv -> GAP -> Linear -> softmax.
template <typename T>
GlobalScores<T> global_expert_scores(const Tensor<T>& features, const BranchParams<T>& branch);

/// F̃^p = PConv(DConv(LN(F))), from the shared normalized map.
template <typename T>
Tensor<T> lower_path(const Tensor<T>& normalized, const BranchParams<T>& branch);

/// F̃^pd = F̃^p ⊙ F̃^d + F̃^p.
template <typename T>
Tensor<T> interact(const Tensor<T>& pointwise, const Tensor<T>& depthwise);

/// Top-K experts per sample from scores [B,N]; ties go to the lower id.
struct GlobalSelection {
  std::size_t batch = 0, k = 0;
  std::vector<std::int32_t> indices;  // [B,K]
};

template <typename T>
GlobalSelection select_global(const Tensor<T>& scores, std::size_t k);

/// sum_k w(j_k) E^{j_k}(F) over the whole map, raw weights.
template <typename T>
Tensor<T> ensemble_global(const Tensor<T>& features, const Tensor<T>& scores, const GlobalSelection& selection,
                          const experts::ExpertBank<T>& bank);
template <typename T>
Tensor<T> ensemble_global(const Tensor<T>& features, const Tensor<T>& scores, std::size_t k,
                          const experts::ExpertBank<T>& bank);

}  // namespace meas::fdmee
