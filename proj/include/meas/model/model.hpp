#pragma once

#include <string>
#include <vector>

#include "meas/experts/experts.hpp"
#include "meas/fdmee/fdmee.hpp"
#include "meas/mese/mese.hpp"
#include "meas/model/checkpoint.hpp"
#include "meas/model/config.hpp"
#include "meas/numerics/params.hpp"
#include "meas/tspg/tspg.hpp"

namespace meas::model {

template <typename T>
struct TransformerParams {
  std::size_t heads = 1;
  Tensor<T> ln1_gamma, ln1_beta;
  Tensor<T> w_qkv, b_qkv, w_out, b_out;
  Tensor<T> ln2_gamma, ln2_beta;
  MlpParams<T> mlp;

  void register_into(ParamRegistry<T>& registry, const std::string& prefix) const;
};

template <typename T>
TransformerParams<T> make_transformer(std::size_t channels, std::size_t heads, Initializer& init);

/// x + MHSA(LN(x)), then + MLP(LN(.)); attention over the H*W positions.
template <typename T>
Tensor<T> transformer_block(const Tensor<T>& x, const TransformerParams<T>& params);

/// One prompt-routed pixel-expert block followed by a frequency-split
/// global-expert block.
template <typename T>
struct StageParams {
  Tensor<T> expert_prompts;  // p_e [2C,N]
  experts::ExpertBank<T> pixel;
  TransformerParams<T> mixer;
  fdmee::FilterGenerator<T> filter;
  fdmee::BranchParams<T> low_branch, high_branch;
  experts::ExpertBank<T> low, high;
  Tensor<T> proj_w, proj_b;  // 2C -> C into this stage; unused for stage 0
};

/// Diagnostics of one stage.
template <typename T>
struct StageAux {
  Tensor<T> routing;  // W [B,N,H,W]
  mese::PixelSelection<T> selection;
  Tensor<T> importance;  // S [B,N]
  Tensor<T> counts;      // S̃ [B,N]
  Tensor<T> filter;      // [B,C,k,k]
  fdmee::FrequencyPair<T> frequencies;
  Tensor<T> low_scores, high_scores;  // [B,N]
  fdmee::GlobalSelection low_selection, high_selection;
};

template <typename T>
struct ForwardResult {
  Tensor<T> output;   // degraded + residual, not clamped
  Tensor<T> balance;  // summed over stages; zero when MESE is off
  Tensor<T> query;    // q [B,C]
  Tensor<T> prompt;   // p̃ [B,C]
  std::vector<StageAux<T>> stages;
};

template <typename T>
class Model {
 public:
  explicit Model(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  const ParamRegistry<T>& registry() const { return registry_; }

  /// Full network on [B,3,H,W]. `training` selects batch statistics in the
  /// filter generator's norm layer and updates its running statistics.
  ForwardResult<T> forward(const Tensor<T>& degraded, bool training);
  /// Inference: eval mode, no graph, output clamped to [0,1].
  Tensor<T> restore(const Tensor<T>& degraded);

  /// Trainable scalar count; a function of the config alone.
  std::size_t parameter_count() const { return registry_.trainable_count(); }

  /// Parameters and buffers as float arrays in registry order.
  std::vector<NamedArray> state() const;
  /// Replaces every value. Name or shape mismatches are errors that list
  /// the offending entries.
  void load_state(const std::vector<NamedArray>& arrays);

 private:
  ModelConfig config_;
  ParamRegistry<T> registry_;
  Tensor<T> encoder_w_, encoder_b_;
  tspg::TspgParams<T> tspg_;
  std::vector<StageParams<T>> stages_;
  Tensor<T> decoder_w1_, decoder_b1_, decoder_w2_, decoder_b2_;
  TransformerParams<T> decoder_mixer_;
};

}  // namespace meas::model
