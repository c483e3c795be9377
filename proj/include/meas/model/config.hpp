#pragma once

#include <cstdint>
#include <string>

#include "meas/mese/mese.hpp"

namespace meas::model {

struct ModelConfig {
  std::size_t channels = 32;
  std::size_t experts = 6;
  std::size_t top_k = 2;
  std::size_t filter_size = 3;
  std::size_t heads = 4;
  std::size_t stages = 1;
  std::size_t expert_hidden = 0;  // 0 selects 2 * channels
  mese::BalanceVariant balance_variant = mese::BalanceVariant::paper;
  double lambda = 1e-4;
  bool global_balance = false;  // extend the balance loss to the branch scores
  std::uint64_t seed = 0;

  // Component toggles for ablations. Every parameter stays registered.
  bool use_tspg = true;
  bool use_mese = true;
  bool use_fd = true;
  bool use_mee = true;

  std::size_t hidden() const { return expert_hidden == 0 ? 2 * channels : expert_hidden; }
  void validate() const;
  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);

  bool operator==(const ModelConfig&) const = default;
};

/// C=8, N=3, K=2, two heads: the configuration used for gradient checks.
ModelConfig tiny_config();

}  // namespace meas::model
