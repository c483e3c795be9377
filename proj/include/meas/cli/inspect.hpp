#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "meas/degrade/image.hpp"
#include "meas/model/model.hpp"

namespace meas::cli {

/// Routing and frequency diagnostics of one stage for a single image.
struct StageReport {
  std::size_t height = 0, width = 0, experts = 0, k = 0;
  std::vector<std::uint8_t> winners;   // top-1 pixel expert per pixel, row-major
  std::vector<std::size_t> usage;      // S̃: pixels selecting each expert (sums to K*H*W)
  std::vector<double> importance;      // S: summed routing weight per expert (sums to H*W)
  std::vector<double> low_scores, high_scores;
  std::vector<std::int32_t> low_selected, high_selected;
  std::vector<double> low_energy, high_energy;  // mean square per channel of F_low, F_high
};

struct InspectReport {
  std::vector<double> query;  // task query q
  std::vector<StageReport> stages;
};

/// Eval-mode forward of one image and extraction of the diagnostics.
InspectReport inspect(model::Model<float>& model, const degrade::Image& image);

/// Writes stage<s>_experts.png (indexed), usage.csv, global_scores.csv,
/// spectrum.csv and query.csv into `dir`.
void write_inspect(const InspectReport& report, const std::string& dir);

}  // namespace meas::cli
