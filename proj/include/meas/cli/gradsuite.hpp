#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "meas/model/config.hpp"
#include "meas/numerics/grad_check.hpp"

namespace meas::cli {

struct SuiteEntry {
  std::string module;  // numerics, tspg, experts, mese, fdmee, model
  std::string check;
  double tolerance = 0.0;
  GradCheckReport report;
};

/// Finite-difference checks of every differentiable path in 64-bit, sized
/// from `config` (channels, experts, top_k, heads) on `size` x `size` maps.
/// Module checks use rel-tol 1e-4, the whole network 1e-3.
std::vector<SuiteEntry> run_gradient_suite(const model::ModelConfig& config, std::size_t size = 6,
                                           std::uint64_t seed = 0);

}  // namespace meas::cli
