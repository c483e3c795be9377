#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "meas/numerics/tensor.hpp"

namespace meas {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Added to the relative-error denominator so entries whose true gradient
  // is (numerically) zero are compared on an absolute scale.
  double abs_floor = 1e-6;
  // Check at most this many entries per tensor (evenly strided); 0 = all.
  std::size_t max_entries_per_tensor = 0;
};

struct GradCheckReport {
  bool passed = true;
  std::size_t entries_checked = 0;
  double worst_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;

  std::string summary() const;
};

using NamedTensors = std::vector<std::pair<std::string, Tensor<double>>>;

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences (f(p+h) - f(p-h)) / 2h for every entry of every parameter.
/// `f` must rebuild its graph from the parameters on each call.
GradCheckReport grad_check(const std::function<Tensor<double>()>& f, const NamedTensors& params,
                           const GradCheckOptions& options = {});

}  // namespace meas
