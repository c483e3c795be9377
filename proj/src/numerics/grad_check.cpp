#include "meas/numerics/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace meas {

std::string GradCheckReport::summary() const {
  std::ostringstream os;
  os << (passed ? "PASS" : "FAIL") << " entries=" << entries_checked
     << " worst_rel_error=" << worst_rel_error;
  if (!worst_param.empty()) {
    os << " at " << worst_param << "[" << worst_index << "] analytic=" << worst_analytic
       << " numeric=" << worst_numeric;
  }
  return os.str();
}

GradCheckReport grad_check(const std::function<Tensor<double>()>& f, const NamedTensors& params,
                           const GradCheckOptions& options) {
  for (const auto& [name, p] : params) {
    if (!p.requires_grad()) throw ArgumentError("grad_check: parameter '" + name + "' does not require grad");
    p.zero_grad();
  }
  const Tensor<double> root = f();
  backward(root);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& [name, p] : params) analytic.emplace_back(p.grad().begin(), p.grad().end());

  auto evaluate = [&f]() {
    NoGradGuard guard;
    const double v = f().item();
    if (!std::isfinite(v)) throw NumericalError("grad_check", "non-finite objective value");
    return v;
  };

  GradCheckReport report;
  for (std::size_t t = 0; t < params.size(); ++t) {
    const auto& [name, p] = params[t];
    auto values = p.data_mut();
    const std::size_t n = values.size();
    std::size_t stride = 1;
    if (options.max_entries_per_tensor > 0 && n > options.max_entries_per_tensor) {
      stride = (n + options.max_entries_per_tensor - 1) / options.max_entries_per_tensor;
    }
    for (std::size_t i = 0; i < n; i += stride) {
      const double saved = values[i];
      values[i] = saved + options.step;
      const double up = evaluate();
      values[i] = saved - options.step;
      const double down = evaluate();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * options.step);
      const double a = analytic[t][i];
      const double rel =
          std::abs(a - numeric) / (std::max(std::abs(a), std::abs(numeric)) + options.abs_floor);
      ++report.entries_checked;
      if (rel > report.worst_rel_error || report.worst_param.empty()) {
        report.worst_rel_error = rel;
        report.worst_param = name;
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  report.passed = report.worst_rel_error <= options.tolerance;
  return report;
}

}  // namespace meas
