#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "meas/numerics/tensor.hpp"

namespace meas {

/// Ordered name -> tensor registry. Trainable entries are graph leaves that
/// require gradients; the rest are buffers (e.g. running statistics) that are
/// persisted but never optimized.
template <typename T>
class ParamRegistry {
 public:
  struct Entry {
    std::string name;
    Tensor<T> tensor;
    bool trainable = true;
  };

  Tensor<T> add(std::string name, Tensor<T> tensor, bool trainable = true);
  const Tensor<T>& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Tensor<T>> trainable() const;
  /// Number of scalar values across trainable entries.
  std::size_t trainable_count() const;
  void zero_grad() const;

 private:
  std::vector<Entry> entries_;
};

/// Deterministic parameter initialization. Draws happen in double precision
/// so float and double builds of the same model start from the same values
/// up to rounding.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : engine_(seed) {}

  double uniform(double lo, double hi);
  double normal(double mean, double stddev);

  /// Uniform in +-1/sqrt(fan_in).
  template <typename T>
  Tensor<T> fan_in_uniform(Shape shape, std::size_t fan_in);
  template <typename T>
  Tensor<T> normal_tensor(Shape shape, double stddev);

 private:
  std::mt19937_64 engine_;
};

}  // namespace meas
