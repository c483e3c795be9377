#include "meas/numerics/params.hpp"

#include <cmath>

namespace meas {

template <typename T>
Tensor<T> ParamRegistry<T>::add(std::string name, Tensor<T> tensor, bool trainable) {
  if (contains(name)) throw ArgumentError("duplicate parameter name '" + name + "'");
  tensor.set_requires_grad(trainable);
  entries_.push_back({std::move(name), tensor, trainable});
  return tensor;
}

template <typename T>
const Tensor<T>& ParamRegistry<T>::get(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e.tensor;
  }
  throw ArgumentError("unknown parameter '" + name + "'");
}

template <typename T>
bool ParamRegistry<T>::contains(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return true;
  }
  return false;
}

template <typename T>
std::vector<Tensor<T>> ParamRegistry<T>::trainable() const {
  std::vector<Tensor<T>> out;
  for (const auto& e : entries_) {
    if (e.trainable) out.push_back(e.tensor);
  }
  return out;
}

template <typename T>
std::size_t ParamRegistry<T>::trainable_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) {
    if (e.trainable) n += e.tensor.numel();
  }
  return n;
}

template <typename T>
void ParamRegistry<T>::zero_grad() const {
  for (const auto& e : entries_) {
    if (e.trainable) e.tensor.zero_grad();
  }
}

double Initializer::uniform(double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(engine_);
}

double Initializer::normal(double mean, double stddev) {
  return std::normal_distribution<double>(mean, stddev)(engine_);
}

template <typename T>
Tensor<T> Initializer::fan_in_uniform(Shape shape, std::size_t fan_in) {
  const double bound = 1.0 / std::sqrt(double(fan_in));
  std::vector<T> values(shape_numel(shape));
  for (auto& v : values) v = T(uniform(-bound, bound));
  return Tensor<T>::from_data(std::move(shape), std::move(values));
}

template <typename T>
Tensor<T> Initializer::normal_tensor(Shape shape, double stddev) {
  std::vector<T> values(shape_numel(shape));
  for (auto& v : values) v = T(normal(0.0, stddev));
  return Tensor<T>::from_data(std::move(shape), std::move(values));
}

template class ParamRegistry<float>;
template class ParamRegistry<double>;
template Tensor<float> Initializer::fan_in_uniform<float>(Shape, std::size_t);
template Tensor<double> Initializer::fan_in_uniform<double>(Shape, std::size_t);
template Tensor<float> Initializer::normal_tensor<float>(Shape, double);
template Tensor<double> Initializer::normal_tensor<double>(Shape, double);

}  // namespace meas
