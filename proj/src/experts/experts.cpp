#include "meas/experts/experts.hpp"

#include "meas/numerics/errors.hpp"

namespace meas::experts {

const char* scope_name(Scope scope) {
  switch (scope) {
    case Scope::pixel: return "pixel";
    case Scope::low: return "low";
    case Scope::high: return "high";
  }
  return "unknown";
}

template <typename T>
std::size_t ExpertBank<T>::parameter_count() const {
  return size() * (channels * hidden + hidden + hidden * channels + channels);
}

template <typename T>
void ExpertBank<T>::register_into(ParamRegistry<T>& registry, const std::string& prefix) const {
  const std::string base = prefix + scope_name(scope) + ".";
  for (std::size_t j = 0; j < size(); ++j) {
    const std::string name = base + std::to_string(j) + ".";
    registry.add(name + "w1", experts[j].w1);
    registry.add(name + "b1", experts[j].b1);
    registry.add(name + "w2", experts[j].w2);
    registry.add(name + "b2", experts[j].b2);
  }
}

template <typename T>
ExpertBank<T> make_bank(Scope scope, std::size_t count, std::size_t channels, std::size_t hidden,
                        Initializer& init) {
  if (count == 0 || channels == 0 || hidden == 0) {
    throw ArgumentError("make_bank: expert count, channels and hidden width must be positive");
  }
  ExpertBank<T> bank;
  bank.scope = scope;
  bank.channels = channels;
  bank.hidden = hidden;
  for (std::size_t j = 0; j < count; ++j) {
    MlpParams<T> mlp;
    mlp.w1 = init.fan_in_uniform<T>({hidden, channels}, channels);
    mlp.b1 = Tensor<T>::zeros({hidden});
    mlp.w2 = init.fan_in_uniform<T>({channels, hidden}, hidden);
    mlp.b2 = Tensor<T>::zeros({channels});
    bank.experts.push_back(std::move(mlp));
  }
  return bank;
}

template <typename T>
ExpertBank<T> make_bank(std::size_t count, std::size_t channels, std::size_t hidden, std::uint64_t seed,
                        Scope scope) {
  Initializer init(seed);
  return make_bank<T>(scope, count, channels, hidden, init);
}

template <typename T>
Tensor<T> apply_expert(const ExpertBank<T>& bank, std::size_t j, const Tensor<T>& x) {
  if (j >= bank.size()) {
    throw ArgumentError("apply_expert: expert " + std::to_string(j) + " out of range for bank of " +
                        std::to_string(bank.size()));
  }
  return channel_mlp(x, bank.experts[j]);
}

#define MEAS_INSTANTIATE_EXPERTS(T)                                                                       \
  template struct ExpertBank<T>;                                                                          \
  template ExpertBank<T> make_bank<T>(Scope, std::size_t, std::size_t, std::size_t, Initializer&);        \
  template ExpertBank<T> make_bank<T>(std::size_t, std::size_t, std::size_t, std::uint64_t, Scope);       \
  template Tensor<T> apply_expert<T>(const ExpertBank<T>&, std::size_t, const Tensor<T>&);

MEAS_INSTANTIATE_EXPERTS(float)
MEAS_INSTANTIATE_EXPERTS(double)

}  // namespace meas::experts
