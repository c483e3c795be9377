#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "meas/numerics/ops.hpp"
#include "meas/numerics/params.hpp"

namespace meas::experts {

enum class Scope { pixel, low, high };

const char* scope_name(Scope scope);

/// N independent position-wise MLPs C -> hidden -> C (GELU).
template <typename T>
struct ExpertBank {
  Scope scope = Scope::pixel;
  std::size_t channels = 0;
  std::size_t hidden = 0;
  std::vector<MlpParams<T>> experts;

  std::size_t size() const { return experts.size(); }
  /// N * (C*hidden + hidden + hidden*C + C).
  std::size_t parameter_count() const;
  /// Names `<prefix><scope>.<j>.{w1,b1,w2,b2}`.
  void register_into(ParamRegistry<T>& registry, const std::string& prefix = "experts.") const;
};

template <typename T>
ExpertBank<T> make_bank(Scope scope, std::size_t count, std::size_t channels, std::size_t hidden,
                        Initializer& init);
template <typename T>
ExpertBank<T> make_bank(std::size_t count, std::size_t channels, std::size_t hidden, std::uint64_t seed,
                        Scope scope = Scope::pixel);

/// Expert j on the channel vector at every position of x [B,C,H,W].
template <typename T>
Tensor<T> apply_expert(const ExpertBank<T>& bank, std::size_t j, const Tensor<T>& x);

}  // namespace meas::experts
