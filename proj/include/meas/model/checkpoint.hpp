#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "meas/model/config.hpp"
#include "meas/numerics/errors.hpp"
#include "meas/numerics/tensor.hpp"

namespace meas::model {

class CheckpointError : public DataError {
 public:
  using DataError::DataError;
};

class CheckpointVersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

inline constexpr std::uint8_t kCheckpointVersion = 1;

/// File layout: "MEAS", version byte, u32 LE header length, JSON header
/// (config, step, RNG state, tensor directory with name, dtype, shape and
/// payload offset), then little-endian f32 payloads in directory order.
struct Checkpoint {
  ModelConfig config;
  std::vector<NamedArray> tensors;    // parameters and buffers
  std::vector<NamedArray> optimizer;  // names start with "adam."
  std::uint64_t step = 0;
  std::string rng_state;     // JSON text, may be empty
  std::string train_config;  // JSON text, may be empty
};

void save_checkpoint(const Checkpoint& checkpoint, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace meas::model
