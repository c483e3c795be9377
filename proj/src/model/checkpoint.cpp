#include "meas/model/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <json.hpp>

namespace meas::model {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'M', 'E', 'A', 'S'};
constexpr const char* kOptimizerPrefix = "adam.";

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xFF));
}

std::uint32_t get_u32(const std::string& in, std::size_t pos) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::uint8_t(in[pos + i])) << (8 * i);
  return v;
}

}  // namespace

void save_checkpoint(const Checkpoint& checkpoint, const std::string& path) {
  nlohmann::ordered_json header;
  header["config"] = nlohmann::json::parse(checkpoint.config.to_json());
  header["step"] = checkpoint.step;
  header["rng_state"] = checkpoint.rng_state.empty() ? nlohmann::json() : nlohmann::json::parse(checkpoint.rng_state);
  header["train"] = checkpoint.train_config.empty() ? nlohmann::json() : nlohmann::json::parse(checkpoint.train_config);
  auto directory = nlohmann::json::array();
  std::size_t offset = 0;
  std::string payload;
  auto append = [&](const NamedArray& a) {
    if (a.values.size() != shape_numel(a.shape)) throw CheckpointError("tensor '" + a.name + "' size disagrees with its shape");
    directory.push_back({{"name", a.name}, {"dtype", "f32"}, {"shape", a.shape}, {"offset", offset}});
    const std::size_t bytes = a.values.size() * sizeof(float);
    payload.append(reinterpret_cast<const char*>(a.values.data()), bytes);
    offset += bytes;
  };
  for (const auto& a : checkpoint.tensors) append(a);
  for (const auto& a : checkpoint.optimizer) append(a);
  header["tensors"] = directory;

  const std::string text = header.dump();
  std::string out(kMagic, 4);
  out.push_back(char(kCheckpointVersion));
  put_u32(out, std::uint32_t(text.size()));
  out += text;
  out += payload;

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot open '" + path + "' for writing");
  f.write(out.data(), std::streamsize(out.size()));
  if (!f) throw DataError("failed writing checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint '" + path + "'");
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  if (bytes.size() < 9 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw CheckpointError("'" + path + "' is not a checkpoint (bad magic or truncated preamble)");
  }
  const auto version = std::uint8_t(bytes[4]);
  if (version != kCheckpointVersion) {
    throw CheckpointVersionError("checkpoint '" + path + "' has unsupported version " + std::to_string(version) +
                                 " (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  const std::size_t header_len = get_u32(bytes, 5);
  if (9 + header_len > bytes.size()) throw CheckpointError("checkpoint '" + path + "' is truncated inside its header");

  Checkpoint ck;
  std::size_t payload_size = 0;
  try {
    const auto header = nlohmann::json::parse(bytes.substr(9, header_len));
    ck.config = ModelConfig::from_json(header.at("config").dump());
    ck.step = header.at("step").get<std::uint64_t>();
    if (!header.at("rng_state").is_null()) ck.rng_state = header.at("rng_state").dump();
    if (!header.at("train").is_null()) ck.train_config = header.at("train").dump();
    const std::size_t base = 9 + header_len;
    for (const auto& entry : header.at("tensors")) {
      NamedArray a;
      a.name = entry.at("name").get<std::string>();
      if (entry.at("dtype").get<std::string>() != "f32") throw CheckpointError("tensor '" + a.name + "' has unknown dtype");
      a.shape = entry.at("shape").get<Shape>();
      const std::size_t offset = entry.at("offset").get<std::size_t>();
      const std::size_t count = shape_numel(a.shape);
      if (base + offset + count * sizeof(float) > bytes.size()) {
        throw CheckpointError("checkpoint '" + path + "' is truncated: tensor '" + a.name + "' extends past end of file");
      }
      a.values.resize(count);
      std::memcpy(a.values.data(), bytes.data() + base + offset, count * sizeof(float));
      payload_size = std::max(payload_size, offset + count * sizeof(float));
      (a.name.rfind(kOptimizerPrefix, 0) == 0 ? ck.optimizer : ck.tensors).push_back(std::move(a));
    }
    if (9 + header_len + payload_size != bytes.size()) {
      throw CheckpointError("checkpoint '" + path + "' has " + std::to_string(bytes.size() - 9 - header_len - payload_size) +
                            " unexpected trailing bytes");
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("checkpoint '" + path + "' has a corrupt header: " + e.what());
  } catch (const CheckpointError&) {
    throw;
  } catch (const DataError& e) {
    throw CheckpointError("checkpoint '" + path + "' has a corrupt header: " + e.what());
  }
  return ck;
}

}  // namespace meas::model
