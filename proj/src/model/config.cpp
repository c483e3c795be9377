#include "meas/model/config.hpp"

#include <json.hpp>

#include "meas/numerics/errors.hpp"

namespace meas::model {

void ModelConfig::validate() const {
  if (channels == 0) throw UsageError("model: channels must be positive");
  if (experts == 0) throw UsageError("model: expert count must be positive");
  if (top_k == 0 || top_k > experts) {
    throw UsageError("model: top_k=" + std::to_string(top_k) + " must lie in [1, experts=" + std::to_string(experts) + "]");
  }
  if (heads == 0 || channels % heads != 0) {
    throw UsageError("model: channels=" + std::to_string(channels) + " not divisible by heads=" + std::to_string(heads));
  }
  if (filter_size == 0 || filter_size % 2 == 0) throw UsageError("model: filter_size must be odd");
  if (stages == 0) throw UsageError("model: stages must be >= 1");
  if (!(lambda >= 0.0)) throw UsageError("model: lambda must be >= 0");
}

std::string ModelConfig::to_json() const {
  nlohmann::ordered_json j;
  j["channels"] = channels;
  j["experts"] = experts;
  j["top_k"] = top_k;
  j["filter_size"] = filter_size;
  j["heads"] = heads;
  j["stages"] = stages;
  j["expert_hidden"] = expert_hidden;
  j["balance_variant"] = mese::variant_name(balance_variant);
  j["lambda"] = lambda;
  j["global_balance"] = global_balance;
  j["seed"] = seed;
  j["use_tspg"] = use_tspg;
  j["use_mese"] = use_mese;
  j["use_fd"] = use_fd;
  j["use_mee"] = use_mee;
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  ModelConfig c;
  try {
    const auto j = nlohmann::json::parse(text);
    c.channels = j.at("channels").get<std::size_t>();
    c.experts = j.at("experts").get<std::size_t>();
    c.top_k = j.at("top_k").get<std::size_t>();
    c.filter_size = j.at("filter_size").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.stages = j.at("stages").get<std::size_t>();
    c.expert_hidden = j.at("expert_hidden").get<std::size_t>();
    c.balance_variant = mese::parse_variant(j.at("balance_variant").get<std::string>());
    c.lambda = j.at("lambda").get<double>();
    c.global_balance = j.at("global_balance").get<bool>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.use_tspg = j.at("use_tspg").get<bool>();
    c.use_mese = j.at("use_mese").get<bool>();
    c.use_fd = j.at("use_fd").get<bool>();
    c.use_mee = j.at("use_mee").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("model config: ") + e.what());
  }
  return c;
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.channels = 8;
  c.experts = 3;
  c.top_k = 2;
  c.heads = 2;
  return c;
}

}  // namespace meas::model
