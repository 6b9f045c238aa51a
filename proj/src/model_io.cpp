#include "revkd/model_io.hpp"

#include <fstream>
#include <stdexcept>

#include "revkd/report.hpp"

namespace revkd {

nlohmann::json model_to_json(const TabularLM& model) {
  nlohmann::json rows = nlohmann::json::object();
  for (std::size_t k = 0; k < model.num_keys(); ++k) {
    const auto r = model.row(k);
    rows[model.key_string(k)] = std::vector<double>(r.begin(), r.end());
  }
  return {
      {"format", "revkd.tabular_lm"},
      {"version", 1},
      {"vocab_size", model.vocab_size()},
      {"eos", model.vocab().eos},
      {"order", model.order()},
      {"temperature", model.temperature()},
      {"logits", std::move(rows)},
  };
}

TabularLM model_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "revkd.tabular_lm") {
    throw std::invalid_argument("checkpoint: not a revkd.tabular_lm document");
  }
  const Vocab vocab(j.at("vocab_size").get<std::size_t>(), j.at("eos").get<Token>());
  TabularLM model(vocab, j.at("order").get<std::size_t>(), j.at("temperature").get<double>());
  const auto& rows = j.at("logits");
  if (rows.size() != model.num_keys()) {
    throw std::invalid_argument("checkpoint: expected " + std::to_string(model.num_keys()) +
                                " logit rows, found " + std::to_string(rows.size()));
  }
  for (auto it = rows.begin(); it != rows.end(); ++it) {
    const std::size_t key = model.key_from_string(it.key());
    const auto values = it.value().get<std::vector<double>>();
    if (values.size() != vocab.size) {
      throw std::invalid_argument("checkpoint: row '" + it.key() + "' has wrong length");
    }
    auto dst = model.row(key);
    std::copy(values.begin(), values.end(), dst.begin());
  }
  return model;
}

void save_model(const TabularLM& model, const std::filesystem::path& path) {
  write_file_atomic(path, model_to_json(model).dump(1) + "\n");
}

TabularLM load_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  nlohmann::json j = nlohmann::json::parse(in);
  // trainer checkpoints wrap the model with step/metrics metadata
  if (j.contains("model")) return model_from_json(j.at("model"));
  return model_from_json(j);
}

}  // namespace revkd
