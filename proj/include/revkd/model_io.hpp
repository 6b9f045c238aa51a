#pragma once

#include <filesystem>
#include <string>

#include "json.hpp"
#include "revkd/tabular_lm.hpp"

namespace revkd {

/// JSON checkpoint layout:
///   {"format": "revkd.tabular_lm", "version": 1, "vocab_size": V, "eos": id,
///    "order": k, "temperature": t, "logits": {"<key>": [V reals], ...}}
/// where <key> is the comma-joined token ids of the context ("" for the empty
/// context). Every key of the model appears exactly once.
nlohmann::json model_to_json(const TabularLM& model);
TabularLM model_from_json(const nlohmann::json& j);

void save_model(const TabularLM& model, const std::filesystem::path& path);
TabularLM load_model(const std::filesystem::path& path);

}  // namespace revkd
