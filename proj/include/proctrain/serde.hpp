#pragma once

#include <json.hpp>

#include <set>
#include <string>

#include "proctrain/errors.hpp"
#include "proctrain/model.hpp"

namespace proctrain {

using json = nlohmann::json;

inline void reject_unknown_keys(const json& j, const std::set<std::string>& known,
                                const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known.count(it.key()))
            throw ConfigError(where + ": unknown key '" + it.key() + "'");
}

inline std::string input_mode_name(InputMode m) {
    return m == InputMode::token ? "token" : "binary_vector";
}

inline InputMode input_mode_from(const std::string& s) {
    if (s == "token") return InputMode::token;
    if (s == "binary_vector") return InputMode::binary_vector;
    throw ConfigError("unknown input_mode '" + s + "'");
}

inline json model_config_to_json(const ModelConfig& cfg) {
    return json{{"n_layers", cfg.n_layers},
                {"n_heads", cfg.n_heads},
                {"d_model", cfg.d_model},
                {"d_ff", cfg.ff_dim()},
                {"context_length", cfg.context_length},
                {"vocab_size", cfg.vocab_size},
                {"input_mode", input_mode_name(cfg.input_mode)},
                {"binary_width", cfg.binary_width}};
}

inline ModelConfig model_config_from_json(const json& j) {
    reject_unknown_keys(j,
                        {"n_layers", "n_heads", "d_model", "d_ff", "context_length",
                         "vocab_size", "input_mode", "binary_width"},
                        "model config");
    ModelConfig cfg;
    cfg.n_layers = j.at("n_layers").get<int64_t>();
    cfg.n_heads = j.at("n_heads").get<int64_t>();
    cfg.d_model = j.at("d_model").get<int64_t>();
    if (j.count("d_ff")) cfg.d_ff = j.at("d_ff").get<int64_t>();
    cfg.context_length = j.at("context_length").get<int64_t>();
    if (j.count("vocab_size")) cfg.vocab_size = j.at("vocab_size").get<int64_t>();
    if (j.count("input_mode")) cfg.input_mode = input_mode_from(j.at("input_mode"));
    if (j.count("binary_width")) cfg.binary_width = j.at("binary_width").get<int64_t>();
    cfg.validate();
    return cfg;
}

}  // namespace proctrain
