#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "proctrain/rng.hpp"
#include "proctrain/tensor.hpp"

namespace proctrain {

enum class InputMode { token, binary_vector };

// Architecture hyperparameters for the GPT-2-style decoder. In binary_vector
// mode the token embedding/unembedding are replaced by learned linear
// projections of width binary_width.
struct ModelConfig {
    int64_t n_layers = 2;
    int64_t n_heads = 4;
    int64_t d_model = 16;
    int64_t d_ff = 0;  // 0 means 4 * d_model
    int64_t context_length = 64;
    int64_t vocab_size = 0;
    InputMode input_mode = InputMode::token;
    int64_t binary_width = 0;

    int64_t ff_dim() const { return d_ff > 0 ? d_ff : 4 * d_model; }

    void validate() const {
        if (n_layers < 0 || n_heads < 1 || d_model < 1 || context_length < 1)
            throw ConfigError("model config: non-positive dimension");
        if (d_model % n_heads != 0)
            throw ConfigError("model config: d_model " + std::to_string(d_model) +
                              " not divisible by n_heads " + std::to_string(n_heads));
        if (input_mode == InputMode::token && vocab_size < 2)
            throw ConfigError("model config: token mode needs vocab_size >= 2");
        if (input_mode == InputMode::binary_vector && binary_width < 1)
            throw ConfigError("model config: binary mode needs binary_width >= 1");
    }

    bool operator==(const ModelConfig& o) const {
        return n_layers == o.n_layers && n_heads == o.n_heads && d_model == o.d_model &&
               ff_dim() == o.ff_dim() && context_length == o.context_length &&
               vocab_size == o.vocab_size && input_mode == o.input_mode &&
               binary_width == o.binary_width;
    }
};

enum class InitKind { normal, zeros, ones };

struct TensorSpec {
    std::string name;
    Shape shape;
    InitKind init;
};

// Canonical named-tensor set implied by a config. Order is fixed:
// embedding side, per-layer blocks, final norm, unembedding side.
inline std::vector<TensorSpec> canonical_tensors(const ModelConfig& cfg) {
    cfg.validate();
    const int64_t d = cfg.d_model, f = cfg.ff_dim();
    std::vector<TensorSpec> specs;
    if (cfg.input_mode == InputMode::token) {
        specs.push_back({"embed.tok", {cfg.vocab_size, d}, InitKind::normal});
    } else {
        specs.push_back({"proj.in.w", {cfg.binary_width, d}, InitKind::normal});
        specs.push_back({"proj.in.b", {d}, InitKind::zeros});
    }
    specs.push_back({"embed.pos", {cfg.context_length, d}, InitKind::normal});
    for (int64_t i = 0; i < cfg.n_layers; ++i) {
        const std::string p = "layer." + std::to_string(i) + ".";
        specs.push_back({p + "ln1.g", {d}, InitKind::ones});
        specs.push_back({p + "ln1.b", {d}, InitKind::zeros});
        for (const char* w : {"wq", "wk", "wv", "wo"})
            specs.push_back({p + "attn." + w, {d, d}, InitKind::normal});
        for (const char* b : {"bq", "bk", "bv", "bo"})
            specs.push_back({p + "attn." + b, {d}, InitKind::zeros});
        specs.push_back({p + "ln2.g", {d}, InitKind::ones});
        specs.push_back({p + "ln2.b", {d}, InitKind::zeros});
        specs.push_back({p + "mlp.w1", {d, f}, InitKind::normal});
        specs.push_back({p + "mlp.b1", {f}, InitKind::zeros});
        specs.push_back({p + "mlp.w2", {f, d}, InitKind::normal});
        specs.push_back({p + "mlp.b2", {d}, InitKind::zeros});
    }
    specs.push_back({"final_ln.g", {d}, InitKind::ones});
    specs.push_back({"final_ln.b", {d}, InitKind::zeros});
    if (cfg.input_mode == InputMode::token) {
        specs.push_back({"unembed.w", {d, cfg.vocab_size}, InitKind::normal});
        specs.push_back({"unembed.b", {cfg.vocab_size}, InitKind::zeros});
    } else {
        specs.push_back({"proj.out.w", {d, cfg.binary_width}, InitKind::normal});
        specs.push_back({"proj.out.b", {cfg.binary_width}, InitKind::zeros});
    }
    return specs;
}

inline int64_t count_params(const ModelConfig& cfg) {
    int64_t n = 0;
    for (const auto& s : canonical_tensors(cfg)) n += shape_numel(s.shape);
    return n;
}

// Named-tensor container; the unit of transfer and surgery.
struct Checkpoint {
    ModelConfig config;
    std::map<std::string, Tensor> tensors;
    std::string provenance;

    Tensor& at(const std::string& name) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw IndexError("checkpoint has no tensor '" + name + "'");
        return it->second;
    }
    const Tensor& at(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw IndexError("checkpoint has no tensor '" + name + "'");
        return it->second;
    }

    Checkpoint clone() const {
        Checkpoint c;
        c.config = config;
        c.provenance = provenance;
        for (const auto& [name, t] : tensors) c.tensors.emplace(name, t.clone());
        return c;
    }

    bool bit_equal(const Checkpoint& o) const {
        if (!(config == o.config) || tensors.size() != o.tensors.size()) return false;
        for (const auto& [name, t] : tensors) {
            auto it = o.tensors.find(name);
            if (it == o.tensors.end() || !t.bit_equal(it->second)) return false;
        }
        return true;
    }
};

// GPT-2 convention: projections and embeddings ~ N(0, 0.02^2), layer-norm
// gains 1, biases 0. Each tensor draws from its own stream keyed by
// (seed, name), so the values of one tensor never depend on the others.
inline constexpr float kInitStd = 0.02f;

inline Checkpoint init_random(const ModelConfig& cfg, uint64_t seed) {
    Checkpoint ckpt;
    ckpt.config = cfg;
    for (const auto& spec : canonical_tensors(cfg)) {
        Tensor t = Tensor::zeros(spec.shape);
        switch (spec.init) {
            case InitKind::zeros:
                break;
            case InitKind::ones:
                std::fill(t.data().begin(), t.data().end(), 1.0f);
                break;
            case InitKind::normal: {
                Rng rng(hash_str(seed, spec.name));
                for (auto& x : t.data()) x = rng.normal_f(0.0f, kInitStd);
                break;
            }
        }
        ckpt.tensors.emplace(spec.name, std::move(t));
    }
    return ckpt;
}

inline constexpr float kLayerNormEps = 1e-5f;

namespace detail {

// One pre-LN transformer block stack over x: [B*T x d].
inline Tensor decoder_trunk(Tape& tape, const Checkpoint& ckpt, Tensor x, int64_t batch,
                            int64_t seq) {
    const ModelConfig& cfg = ckpt.config;
    for (int64_t i = 0; i < cfg.n_layers; ++i) {
        const std::string p = "layer." + std::to_string(i) + ".";
        Tensor h = tape.layer_norm(x, ckpt.at(p + "ln1.g"), ckpt.at(p + "ln1.b"), kLayerNormEps);
        Tensor q = tape.add_rowvec(tape.matmul(h, ckpt.at(p + "attn.wq")), ckpt.at(p + "attn.bq"));
        Tensor k = tape.add_rowvec(tape.matmul(h, ckpt.at(p + "attn.wk")), ckpt.at(p + "attn.bk"));
        Tensor v = tape.add_rowvec(tape.matmul(h, ckpt.at(p + "attn.wv")), ckpt.at(p + "attn.bv"));
        Tensor a = tape.causal_attention(q, k, v, batch, seq, cfg.n_heads);
        Tensor o = tape.add_rowvec(tape.matmul(a, ckpt.at(p + "attn.wo")), ckpt.at(p + "attn.bo"));
        x = tape.add(x, o);
        Tensor h2 = tape.layer_norm(x, ckpt.at(p + "ln2.g"), ckpt.at(p + "ln2.b"), kLayerNormEps);
        Tensor m = tape.gelu(tape.add_rowvec(tape.matmul(h2, ckpt.at(p + "mlp.w1")),
                                             ckpt.at(p + "mlp.b1")));
        Tensor m2 = tape.add_rowvec(tape.matmul(m, ckpt.at(p + "mlp.w2")), ckpt.at(p + "mlp.b2"));
        x = tape.add(x, m2);
    }
    return tape.layer_norm(x, ckpt.at("final_ln.g"), ckpt.at("final_ln.b"), kLayerNormEps);
}

}  // namespace detail

// Causal decoder forward, token mode. tokens: batch*seq ids -> logits
// [batch*seq x vocab].
inline Tensor forward_tokens(Tape& tape, const Checkpoint& ckpt,
                             std::vector<int32_t> tokens, int64_t batch, int64_t seq) {
    const ModelConfig& cfg = ckpt.config;
    if (cfg.input_mode != InputMode::token)
        throw ConfigError("forward_tokens on a binary_vector-mode checkpoint");
    if (static_cast<int64_t>(tokens.size()) != batch * seq)
        throw ShapeError("forward_tokens: expected batch*seq token ids");
    if (seq > cfg.context_length)
        throw ContextOverflowError("sequence length " + std::to_string(seq) +
                                   " exceeds context length " +
                                   std::to_string(cfg.context_length));
    Tensor x = tape.embedding(ckpt.at("embed.tok"), std::move(tokens));
    x = tape.add_positional(x, ckpt.at("embed.pos"), seq);
    x = detail::decoder_trunk(tape, ckpt, x, batch, seq);
    return tape.add_rowvec(tape.matmul(x, ckpt.at("unembed.w")), ckpt.at("unembed.b"));
}

// Binary-vector mode: rows [batch*seq x width] of 0/1 floats -> per-cell
// logits [batch*seq x width]. Sigmoid is applied only at prediction time.
inline Tensor forward_binary(Tape& tape, const Checkpoint& ckpt, Tensor rows, int64_t batch,
                             int64_t seq) {
    const ModelConfig& cfg = ckpt.config;
    if (cfg.input_mode != InputMode::binary_vector)
        throw ConfigError("forward_binary on a token-mode checkpoint");
    if (rows.ndim() != 2 || rows.dim(0) != batch * seq || rows.dim(1) != cfg.binary_width)
        throw ShapeError("forward_binary: rows must be [batch*seq x binary_width]");
    if (seq > cfg.context_length)
        throw ContextOverflowError("sequence length " + std::to_string(seq) +
                                   " exceeds context length " +
                                   std::to_string(cfg.context_length));
    Tensor x = tape.add_rowvec(tape.matmul(rows, ckpt.at("proj.in.w")), ckpt.at("proj.in.b"));
    x = tape.add_positional(x, ckpt.at("embed.pos"), seq);
    x = detail::decoder_trunk(tape, ckpt, x, batch, seq);
    return tape.add_rowvec(tape.matmul(x, ckpt.at("proj.out.w")), ckpt.at("proj.out.b"));
}

// Thresholds sigmoid(logit) at 0.5; a tie (logit exactly 0) maps to 1.
inline std::vector<uint8_t> predict_binary(std::span<const float> logits_row) {
    std::vector<uint8_t> bits(logits_row.size());
    for (size_t i = 0; i < logits_row.size(); ++i) bits[i] = logits_row[i] >= 0.0f ? 1 : 0;
    return bits;
}

// All checkpoint tensors as a parameter list (canonical order).
inline std::vector<Tensor> parameters(Checkpoint& ckpt) {
    std::vector<Tensor> out;
    for (const auto& spec : canonical_tensors(ckpt.config)) out.push_back(ckpt.at(spec.name));
    return out;
}

inline void set_trainable(Checkpoint& ckpt, bool trainable) {
    for (auto& [name, t] : ckpt.tensors) t.set_requires_grad(trainable);
}

}  // namespace proctrain
