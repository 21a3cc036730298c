#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "proctrain/errors.hpp"
#include "proctrain/procgen.hpp"
#include "proctrain/rng.hpp"
#include "proctrain/tensor.hpp"

namespace proctrain {

// Fixed token-id layouts for the diagnostic tasks.
namespace arith_vocab {
inline constexpr int32_t plus = 10;
inline constexpr int32_t times = 11;
inline constexpr int32_t equals = 12;
inline constexpr int32_t pad = 13;
inline constexpr int32_t size = 14;
}  // namespace arith_vocab

namespace haystack_vocab {
inline constexpr int32_t n_values = 50;   // value ids 0..49
inline constexpr int32_t n_markers = 50;  // marker ids 50..99
inline constexpr int32_t size = 100;
inline int32_t marker(int i) { return n_values + i; }
}  // namespace haystack_vocab

inline int32_t sorting_sep(int P) { return P; }
inline int32_t sorting_pad(int P) { return P + 1; }
inline int32_t sorting_vocab_size(int P) { return P + 2; }

// Key-value retrieval: m1 c1 ... mk ck mu, answer cu. Markers are distinct;
// values may repeat. The single supervised position is the answer.
inline Episode gen_haystack(int k_pairs, Rng& rng) {
    if (k_pairs < 1) throw ConfigError("haystack: k_pairs must be >= 1");
    if (k_pairs > haystack_vocab::n_markers)
        throw ConfigError("haystack: k_pairs " + std::to_string(k_pairs) +
                          " exceeds marker vocabulary " +
                          std::to_string(haystack_vocab::n_markers));
    std::vector<int32_t> markers(haystack_vocab::n_markers);
    for (int i = 0; i < haystack_vocab::n_markers; ++i) markers[i] = haystack_vocab::marker(i);
    // partial Fisher-Yates draw of k distinct markers
    for (int i = 0; i < k_pairs; ++i) {
        int j = i + static_cast<int>(rng.uniform_int(haystack_vocab::n_markers - i));
        std::swap(markers[i], markers[j]);
    }
    Episode ep;
    std::vector<int32_t> values(k_pairs);
    for (int i = 0; i < k_pairs; ++i) {
        values[i] = static_cast<int32_t>(rng.uniform_int(haystack_vocab::n_values));
        ep.input_tokens.push_back(markers[i]);
        ep.input_tokens.push_back(values[i]);
    }
    const int q = static_cast<int>(rng.uniform_int(k_pairs));
    ep.input_tokens.push_back(markers[q]);
    ep.target_tokens = {values[q]};
    ep.tokens = ep.input_tokens;
    ep.tokens.push_back(values[q]);
    ep.loss_mask.assign(ep.tokens.size(), 0);
    ep.loss_mask.back() = 1;
    return ep;
}

namespace detail {

inline void push_digits(std::vector<int32_t>& out, uint64_t value, int width, bool reversed) {
    std::vector<int32_t> digits(width);
    for (int i = width - 1; i >= 0; --i) {
        digits[i] = static_cast<int32_t>(value % 10);
        value /= 10;
    }
    if (reversed) std::reverse(digits.begin(), digits.end());
    out.insert(out.end(), digits.begin(), digits.end());
}

inline uint64_t pow10(int n) {
    uint64_t p = 1;
    while (n-- > 0) p *= 10;
    return p;
}

}  // namespace detail

// a+b= with n-digit operands (leading zeros allowed) and an (n+1)-digit
// result. Forward mode is most-significant-first; reversed mode encodes
// operands and result least-significant-first. Loss covers result digits.
inline Episode encode_addition(uint64_t a, uint64_t b, int n_digits, bool reversed) {
    if (n_digits < 1) throw ConfigError("addition: n_digits must be >= 1");
    if (n_digits > 18) throw ConfigError("addition: n_digits too large for 64-bit oracle");
    Episode ep;
    detail::push_digits(ep.input_tokens, a, n_digits, reversed);
    ep.input_tokens.push_back(arith_vocab::plus);
    detail::push_digits(ep.input_tokens, b, n_digits, reversed);
    ep.input_tokens.push_back(arith_vocab::equals);
    detail::push_digits(ep.target_tokens, a + b, n_digits + 1, reversed);
    ep.tokens = ep.input_tokens;
    ep.tokens.insert(ep.tokens.end(), ep.target_tokens.begin(), ep.target_tokens.end());
    ep.loss_mask.assign(ep.tokens.size(), 0);
    for (size_t i = ep.input_tokens.size(); i < ep.tokens.size(); ++i) ep.loss_mask[i] = 1;
    return ep;
}

inline Episode gen_addition(int n_digits, bool reversed, Rng& rng) {
    if (n_digits < 1) throw ConfigError("addition: n_digits must be >= 1");
    if (n_digits > 18) throw ConfigError("addition: n_digits too large for 64-bit oracle");
    const uint64_t limit = detail::pow10(n_digits);
    const uint64_t a = static_cast<uint64_t>(rng.uniform_int(static_cast<int64_t>(limit)));
    const uint64_t b = static_cast<uint64_t>(rng.uniform_int(static_cast<int64_t>(limit)));
    return encode_addition(a, b, n_digits, reversed);
}

// a*b= with a 2n-digit most-significant-first product.
inline Episode encode_multiplication(uint64_t a, uint64_t b, int n_digits) {
    if (n_digits < 1) throw ConfigError("multiplication: n_digits must be >= 1");
    if (n_digits > 9) throw ConfigError("multiplication: n_digits too large for 64-bit oracle");
    Episode ep;
    detail::push_digits(ep.input_tokens, a, n_digits, false);
    ep.input_tokens.push_back(arith_vocab::times);
    detail::push_digits(ep.input_tokens, b, n_digits, false);
    ep.input_tokens.push_back(arith_vocab::equals);
    detail::push_digits(ep.target_tokens, a * b, 2 * n_digits, false);
    ep.tokens = ep.input_tokens;
    ep.tokens.insert(ep.tokens.end(), ep.target_tokens.begin(), ep.target_tokens.end());
    ep.loss_mask.assign(ep.tokens.size(), 0);
    for (size_t i = ep.input_tokens.size(); i < ep.tokens.size(); ++i) ep.loss_mask[i] = 1;
    return ep;
}

inline Episode gen_multiplication(int n_digits, Rng& rng) {
    if (n_digits < 1) throw ConfigError("multiplication: n_digits must be >= 1");
    if (n_digits > 9) throw ConfigError("multiplication: n_digits too large for 64-bit oracle");
    const uint64_t limit = detail::pow10(n_digits);
    const uint64_t a = static_cast<uint64_t>(rng.uniform_int(static_cast<int64_t>(limit)));
    const uint64_t b = static_cast<uint64_t>(rng.uniform_int(static_cast<int64_t>(limit)));
    return encode_multiplication(a, b, n_digits);
}

// n values from [0, P), separator, then the ascending sort (duplicates kept).
inline Episode gen_sorting(int n, int P, Rng& rng) {
    if (n < 1) throw ConfigError("sorting: n must be >= 1");
    if (P < 2) throw ConfigError("sorting: P must be >= 2");
    Episode ep;
    ep.input_tokens.reserve(n);
    for (int i = 0; i < n; ++i)
        ep.input_tokens.push_back(static_cast<int32_t>(rng.uniform_int(P)));
    ep.target_tokens = ep.input_tokens;
    std::sort(ep.target_tokens.begin(), ep.target_tokens.end());
    ep.tokens = ep.input_tokens;
    ep.tokens.push_back(sorting_sep(P));
    ep.tokens.insert(ep.tokens.end(), ep.target_tokens.begin(), ep.target_tokens.end());
    ep.loss_mask.assign(ep.tokens.size(), 0);
    for (size_t i = ep.input_tokens.size() + 1; i < ep.tokens.size(); ++i) ep.loss_mask[i] = 1;
    return ep;
}

// ---------------------------------------------------------------------------
// Language modelling: word-level tokenizer, frequency-ranked vocabulary,
// non-overlapping windows supervised at the final position only.
// ---------------------------------------------------------------------------
struct LmDataset {
    std::vector<int32_t> ids;  // full corpus mapped to ids (UNK applied)
    std::vector<std::string> vocab_tokens;  // rank order
    std::map<std::string, int32_t> token_to_id;
    int32_t vocab_size = 0;  // without UNK/PAD
    int seq_len = 64;

    int32_t unk_id() const { return vocab_size; }
    int32_t pad_id() const { return vocab_size + 1; }
    int32_t model_vocab() const { return vocab_size + 2; }
    size_t num_windows() const { return ids.size() / static_cast<size_t>(seq_len); }

    Episode window(size_t i) const {
        Episode ep;
        const size_t base = i * static_cast<size_t>(seq_len);
        ep.tokens.assign(ids.begin() + base, ids.begin() + base + seq_len);
        ep.input_tokens.assign(ep.tokens.begin(), ep.tokens.end() - 1);
        ep.target_tokens = {ep.tokens.back()};
        ep.loss_mask.assign(ep.tokens.size(), 0);
        ep.loss_mask.back() = 1;
        return ep;
    }
};

// Splits words on whitespace; punctuation characters become single tokens.
inline std::vector<std::string> lm_tokenize(std::string_view text) {
    std::vector<std::string> out;
    std::string word;
    auto flush = [&] {
        if (!word.empty()) {
            out.push_back(word);
            word.clear();
        }
    };
    for (char ch : text) {
        unsigned char c = static_cast<unsigned char>(ch);
        if (std::isspace(c)) {
            flush();
        } else if (std::isalnum(c) || c == '\'') {
            word.push_back(ch);
        } else {
            flush();
            out.push_back(std::string(1, ch));
        }
    }
    flush();
    return out;
}

inline LmDataset build_lm_dataset(std::string_view corpus_text, int vocab_size = 2000,
                                  int seq_len = 64) {
    if (vocab_size < 1) throw ConfigError("lm dataset: vocab_size must be >= 1");
    if (seq_len < 2) throw ConfigError("lm dataset: seq_len must be >= 2");
    std::vector<std::string> words = lm_tokenize(corpus_text);
    if (static_cast<int>(words.size()) < seq_len)
        throw BatchError("lm dataset: corpus shorter than one window of " +
                         std::to_string(seq_len) + " tokens");
    std::map<std::string, int64_t> counts;
    for (const auto& w : words) ++counts[w];
    // rank by (count desc, token asc) for a deterministic vocabulary
    std::vector<std::pair<std::string, int64_t>> ranked(counts.begin(), counts.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    LmDataset ds;
    ds.seq_len = seq_len;
    ds.vocab_size = static_cast<int32_t>(
        std::min<size_t>(ranked.size(), static_cast<size_t>(vocab_size)));
    for (int32_t i = 0; i < ds.vocab_size; ++i) {
        ds.vocab_tokens.push_back(ranked[i].first);
        ds.token_to_id.emplace(ranked[i].first, i);
    }
    ds.ids.reserve(words.size());
    for (const auto& w : words) {
        auto it = ds.token_to_id.find(w);
        ds.ids.push_back(it == ds.token_to_id.end() ? ds.unk_id() : it->second);
    }
    return ds;
}

// Fraction of mask-true positions where argmax(logits) == target. Argmax ties
// break toward the lowest token id. logits: [... x V].
inline double token_accuracy(const Tensor& logits, std::span<const int32_t> targets,
                             std::span<const uint8_t> mask) {
    const int64_t v = logits.shape().back();
    const int64_t rows = logits.numel() / v;
    if (static_cast<int64_t>(targets.size()) != rows ||
        static_cast<int64_t>(mask.size()) != rows)
        throw ShapeError("token_accuracy: targets/mask must have one entry per row");
    int64_t total = 0, correct = 0;
    for (int64_t r = 0; r < rows; ++r) {
        if (!mask[r]) continue;
        ++total;
        const float* lr = logits.data().data() + r * v;
        int64_t best = 0;
        for (int64_t j = 1; j < v; ++j)
            if (lr[j] > lr[best]) best = j;
        if (best == targets[r]) ++correct;
    }
    if (total == 0) throw BatchError("token_accuracy: empty mask");
    return double(correct) / double(total);
}

}  // namespace proctrain
