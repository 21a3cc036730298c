#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <vector>

#include "proctrain/errors.hpp"
#include "proctrain/rng.hpp"

namespace proctrain {

// A supervised token sequence. `tokens` is the full teacher-forced sequence
// (input ++ separator ++ target for seq-to-seq tasks); loss_mask marks the
// positions whose prediction is supervised.
struct Episode {
    std::vector<int32_t> input_tokens;
    std::vector<int32_t> target_tokens;
    std::vector<int32_t> tokens;
    std::vector<uint8_t> loss_mask;
};

// ---------------------------------------------------------------------------
// k-Dyck and k-Dyck shuffle. Bracket type i uses token 2i for the opener and
// 2i+1 for the closer, so the vocabulary size is exactly 2k.
// ---------------------------------------------------------------------------
struct DyckParams {
    int k = 4;
    int seq_len = 128;
    double p_open = 0.49;

    void validate() const {
        if (k < 1) throw ConfigError("dyck: k must be >= 1");
        if (seq_len < 2) throw ConfigError("dyck: seq_len must be >= 2");
        if (!(p_open > 0.0 && p_open < 1.0)) throw ConfigError("dyck: p_open in (0,1)");
    }
};

inline int32_t dyck_open(int type) { return 2 * type; }
inline int32_t dyck_close(int type) { return 2 * type + 1; }

// Balanced, well-nested sequence of fixed length built with a stack. Opens
// with probability p_open (forced when the stack is empty); once the
// remaining slots equal the stack depth only matching closers are emitted.
inline std::vector<int32_t> gen_dyck(const DyckParams& params, Rng& rng) {
    params.validate();
    std::vector<int32_t> seq;
    seq.reserve(params.seq_len);
    std::vector<int> stack;
    while (static_cast<int>(seq.size()) < params.seq_len) {
        const int remaining = params.seq_len - static_cast<int>(seq.size());
        const int depth = static_cast<int>(stack.size());
        bool open;
        if (depth == 0)
            open = true;
        else if (remaining <= depth)
            open = false;
        else
            open = rng.bernoulli(params.p_open);
        if (open) {
            int type = static_cast<int>(rng.uniform_int(params.k));
            stack.push_back(type);
            seq.push_back(dyck_open(type));
        } else {
            seq.push_back(dyck_close(stack.back()));
            stack.pop_back();
        }
    }
    return seq;
}

// Balanced per bracket type but not necessarily nested: a close matches a
// uniformly random currently-open bracket. With truncate=true the sequence
// stops at seq_len and may leave opens unmatched; otherwise it keeps closing
// until balanced.
inline std::vector<int32_t> gen_dyck_shuffle(const DyckParams& params, Rng& rng,
                                             bool truncate = true) {
    params.validate();
    std::vector<int32_t> seq;
    seq.reserve(params.seq_len);
    std::vector<int> open_counts(params.k, 0);
    int total_open = 0;
    while (true) {
        const bool at_cap = static_cast<int>(seq.size()) >= params.seq_len;
        if (at_cap && (truncate || total_open == 0)) break;
        bool open = !at_cap && (total_open == 0 || rng.bernoulli(params.p_open));
        if (open) {
            int type = static_cast<int>(rng.uniform_int(params.k));
            ++open_counts[type];
            ++total_open;
            seq.push_back(dyck_open(type));
        } else {
            // pick a uniformly random open instance
            int64_t pick = rng.uniform_int(total_open);
            int type = 0;
            while (pick >= open_counts[type]) pick -= open_counts[type++];
            --open_counts[type];
            --total_open;
            seq.push_back(dyck_close(type));
        }
    }
    return seq;
}

// Stack simulation with type-matched nesting.
inline bool is_valid_dyck(std::span<const int32_t> seq, int k) {
    std::vector<int> stack;
    for (int32_t tok : seq) {
        if (tok < 0 || tok >= 2 * k)
            throw IndexError("dyck token " + std::to_string(tok) + " outside 2k vocabulary");
        if (tok % 2 == 0) {
            stack.push_back(tok / 2);
        } else {
            if (stack.empty() || stack.back() != tok / 2) return false;
            stack.pop_back();
        }
    }
    return stack.empty();
}

// Every prefix has per-type opens >= closes and the totals balance at the end.
inline bool is_valid_shuffle(std::span<const int32_t> seq, int k) {
    std::vector<int> balance(k, 0);
    for (int32_t tok : seq) {
        if (tok < 0 || tok >= 2 * k)
            throw IndexError("shuffle token " + std::to_string(tok) + " outside 2k vocabulary");
        if (tok % 2 == 0) {
            ++balance[tok / 2];
        } else {
            if (--balance[tok / 2] < 0) return false;
        }
    }
    for (int b : balance)
        if (b != 0) return false;
    return true;
}

// ---------------------------------------------------------------------------
// Stack / Identity / Set episodes.
// ---------------------------------------------------------------------------
namespace stack_vocab {
inline constexpr int32_t n_values = 100;
inline constexpr int32_t pop = 100;
inline constexpr int32_t sep = 101;
inline constexpr int32_t pad = 102;
inline constexpr int32_t size = 103;
}  // namespace stack_vocab

namespace seq_vocab {  // Identity and Set
inline constexpr int32_t n_values = 100;
inline constexpr int32_t sep = 100;
inline constexpr int32_t pad = 101;
inline constexpr int32_t size = 102;
}  // namespace seq_vocab

// Push/pop trace followed by the remaining stack contents (top to bottom).
// Pushes dominate (75%) in the first two-thirds, pops (75%) afterwards.
// A push always draws a token not currently on the stack; a pop drawn on an
// empty stack is resampled as a push.
inline Episode gen_stack_episode(int op_len, Rng& rng) {
    if (op_len < 2) throw ConfigError("stack episode: op_len must be >= 2");
    if (op_len > stack_vocab::n_values)
        throw ConfigError("stack episode: op_len " + std::to_string(op_len) +
                          " exceeds unique-token supply");
    const int push_region = 2 * op_len / 3;
    std::vector<int32_t> ops;
    std::vector<int32_t> stack;
    std::vector<uint8_t> on_stack(stack_vocab::n_values, 0);
    for (int i = 0; i < op_len; ++i) {
        const double p_push = i < push_region ? 0.75 : 0.25;
        bool push = rng.bernoulli(p_push) || stack.empty();
        if (push) {
            int32_t tok;
            do {
                tok = static_cast<int32_t>(rng.uniform_int(stack_vocab::n_values));
            } while (on_stack[tok]);
            on_stack[tok] = 1;
            stack.push_back(tok);
            ops.push_back(tok);
        } else {
            on_stack[stack.back()] = 0;
            stack.pop_back();
            ops.push_back(stack_vocab::pop);
        }
    }
    Episode ep;
    ep.input_tokens = ops;
    ep.target_tokens.assign(stack.rbegin(), stack.rend());
    ep.tokens = ops;
    ep.tokens.push_back(stack_vocab::sep);
    ep.tokens.insert(ep.tokens.end(), ep.target_tokens.begin(), ep.target_tokens.end());
    ep.loss_mask.assign(ep.tokens.size(), 0);
    for (size_t i = ops.size() + 1; i < ep.tokens.size(); ++i) ep.loss_mask[i] = 1;
    return ep;
}

inline Episode gen_identity_episode(int len, Rng& rng) {
    if (len < 1) throw ConfigError("identity episode: len must be >= 1");
    Episode ep;
    ep.input_tokens.reserve(len);
    for (int i = 0; i < len; ++i)
        ep.input_tokens.push_back(static_cast<int32_t>(rng.uniform_int(seq_vocab::n_values)));
    ep.target_tokens = ep.input_tokens;
    ep.tokens = ep.input_tokens;
    ep.tokens.push_back(seq_vocab::sep);
    ep.tokens.insert(ep.tokens.end(), ep.target_tokens.begin(), ep.target_tokens.end());
    ep.loss_mask.assign(ep.tokens.size(), 0);
    for (size_t i = ep.input_tokens.size() + 1; i < ep.tokens.size(); ++i) ep.loss_mask[i] = 1;
    return ep;
}

// Target is the input de-duplicated, preserving first-occurrence order.
inline Episode gen_set_episode(int len, Rng& rng) {
    if (len < 1) throw ConfigError("set episode: len must be >= 1");
    Episode ep;
    ep.input_tokens.reserve(len);
    for (int i = 0; i < len; ++i)
        ep.input_tokens.push_back(static_cast<int32_t>(rng.uniform_int(seq_vocab::n_values)));
    std::vector<uint8_t> seen(seq_vocab::n_values, 0);
    for (int32_t tok : ep.input_tokens) {
        if (!seen[tok]) {
            seen[tok] = 1;
            ep.target_tokens.push_back(tok);
        }
    }
    ep.tokens = ep.input_tokens;
    ep.tokens.push_back(seq_vocab::sep);
    ep.tokens.insert(ep.tokens.end(), ep.target_tokens.begin(), ep.target_tokens.end());
    ep.loss_mask.assign(ep.tokens.size(), 0);
    for (size_t i = ep.input_tokens.size() + 1; i < ep.tokens.size(); ++i) ep.loss_mask[i] = 1;
    return ep;
}

// ---------------------------------------------------------------------------
// Elementary cellular automata.
// ---------------------------------------------------------------------------
struct EcaParams {
    int rule = 110;
    int width = 100;
    int steps = 60;

    void validate() const {
        if (rule < 0 || rule > 255) throw ConfigError("eca: rule must be in [0,256)");
        if (width < 3) throw ConfigError("eca: width must be >= 3");
        if (steps < 2) throw ConfigError("eca: steps must be >= 2");
    }
};

// One update with periodic boundary: cell i looks at (left, self, right) and
// takes bit (4*left + 2*self + right) of the rule number.
inline std::vector<uint8_t> eca_step(std::span<const uint8_t> state, int rule) {
    if (rule < 0 || rule > 255) throw ConfigError("eca_step: rule must be in [0,256)");
    const int w = static_cast<int>(state.size());
    if (w < 3) throw ConfigError("eca_step: width must be >= 3");
    std::vector<uint8_t> next(w);
    for (int i = 0; i < w; ++i) {
        const int l = state[(i + w - 1) % w];
        const int c = state[i];
        const int r = state[(i + 1) % w];
        next[i] = static_cast<uint8_t>((rule >> ((l << 2) | (c << 1) | r)) & 1);
    }
    return next;
}

// steps x width trace: row 0 is iid Bernoulli(0.5), each next row is one
// eca_step. Training pairs are (row t -> row t+1).
inline std::vector<std::vector<uint8_t>> gen_eca_trace(const EcaParams& params, Rng& rng) {
    params.validate();
    std::vector<std::vector<uint8_t>> rows;
    rows.reserve(params.steps);
    std::vector<uint8_t> row(params.width);
    for (auto& c : row) c = rng.bernoulli(0.5) ? 1 : 0;
    rows.push_back(row);
    for (int t = 1; t < params.steps; ++t) {
        row = eca_step(row, params.rule);
        rows.push_back(row);
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Length curriculum for Stack / Identity / Set pretraining.
// ---------------------------------------------------------------------------
struct CurriculumState {
    int current_len = 4;
    int min_len = 4;
    int max_len = 20;
    int step = 2;
    double advance_threshold = 0.99;
    int checks_without_improvement = 0;
};

inline CurriculumState curriculum_advance(CurriculumState state, double val_accuracy) {
    if (val_accuracy < 0.0 || val_accuracy > 1.0)
        throw ConfigError("curriculum_advance: accuracy outside [0,1]");
    if (val_accuracy >= state.advance_threshold && state.current_len < state.max_len) {
        state.current_len = std::min(state.current_len + state.step, state.max_len);
        state.checks_without_improvement = 0;
    } else {
        ++state.checks_without_improvement;
    }
    return state;
}

inline bool curriculum_should_stop(const CurriculumState& state, int patience) {
    return state.checks_without_improvement >= patience;
}

}  // namespace proctrain
