#pragma once

// Random small computation graphs shared by the unit tests and the
// acceptance suite's autodiff-vs-finite-differences property.

#include <cstdint>
#include <vector>

#include "grad_check.hpp"
#include "proctrain/rng.hpp"
#include "proctrain/tensor.hpp"

namespace proctrain::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, float scale = 0.5f) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (auto& x : t.data()) x = rng.normal_f(0.0f, scale);
    return t;
}

struct RandomGraph {
    std::vector<Tensor> params;
    LossFn loss;
};

// Mixes matmul / gelu / layer_norm / softmax / attention / cross-entropy
// into a scalar loss. All graphs stay well under 1e3 parameters.
inline RandomGraph make_random_graph(uint64_t seed) {
    Rng rng(hash_combine(seed, 0x67726170));
    const int kind = static_cast<int>(rng.uniform_int(4));
    RandomGraph g;
    switch (kind) {
        case 0: {  // two-layer MLP with gelu and masked cross-entropy
            const int64_t rows = 2 + rng.uniform_int(3);
            const int64_t din = 3 + rng.uniform_int(3);
            const int64_t dh = 3 + rng.uniform_int(4);
            const int64_t v = 3 + rng.uniform_int(3);
            Tensor x = random_tensor({rows, din}, rng);
            Tensor w1 = random_tensor({din, dh}, rng);
            Tensor b1 = random_tensor({dh}, rng, 0.1f);
            Tensor w2 = random_tensor({dh, v}, rng);
            std::vector<int32_t> targets(rows);
            std::vector<uint8_t> mask(rows, 1);
            for (auto& t : targets) t = static_cast<int32_t>(rng.uniform_int(v));
            g.params = {x, w1, b1, w2};
            g.loss = [targets, mask](Tape& tape, std::vector<Tensor>& p) {
                Tensor h = tape.gelu(tape.add_rowvec(tape.matmul(p[0], p[1]), p[2]));
                Tensor logits = tape.matmul(h, p[3]);
                return tape.cross_entropy_masked(logits, targets, mask);
            };
            break;
        }
        case 1: {  // layer_norm then row softmax, summed
            const int64_t rows = 2 + rng.uniform_int(3);
            const int64_t d = 4 + rng.uniform_int(4);
            Tensor x = random_tensor({rows, d}, rng, 1.0f);
            Tensor gain = random_tensor({d}, rng, 0.3f);
            Tensor bias = random_tensor({d}, rng, 0.3f);
            Tensor w = random_tensor({d, d}, rng);
            g.params = {x, gain, bias, w};
            g.loss = [](Tape& tape, std::vector<Tensor>& p) {
                Tensor y = tape.layer_norm(p[0], p[1], p[2], 1e-5f);
                Tensor z = tape.softmax_rows(tape.matmul(y, p[3]));
                return tape.sum(tape.mul(z, z));
            };
            break;
        }
        case 2: {  // causal attention block
            const int64_t seq = 3 + rng.uniform_int(3);
            const int64_t heads = 2;
            const int64_t d = 4 + 2 * rng.uniform_int(2);
            Tensor x = random_tensor({seq, d}, rng);
            Tensor wq = random_tensor({d, d}, rng);
            Tensor wk = random_tensor({d, d}, rng);
            Tensor wv = random_tensor({d, d}, rng);
            g.params = {x, wq, wk, wv};
            g.loss = [seq, heads](Tape& tape, std::vector<Tensor>& p) {
                Tensor q = tape.matmul(p[0], p[1]);
                Tensor k = tape.matmul(p[0], p[2]);
                Tensor v = tape.matmul(p[0], p[3]);
                Tensor a = tape.causal_attention(q, k, v, 1, seq, heads);
                return tape.sum(tape.mul(a, a));
            };
            break;
        }
        default: {  // embedding gather into a linear head
            const int64_t vocab = 5 + rng.uniform_int(4);
            const int64_t d = 4 + rng.uniform_int(3);
            const int64_t n = 3 + rng.uniform_int(4);
            Tensor table = random_tensor({vocab, d}, rng);
            Tensor w = random_tensor({d, vocab}, rng);
            std::vector<int32_t> ids(n);
            std::vector<int32_t> targets(n);
            std::vector<uint8_t> mask(n);
            bool any = false;
            for (int64_t i = 0; i < n; ++i) {
                ids[i] = static_cast<int32_t>(rng.uniform_int(vocab));
                targets[i] = static_cast<int32_t>(rng.uniform_int(vocab));
                mask[i] = rng.bernoulli(0.7) ? 1 : 0;
                any = any || mask[i];
            }
            if (!any) mask[0] = 1;
            g.params = {table, w};
            g.loss = [ids, targets, mask](Tape& tape, std::vector<Tensor>& p) {
                Tensor x = tape.embedding(p[0], ids);
                Tensor logits = tape.matmul(x, p[1]);
                return tape.cross_entropy_masked(logits, targets, mask);
            };
            break;
        }
    }
    return g;
}

}  // namespace proctrain::testing
