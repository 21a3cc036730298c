#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "proctrain/errors.hpp"

namespace proctrain {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

// Dense float32 tensor, row-major, with an optional gradient buffer.
// Tensor is a cheap shared handle: copies alias the same storage, which is
// what the tape's backward closures rely on.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        Tensor t;
        t.impl_ = std::make_shared<Impl>();
        t.impl_->shape = std::move(shape);
        t.impl_->data.assign(static_cast<size_t>(shape_numel(t.impl_->shape)), 0.0f);
        t.impl_->requires_grad = requires_grad;
        return t;
    }

    static Tensor full(Shape shape, float value, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        std::fill(t.data().begin(), t.data().end(), value);
        return t;
    }

    static Tensor from(Shape shape, std::vector<float> values, bool requires_grad = false) {
        if (shape_numel(shape) != static_cast<int64_t>(values.size()))
            throw ShapeError("tensor data length " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
        Tensor t;
        t.impl_ = std::make_shared<Impl>();
        t.impl_->shape = std::move(shape);
        t.impl_->data = std::move(values);
        t.impl_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(float value, bool requires_grad = false) {
        return from({1}, {value}, requires_grad);
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }
    int64_t dim(size_t i) const { return impl_->shape[i]; }
    size_t ndim() const { return impl_->shape.size(); }

    std::span<float> data() { return impl_->data; }
    std::span<const float> data() const { return impl_->data; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool v) { impl_->requires_grad = v; }

    bool has_grad() const { return !impl_->grad.empty(); }
    void ensure_grad() {
        if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0f);
    }
    std::span<float> grad() {
        ensure_grad();
        return impl_->grad;
    }
    std::span<const float> grad() const { return impl_->grad; }
    void zero_grad() { impl_->grad.clear(); }

    float item() const {
        if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
        return impl_->data[0];
    }

    Tensor clone() const {
        Tensor t;
        t.impl_ = std::make_shared<Impl>(*impl_);
        return t;
    }

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

    bool bit_equal(const Tensor& other) const {
        return shape() == other.shape() &&
               std::equal(data().begin(), data().end(), other.data().begin());
    }

private:
    struct Impl {
        Shape shape;
        std::vector<float> data;
        std::vector<float> grad;  // empty until first accumulation
        bool requires_grad = false;
    };
    std::shared_ptr<Impl> impl_;
};

// ---------------------------------------------------------------------------
// Raw kernels. Fixed loop order keeps results bit-deterministic.
// ---------------------------------------------------------------------------
namespace detail {

// C = A[m x k] * B[k x n]
inline void mm_nn(const float* a, const float* b, float* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        float* ci = c + i * n;
        std::fill(ci, ci + n, 0.0f);
        const float* ai = a + i * k;
        for (int64_t p = 0; p < k; ++p) {
            const float av = ai[p];
            const float* bp = b + p * n;
            for (int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// C[m x k] += A[m x n] * B[k x n]^T
inline void mm_nt_acc(const float* a, const float* b, float* c, int64_t m, int64_t n, int64_t k) {
    for (int64_t i = 0; i < m; ++i) {
        const float* ai = a + i * n;
        float* ci = c + i * k;
        for (int64_t p = 0; p < k; ++p) {
            const float* bp = b + p * n;
            float acc = 0.0f;
            for (int64_t j = 0; j < n; ++j) acc += ai[j] * bp[j];
            ci[p] += acc;
        }
    }
}

// C[k x n] += A[m x k]^T * B[m x n]
inline void mm_tn_acc(const float* a, const float* b, float* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const float* ai = a + i * k;
        const float* bi = b + i * n;
        for (int64_t p = 0; p < k; ++p) {
            const float av = ai[p];
            float* cp = c + p * n;
            for (int64_t j = 0; j < n; ++j) cp[j] += av * bi[j];
        }
    }
}

inline constexpr float kGeluCoeff = 0.044715f;

inline float gelu_tanh(float x) {
    const float c = 0.7978845608028654f;  // sqrt(2/pi)
    float u = c * (x + kGeluCoeff * x * x * x);
    return 0.5f * x * (1.0f + std::tanh(u));
}

inline float gelu_tanh_grad(float x) {
    const float c = 0.7978845608028654f;
    float u = c * (x + kGeluCoeff * x * x * x);
    float t = std::tanh(u);
    float du = c * (1.0f + 3.0f * kGeluCoeff * x * x);
    return 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * du;
}

}  // namespace detail

enum class SoftmaxMask { none, causal };

// Reverse-mode autodiff tape. Operations record a backward closure; backward()
// replays them once, in reverse topological (= recording) order.
class Tape {
public:
    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    size_t size() const { return nodes_.size(); }
    void reset() { nodes_.clear(); }

    // a: [... x k], b: [k x n] -> [... x n]; leading dims of a are row dims.
    Tensor matmul(Tensor a, Tensor b) {
        if (a.ndim() < 1 || b.ndim() != 2 || a.shape().back() != b.dim(0))
            throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a.shape()) +
                             " x " + shape_str(b.shape()));
        const int64_t k = b.dim(0), n = b.dim(1);
        const int64_t m = a.numel() / k;
        Shape out_shape(a.shape().begin(), a.shape().end() - 1);
        out_shape.push_back(n);
        Tensor c = Tensor::zeros(out_shape);
        detail::mm_nn(a.data().data(), b.data().data(), c.data().data(), m, k, n);
        if (track(c, {a, b})) {
            record([a, b, c, m, k, n]() mutable {
                if (!c.has_grad()) return;
                const float* dc = c.grad().data();
                if (a.requires_grad())
                    detail::mm_nt_acc(dc, b.data().data(), a.grad().data(), m, n, k);
                if (b.requires_grad())
                    detail::mm_tn_acc(a.data().data(), dc, b.grad().data(), m, k, n);
            });
        }
        return c;
    }

    Tensor add(Tensor a, Tensor b) {
        if (a.shape() != b.shape())
            throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
        Tensor c = Tensor::zeros(a.shape());
        const int64_t n = a.numel();
        for (int64_t i = 0; i < n; ++i) c.data()[i] = a.data()[i] + b.data()[i];
        if (track(c, {a, b})) {
            record([a, b, c, n]() mutable {
                if (!c.has_grad()) return;
                const float* dc = c.grad().data();
                if (a.requires_grad()) {
                    float* da = a.grad().data();
                    for (int64_t i = 0; i < n; ++i) da[i] += dc[i];
                }
                if (b.requires_grad()) {
                    float* db = b.grad().data();
                    for (int64_t i = 0; i < n; ++i) db[i] += dc[i];
                }
            });
        }
        return c;
    }

    Tensor mul(Tensor a, Tensor b) {
        if (a.shape() != b.shape())
            throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
        Tensor c = Tensor::zeros(a.shape());
        const int64_t n = a.numel();
        for (int64_t i = 0; i < n; ++i) c.data()[i] = a.data()[i] * b.data()[i];
        if (track(c, {a, b})) {
            record([a, b, c, n]() mutable {
                if (!c.has_grad()) return;
                const float* dc = c.grad().data();
                if (a.requires_grad()) {
                    float* da = a.grad().data();
                    for (int64_t i = 0; i < n; ++i) da[i] += dc[i] * b.data()[i];
                }
                if (b.requires_grad()) {
                    float* db = b.grad().data();
                    for (int64_t i = 0; i < n; ++i) db[i] += dc[i] * a.data()[i];
                }
            });
        }
        return c;
    }

    // x: [... x n] + v: [n], broadcast over rows.
    Tensor add_rowvec(Tensor x, Tensor v) {
        if (v.ndim() != 1 || x.shape().back() != v.dim(0))
            throw ShapeError("add_rowvec: " + shape_str(x.shape()) + " + " +
                             shape_str(v.shape()));
        const int64_t n = v.dim(0);
        const int64_t rows = x.numel() / n;
        Tensor c = Tensor::zeros(x.shape());
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < n; ++j)
                c.data()[r * n + j] = x.data()[r * n + j] + v.data()[j];
        if (track(c, {x, v})) {
            record([x, v, c, rows, n]() mutable {
                if (!c.has_grad()) return;
                const float* dc = c.grad().data();
                if (x.requires_grad()) {
                    float* dx = x.grad().data();
                    for (int64_t i = 0; i < rows * n; ++i) dx[i] += dc[i];
                }
                if (v.requires_grad()) {
                    float* dv = v.grad().data();
                    for (int64_t r = 0; r < rows; ++r)
                        for (int64_t j = 0; j < n; ++j) dv[j] += dc[r * n + j];
                }
            });
        }
        return c;
    }

    // x: [B*T x d] plus the first T rows of pos: [C x d], broadcast over batch.
    Tensor add_positional(Tensor x, Tensor pos, int64_t seq_len) {
        if (x.ndim() != 2 || pos.ndim() != 2 || x.dim(1) != pos.dim(1))
            throw ShapeError("add_positional: " + shape_str(x.shape()) + " + " +
                             shape_str(pos.shape()));
        if (seq_len > pos.dim(0))
            throw ContextOverflowError("sequence length " + std::to_string(seq_len) +
                                       " exceeds positional table rows " +
                                       std::to_string(pos.dim(0)));
        const int64_t d = x.dim(1);
        const int64_t total = x.dim(0);
        const int64_t batch = total / seq_len;
        Tensor c = Tensor::zeros(x.shape());
        for (int64_t b = 0; b < batch; ++b)
            for (int64_t t = 0; t < seq_len; ++t)
                for (int64_t j = 0; j < d; ++j)
                    c.data()[(b * seq_len + t) * d + j] =
                        x.data()[(b * seq_len + t) * d + j] + pos.data()[t * d + j];
        if (track(c, {x, pos})) {
            record([x, pos, c, batch, seq_len, d]() mutable {
                if (!c.has_grad()) return;
                const float* dc = c.grad().data();
                if (x.requires_grad()) {
                    float* dx = x.grad().data();
                    for (int64_t i = 0; i < batch * seq_len * d; ++i) dx[i] += dc[i];
                }
                if (pos.requires_grad()) {
                    float* dp = pos.grad().data();
                    for (int64_t b = 0; b < batch; ++b)
                        for (int64_t t = 0; t < seq_len; ++t)
                            for (int64_t j = 0; j < d; ++j)
                                dp[t * d + j] += dc[(b * seq_len + t) * d + j];
                }
            });
        }
        return c;
    }

    // table: [V x d], ids: [N] -> [N x d]
    Tensor embedding(Tensor table, std::vector<int32_t> ids) {
        if (table.ndim() != 2) throw ShapeError("embedding table must be 2-D");
        const int64_t v = table.dim(0), d = table.dim(1);
        for (int32_t id : ids)
            if (id < 0 || id >= v)
                throw IndexError("embedding id " + std::to_string(id) + " out of range [0," +
                                 std::to_string(v) + ")");
        const int64_t n = static_cast<int64_t>(ids.size());
        Tensor c = Tensor::zeros({n, d});
        for (int64_t i = 0; i < n; ++i)
            std::copy_n(table.data().data() + int64_t(ids[i]) * d, d, c.data().data() + i * d);
        if (track(c, {table})) {
            record([table, c, ids = std::move(ids), d]() mutable {
                if (!c.has_grad() || !table.requires_grad()) return;
                const float* dc = c.grad().data();
                float* dt = table.grad().data();
                for (size_t i = 0; i < ids.size(); ++i) {
                    float* row = dt + int64_t(ids[i]) * d;
                    const float* src = dc + int64_t(i) * d;
                    for (int64_t j = 0; j < d; ++j) row[j] += src[j];
                }
            });
        }
        return c;
    }

    // Row-wise softmax over the last dimension. With SoftmaxMask::causal the
    // last two dims must be [T x T] and entries j > i get probability 0.
    // An explicit per-entry keep-mask (same shape) may be supplied instead;
    // a row with nothing unmasked is an error.
    Tensor softmax_rows(Tensor x, SoftmaxMask mask = SoftmaxMask::none,
                        const std::vector<uint8_t>* keep = nullptr) {
        if (x.ndim() < 1 || x.shape().back() < 1)
            throw ShapeError("softmax_rows: last dimension must be >= 1");
        const int64_t n = x.shape().back();
        const int64_t rows = x.numel() / n;
        int64_t t = 0;
        if (mask == SoftmaxMask::causal) {
            if (x.ndim() < 2 || x.shape()[x.ndim() - 2] != n)
                throw ShapeError("causal softmax needs trailing [T x T] dims, got " +
                                 shape_str(x.shape()));
            t = n;
        }
        if (keep && static_cast<int64_t>(keep->size()) != x.numel())
            throw ShapeError("softmax keep-mask size mismatch");
        Tensor p = Tensor::zeros(x.shape());
        for (int64_t r = 0; r < rows; ++r) {
            const float* xr = x.data().data() + r * n;
            float* pr = p.data().data() + r * n;
            auto kept = [&](int64_t j) {
                if (keep && !(*keep)[r * n + j]) return false;
                if (t && j > (r % t)) return false;
                return true;
            };
            float mx = -std::numeric_limits<float>::infinity();
            for (int64_t j = 0; j < n; ++j)
                if (kept(j)) mx = std::max(mx, xr[j]);
            if (mx == -std::numeric_limits<float>::infinity())
                throw BatchError("softmax row " + std::to_string(r) + " is fully masked");
            float sum = 0.0f;
            for (int64_t j = 0; j < n; ++j) {
                if (kept(j)) {
                    pr[j] = std::exp(xr[j] - mx);
                    sum += pr[j];
                } else {
                    pr[j] = 0.0f;
                }
            }
            for (int64_t j = 0; j < n; ++j) pr[j] /= sum;
        }
        if (track(p, {x})) {
            record([x, p, rows, n]() mutable {
                if (!p.has_grad() || !x.requires_grad()) return;
                const float* dp = p.grad().data();
                float* dx = x.grad().data();
                for (int64_t r = 0; r < rows; ++r) {
                    const float* pr = p.data().data() + r * n;
                    double dot = 0.0;
                    for (int64_t j = 0; j < n; ++j) dot += double(dp[r * n + j]) * pr[j];
                    for (int64_t j = 0; j < n; ++j)
                        dx[r * n + j] += pr[j] * (dp[r * n + j] - float(dot));
                }
            });
        }
        return p;
    }

    // Normalizes the last dimension to zero mean / unit variance, then applies
    // the affine gain/bias.
    Tensor layer_norm(Tensor x, Tensor gain, Tensor bias, float eps = 1e-5f) {
        const int64_t d = x.shape().back();
        if (gain.ndim() != 1 || bias.ndim() != 1 || gain.dim(0) != d || bias.dim(0) != d)
            throw ShapeError("layer_norm: gain/bias must be [" + std::to_string(d) + "]");
        if (eps <= 0.0f) throw ConfigError("layer_norm eps must be positive");
        const int64_t rows = x.numel() / d;
        Tensor y = Tensor::zeros(x.shape());
        auto xhat = std::make_shared<std::vector<float>>(x.numel());
        auto invstd = std::make_shared<std::vector<float>>(rows);
        for (int64_t r = 0; r < rows; ++r) {
            const float* xr = x.data().data() + r * d;
            float* yr = y.data().data() + r * d;
            double mean = 0.0;
            for (int64_t j = 0; j < d; ++j) mean += xr[j];
            mean /= d;
            double var = 0.0;
            for (int64_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
            var /= d;
            float is = 1.0f / std::sqrt(float(var) + eps);
            (*invstd)[r] = is;
            for (int64_t j = 0; j < d; ++j) {
                float xh = (xr[j] - float(mean)) * is;
                (*xhat)[r * d + j] = xh;
                yr[j] = gain.data()[j] * xh + bias.data()[j];
            }
        }
        if (track(y, {x, gain, bias})) {
            record([x, gain, bias, y, xhat, invstd, rows, d]() mutable {
                if (!y.has_grad()) return;
                const float* dy = y.grad().data();
                for (int64_t r = 0; r < rows; ++r) {
                    const float* dyr = dy + r * d;
                    const float* xh = xhat->data() + r * d;
                    if (gain.requires_grad()) {
                        float* dg = gain.grad().data();
                        for (int64_t j = 0; j < d; ++j) dg[j] += dyr[j] * xh[j];
                    }
                    if (bias.requires_grad()) {
                        float* db = bias.grad().data();
                        for (int64_t j = 0; j < d; ++j) db[j] += dyr[j];
                    }
                    if (x.requires_grad()) {
                        float* dx = x.grad().data() + r * d;
                        double m1 = 0.0, m2 = 0.0;
                        for (int64_t j = 0; j < d; ++j) {
                            double g = double(dyr[j]) * gain.data()[j];
                            m1 += g;
                            m2 += g * xh[j];
                        }
                        m1 /= d;
                        m2 /= d;
                        const float is = (*invstd)[r];
                        for (int64_t j = 0; j < d; ++j) {
                            double g = double(dyr[j]) * gain.data()[j];
                            dx[j] += float((g - m1 - double(xh[j]) * m2) * is);
                        }
                    }
                }
            });
        }
        return y;
    }

    // tanh-approximation GELU.
    Tensor gelu(Tensor x) {
        Tensor y = Tensor::zeros(x.shape());
        const int64_t n = x.numel();
        for (int64_t i = 0; i < n; ++i) y.data()[i] = detail::gelu_tanh(x.data()[i]);
        if (track(y, {x})) {
            record([x, y, n]() mutable {
                if (!y.has_grad() || !x.requires_grad()) return;
                const float* dy = y.grad().data();
                float* dx = x.grad().data();
                for (int64_t i = 0; i < n; ++i)
                    dx[i] += dy[i] * detail::gelu_tanh_grad(x.data()[i]);
            });
        }
        return y;
    }

    // Multi-head causal self-attention over already-projected q,k,v of shape
    // [B*T x d]. Scale is 1/sqrt(d/heads). Probabilities are kept for backward.
    Tensor causal_attention(Tensor q, Tensor k, Tensor v, int64_t batch, int64_t seq,
                            int64_t heads) {
        const int64_t d = q.shape().back();
        if (q.shape() != k.shape() || q.shape() != v.shape())
            throw ShapeError("attention: q/k/v shapes must match");
        if (q.numel() != batch * seq * d) throw ShapeError("attention: B*T mismatch");
        if (d % heads != 0) throw ShapeError("attention: d_model not divisible by heads");
        const int64_t hd = d / heads;
        const float scale = 1.0f / std::sqrt(float(hd));
        Tensor out = Tensor::zeros(q.shape());
        auto probs = std::make_shared<std::vector<float>>(size_t(batch) * heads * seq * seq, 0.0f);

        std::vector<float> qh(size_t(seq) * hd), kh(size_t(seq) * hd), vh(size_t(seq) * hd);
        for (int64_t b = 0; b < batch; ++b) {
            for (int64_t h = 0; h < heads; ++h) {
                const int64_t off = h * hd;
                for (int64_t t = 0; t < seq; ++t) {
                    const int64_t row = (b * seq + t) * d + off;
                    std::copy_n(q.data().data() + row, hd, qh.data() + t * hd);
                    std::copy_n(k.data().data() + row, hd, kh.data() + t * hd);
                    std::copy_n(v.data().data() + row, hd, vh.data() + t * hd);
                }
                float* pbh = probs->data() + ((b * heads + h) * seq) * seq;
                for (int64_t i = 0; i < seq; ++i) {
                    float* pi = pbh + i * seq;
                    float mx = -std::numeric_limits<float>::infinity();
                    for (int64_t j = 0; j <= i; ++j) {
                        float s = 0.0f;
                        for (int64_t e = 0; e < hd; ++e) s += qh[i * hd + e] * kh[j * hd + e];
                        pi[j] = s * scale;
                        mx = std::max(mx, pi[j]);
                    }
                    float sum = 0.0f;
                    for (int64_t j = 0; j <= i; ++j) {
                        pi[j] = std::exp(pi[j] - mx);
                        sum += pi[j];
                    }
                    for (int64_t j = 0; j <= i; ++j) pi[j] /= sum;
                    float* orow = out.data().data() + (b * seq + i) * d + off;
                    for (int64_t e = 0; e < hd; ++e) {
                        float acc = 0.0f;
                        for (int64_t j = 0; j <= i; ++j) acc += pi[j] * vh[j * hd + e];
                        orow[e] = acc;
                    }
                }
            }
        }
        if (track(out, {q, k, v})) {
            record([q, k, v, out, probs, batch, seq, heads, d, hd, scale]() mutable {
                if (!out.has_grad()) return;
                const bool need = q.requires_grad() || k.requires_grad() || v.requires_grad();
                if (!need) return;
                q.ensure_grad();
                k.ensure_grad();
                v.ensure_grad();
                std::vector<float> qh(size_t(seq) * hd), kh(size_t(seq) * hd),
                    vh(size_t(seq) * hd), doh(size_t(seq) * hd);
                std::vector<float> dp(size_t(seq) * seq), ds(size_t(seq) * seq);
                for (int64_t b = 0; b < batch; ++b) {
                    for (int64_t h = 0; h < heads; ++h) {
                        const int64_t off = h * hd;
                        for (int64_t t = 0; t < seq; ++t) {
                            const int64_t row = (b * seq + t) * d + off;
                            std::copy_n(q.data().data() + row, hd, qh.data() + t * hd);
                            std::copy_n(k.data().data() + row, hd, kh.data() + t * hd);
                            std::copy_n(v.data().data() + row, hd, vh.data() + t * hd);
                            std::copy_n(out.grad().data() + row, hd, doh.data() + t * hd);
                        }
                        const float* pbh = probs->data() + ((b * heads + h) * seq) * seq;
                        // dP = dO V^T ; dS = P o (dP - rowdot(dP, P))
                        for (int64_t i = 0; i < seq; ++i) {
                            double dot = 0.0;
                            for (int64_t j = 0; j <= i; ++j) {
                                float acc = 0.0f;
                                for (int64_t e = 0; e < hd; ++e)
                                    acc += doh[i * hd + e] * vh[j * hd + e];
                                dp[i * seq + j] = acc;
                                dot += double(acc) * pbh[i * seq + j];
                            }
                            for (int64_t j = 0; j <= i; ++j)
                                ds[i * seq + j] =
                                    pbh[i * seq + j] * (dp[i * seq + j] - float(dot));
                        }
                        for (int64_t i = 0; i < seq; ++i) {
                            const int64_t qrow = (b * seq + i) * d + off;
                            // dQ_i += scale * sum_j dS_ij K_j
                            for (int64_t e = 0; e < hd; ++e) {
                                float acc = 0.0f;
                                for (int64_t j = 0; j <= i; ++j)
                                    acc += ds[i * seq + j] * kh[j * hd + e];
                                q.grad()[qrow + e] += scale * acc;
                            }
                            // dK_j += scale * dS_ij Q_i ; dV_j += P_ij dO_i
                            for (int64_t j = 0; j <= i; ++j) {
                                const int64_t krow = (b * seq + j) * d + off;
                                const float dsij = ds[i * seq + j] * scale;
                                const float pij = pbh[i * seq + j];
                                for (int64_t e = 0; e < hd; ++e) {
                                    k.grad()[krow + e] += dsij * qh[i * hd + e];
                                    v.grad()[krow + e] += pij * doh[i * hd + e];
                                }
                            }
                        }
                    }
                }
            });
        }
        return out;
    }

    // Mean negative log-likelihood over mask-true positions. logits: [... x V],
    // targets/mask: one entry per row.
    Tensor cross_entropy_masked(Tensor logits, std::vector<int32_t> targets,
                                std::vector<uint8_t> mask) {
        const int64_t v = logits.shape().back();
        const int64_t rows = logits.numel() / v;
        if (static_cast<int64_t>(targets.size()) != rows ||
            static_cast<int64_t>(mask.size()) != rows)
            throw ShapeError("cross_entropy_masked: targets/mask must have " +
                             std::to_string(rows) + " entries");
        int64_t count = 0;
        for (int64_t r = 0; r < rows; ++r) {
            if (!mask[r]) continue;
            ++count;
            if (targets[r] < 0 || targets[r] >= v)
                throw IndexError("cross_entropy target " + std::to_string(targets[r]) +
                                 " out of range [0," + std::to_string(v) + ")");
        }
        if (count == 0) throw BatchError("cross_entropy_masked: empty loss mask");
        auto probs = std::make_shared<std::vector<float>>(logits.numel(), 0.0f);
        double total = 0.0;
        for (int64_t r = 0; r < rows; ++r) {
            if (!mask[r]) continue;
            const float* lr = logits.data().data() + r * v;
            float* pr = probs->data() + r * v;
            float mx = *std::max_element(lr, lr + v);
            double sum = 0.0;
            for (int64_t j = 0; j < v; ++j) sum += std::exp(double(lr[j]) - mx);
            double lse = mx + std::log(sum);
            total += lse - double(lr[targets[r]]);
            for (int64_t j = 0; j < v; ++j)
                pr[j] = float(std::exp(double(lr[j]) - lse));
        }
        Tensor loss = Tensor::scalar(float(total / double(count)));
        if (track(loss, {logits})) {
            record([logits, loss, probs, targets = std::move(targets), mask = std::move(mask),
                    rows, v, count]() mutable {
                if (!loss.has_grad() || !logits.requires_grad()) return;
                const float dl = loss.grad()[0] / float(count);
                float* dx = logits.grad().data();
                for (int64_t r = 0; r < rows; ++r) {
                    if (!mask[r]) continue;
                    const float* pr = probs->data() + r * v;
                    float* dr = dx + r * v;
                    for (int64_t j = 0; j < v; ++j) dr[j] += dl * pr[j];
                    dr[targets[r]] -= dl;
                }
            });
        }
        return loss;
    }

    // Per-cell sigmoid binary cross-entropy, averaged over the cells of
    // mask-true rows. logits/targets: [... x W]; targets hold 0/1 floats.
    Tensor bce_logits_masked(Tensor logits, Tensor targets, std::vector<uint8_t> row_mask) {
        if (logits.shape() != targets.shape())
            throw ShapeError("bce_logits_masked: logits/targets shape mismatch");
        const int64_t w = logits.shape().back();
        const int64_t rows = logits.numel() / w;
        if (static_cast<int64_t>(row_mask.size()) != rows)
            throw ShapeError("bce_logits_masked: row mask must have " + std::to_string(rows) +
                             " entries");
        int64_t count = 0;
        for (auto m : row_mask) count += m ? 1 : 0;
        if (count == 0) throw BatchError("bce_logits_masked: empty loss mask");
        const int64_t cells = count * w;
        double total = 0.0;
        for (int64_t r = 0; r < rows; ++r) {
            if (!row_mask[r]) continue;
            const float* zr = logits.data().data() + r * w;
            const float* tr = targets.data().data() + r * w;
            for (int64_t j = 0; j < w; ++j) {
                double z = zr[j], t = tr[j];
                total += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)));
            }
        }
        Tensor loss = Tensor::scalar(float(total / double(cells)));
        if (track(loss, {logits})) {
            record([logits, targets, loss, row_mask = std::move(row_mask), rows, w,
                    cells]() mutable {
                if (!loss.has_grad() || !logits.requires_grad()) return;
                const float dl = loss.grad()[0] / float(cells);
                float* dx = logits.grad().data();
                for (int64_t r = 0; r < rows; ++r) {
                    if (!row_mask[r]) continue;
                    const float* zr = logits.data().data() + r * w;
                    const float* tr = targets.data().data() + r * w;
                    for (int64_t j = 0; j < w; ++j) {
                        float s = 1.0f / (1.0f + std::exp(-zr[j]));
                        dx[r * w + j] += dl * (s - tr[j]);
                    }
                }
            });
        }
        return loss;
    }

    Tensor sum(Tensor x) {
        double total = 0.0;
        for (float f : x.data()) total += f;
        Tensor s = Tensor::scalar(float(total));
        if (track(s, {x})) {
            record([x, s]() mutable {
                if (!s.has_grad() || !x.requires_grad()) return;
                const float ds = s.grad()[0];
                for (auto& g : x.grad()) g += ds;
            });
        }
        return s;
    }

    // Populates .grad on every requires_grad tensor reachable from loss.
    void backward(Tensor loss) {
        if (loss.numel() != 1)
            throw ShapeError("backward requires a scalar loss, got " + shape_str(loss.shape()));
        loss.ensure_grad();
        loss.grad()[0] += 1.0f;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
        nodes_.clear();
    }

private:
    bool track(Tensor& out, std::initializer_list<Tensor> inputs) {
        if (!grad_enabled_) return false;
        bool any = false;
        for (const auto& t : inputs) any = any || t.requires_grad();
        if (any) out.set_requires_grad(true);
        return any;
    }

    void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }

    bool grad_enabled_;
    std::vector<std::function<void()>> nodes_;
};

}  // namespace proctrain
