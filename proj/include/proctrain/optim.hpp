#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "proctrain/tensor.hpp"

namespace proctrain {

// AdamW with decoupled weight decay: decay is applied directly to the
// weights, not through the gradient. Moments are bias-corrected.
class AdamW {
public:
    AdamW(std::vector<Tensor> params, double beta1 = 0.9, double beta2 = 0.999,
          double eps = 1e-8, double weight_decay = 0.0)
        : params_(std::move(params)),
          beta1_(beta1),
          beta2_(beta2),
          eps_(eps),
          weight_decay_(weight_decay) {
        m_.resize(params_.size());
        v_.resize(params_.size());
        for (size_t i = 0; i < params_.size(); ++i) {
            m_[i].assign(static_cast<size_t>(params_[i].numel()), 0.0f);
            v_[i].assign(static_cast<size_t>(params_[i].numel()), 0.0f);
        }
    }

    int64_t step_count() const { return t_; }

    void step(double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, double(t_));
        const double bc2 = 1.0 - std::pow(beta2_, double(t_));
        for (size_t i = 0; i < params_.size(); ++i) {
            Tensor& p = params_[i];
            const bool has_grad = p.has_grad();
            auto w = p.data();
            auto g = p.grad();  // allocates zeros if absent; decay still applies
            (void)has_grad;
            float* mp = m_[i].data();
            float* vp = v_[i].data();
            const int64_t n = p.numel();
            for (int64_t j = 0; j < n; ++j) {
                const double gj = g[j];
                mp[j] = float(beta1_ * mp[j] + (1.0 - beta1_) * gj);
                vp[j] = float(beta2_ * vp[j] + (1.0 - beta2_) * gj * gj);
                const double mhat = mp[j] / bc1;
                const double vhat = vp[j] / bc2;
                double wj = w[j];
                wj -= lr * weight_decay_ * wj;
                wj -= lr * mhat / (std::sqrt(vhat) + eps_);
                w[j] = float(wj);
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<float>> m_, v_;
    double beta1_, beta2_, eps_, weight_decay_;
    int64_t t_ = 0;
};

// Scales all gradients so the global L2 norm is at most max_norm.
// Returns the pre-clip norm.
inline double clip_grad_norm(std::vector<Tensor>& params, double max_norm) {
    double sq = 0.0;
    for (auto& p : params) {
        if (!p.has_grad()) continue;
        for (float g : p.grad()) sq += double(g) * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const float scale = float(max_norm / norm);
        for (auto& p : params) {
            if (!p.has_grad()) continue;
            for (auto& g : p.grad()) g *= scale;
        }
    }
    return norm;
}

}  // namespace proctrain
