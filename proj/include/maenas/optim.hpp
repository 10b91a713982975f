#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "maenas/autograd.hpp"

namespace maenas {

inline double cosine_lr(double lr_max, double lr_min, int epoch, int total_epochs) {
    if (total_epochs <= 0) return lr_max;
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(3.141592653589793 * epoch / total_epochs));
}

/// Rescales gradients so their global L2 norm is at most max_norm. Returns the norm before clipping.
inline double clip_grad_norm(const std::vector<Var>& params, double max_norm) {
    double sq = 0;
    for (const auto& p : params)
        if (p.has_grad()) sq += p.grad().squared_norm();
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0) {
        const float f = static_cast<float>(max_norm / (norm + 1e-6));
        for (auto p : params)
            if (p.has_grad()) p.mutable_grad().scale(f);
    }
    return norm;
}

/// Momentum SGD with L2 weight decay folded into the gradient.
class Sgd {
public:
    Sgd(std::vector<Var> params, double momentum, double weight_decay)
        : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
        for (const auto& p : params_) buffers_.push_back(zeros_like(p.value()));
    }

    void step(double lr) {
        for (size_t i = 0; i < params_.size(); ++i) {
            Var p = params_[i];
            if (!p.has_grad()) continue;
            Tensor& w = p.mutable_value();
            const Tensor& g = p.grad();
            Tensor& b = buffers_[i];
            for (size_t j = 0; j < w.numel(); ++j) {
                const float d = g[j] + static_cast<float>(weight_decay_) * w[j];
                b[j] = static_cast<float>(momentum_) * b[j] + d;
                w[j] -= static_cast<float>(lr) * b[j];
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    const std::vector<Var>& params() const { return params_; }
    std::vector<Tensor>& momentum_buffers() { return buffers_; }
    const std::vector<Tensor>& momentum_buffers() const { return buffers_; }
    double momentum() const { return momentum_; }
    double weight_decay() const { return weight_decay_; }

private:
    std::vector<Var> params_;
    std::vector<Tensor> buffers_;
    double momentum_;
    double weight_decay_;
};

/// Adam with L2 weight decay folded into the gradient.
class Adam {
public:
    Adam(std::vector<Var> params, double lr, double beta1, double beta2, double weight_decay, double eps = 1e-8)
        : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), weight_decay_(weight_decay), eps_(eps) {
        for (const auto& p : params_) {
            m_.push_back(zeros_like(p.value()));
            v_.push_back(zeros_like(p.value()));
        }
    }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (size_t i = 0; i < params_.size(); ++i) {
            Var p = params_[i];
            if (!p.has_grad()) continue;
            Tensor& w = p.mutable_value();
            const Tensor& g = p.grad();
            for (size_t j = 0; j < w.numel(); ++j) {
                const double d = g[j] + weight_decay_ * w[j];
                m_[i][j] = static_cast<float>(beta1_ * m_[i][j] + (1 - beta1_) * d);
                v_[i][j] = static_cast<float>(beta2_ * v_[i][j] + (1 - beta2_) * d * d);
                const double denom = std::sqrt(v_[i][j] / bc2) + eps_;
                w[j] -= static_cast<float>(lr_ * (m_[i][j] / bc1) / denom);
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    double lr() const { return lr_; }
    void set_lr(double lr) { lr_ = lr; }
    int64_t steps() const { return t_; }
    void set_steps(int64_t t) { t_ = t; }
    std::vector<Tensor>& first_moments() { return m_; }
    std::vector<Tensor>& second_moments() { return v_; }

private:
    std::vector<Var> params_;
    std::vector<Tensor> m_, v_;
    double lr_, beta1_, beta2_, weight_decay_, eps_;
    int64_t t_ = 0;
};

} // namespace maenas
