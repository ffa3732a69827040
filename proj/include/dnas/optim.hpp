#pragma once

#include <dnas/tensor.hpp>

#include <cmath>
#include <numbers>
#include <vector>

namespace dnas {

/// lr(e) = lr0 * 0.5 * (1 + cos(pi * e / total)), clamped to the schedule end.
inline double cosine_lr(double lr0, int epoch, int total_epochs) {
    if (total_epochs <= 0) return lr0;
    const double progress = std::min(1.0, static_cast<double>(std::max(epoch, 0)) / total_epochs);
    return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

struct SgdConfig {
    double lr = 0.2;
    double momentum = 0.9;
    double weight_decay = 5e-4;
};

struct AdamConfig {
    double lr = 5e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-3;
};

/// v <- m*v + g + wd*p ; p <- p - lr*v. A parameter without a gradient is
/// treated as having a zero gradient.
template <class T>
class SgdMomentum {
public:
    SgdMomentum(std::vector<Tensor<T>> params, SgdConfig config) : params_(std::move(params)), config_(config) {
        for (const auto& p : params_) velocity_.emplace_back(p.numel(), T{0});
    }

    void step(double lr) {
        const T m = static_cast<T>(config_.momentum), wd = static_cast<T>(config_.weight_decay);
        const T rate = static_cast<T>(lr);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto p = params_[i].data();
            const auto g = params_[i].grad();
            const bool has = params_[i].has_grad();
            auto& v = velocity_[i];
            for (std::size_t j = 0; j < p.size(); ++j) {
                v[j] = m * v[j] + (has ? g[j] : T{0}) + wd * p[j];
                p[j] -= rate * v[j];
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    const SgdConfig& config() const { return config_; }
    const std::vector<std::vector<T>>& velocity() const { return velocity_; }

private:
    std::vector<Tensor<T>> params_;
    SgdConfig config_;
    std::vector<std::vector<T>> velocity_;
};

/// Bias-corrected Adam with coupled L2 weight decay (added to the gradient).
template <class T>
class Adam {
public:
    Adam(std::vector<Tensor<T>> params, AdamConfig config) : params_(std::move(params)), config_(config) {
        for (const auto& p : params_) {
            first_.emplace_back(p.numel(), 0.0);
            second_.emplace_back(p.numel(), 0.0);
        }
    }

    void step() { step(config_.lr); }

    void step(double lr) {
        ++t_;
        const double b1 = config_.beta1, b2 = config_.beta2;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto p = params_[i].data();
            const auto g = params_[i].grad();
            const bool has = params_[i].has_grad();
            for (std::size_t j = 0; j < p.size(); ++j) {
                const double grad = (has ? static_cast<double>(g[j]) : 0.0) + config_.weight_decay * p[j];
                first_[i][j] = b1 * first_[i][j] + (1.0 - b1) * grad;
                second_[i][j] = b2 * second_[i][j] + (1.0 - b2) * grad * grad;
                const double mhat = first_[i][j] / c1, vhat = second_[i][j] / c2;
                p[j] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + config_.eps));
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    long steps() const { return t_; }

private:
    std::vector<Tensor<T>> params_;
    AdamConfig config_;
    std::vector<std::vector<double>> first_, second_;
    long t_ = 0;
};

} // namespace dnas
