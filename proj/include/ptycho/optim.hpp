#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ptycho/tensor.hpp"

namespace ptycho::nn {

enum class OptKind { sgd, adam };

// SGD or Adam (beta1 0.9, beta2 0.999, eps 1e-8, bias-corrected) over a fixed
// parameter list. Frozen parameters (requires_grad off) are skipped and their
// moment buffers left untouched; reset_moments() implements the contract that
// a layer unfrozen mid-run restarts with zeroed moments.
class Optimizer {
  public:
    Optimizer(OptKind kind, double lr, std::vector<Tensor> params)
        : kind_(kind), lr_(lr), params_(std::move(params)) {
        if (!(lr_ > 0.0)) throw DomainError("learning rate must be positive, got " + std::to_string(lr_));
        state_.resize(params_.size());
        for (size_t i = 0; i < params_.size(); ++i) {
            state_[i].m.assign(params_[i].numel(), 0.0);
            state_[i].v.assign(params_[i].numel(), 0.0);
        }
    }

    double lr() const { return lr_; }
    void set_lr(double lr) { lr_ = lr; }
    const std::vector<Tensor>& params() const { return params_; }

    void zero_grad() {
        for (Tensor& p : params_)
            if (p.has_grad()) p.zero_grad();
    }

    void step() {
        for (size_t i = 0; i < params_.size(); ++i) {
            Tensor& p = params_[i];
            if (!p.requires_grad()) continue;  // frozen
            if (!p.has_grad()) throw Error("optimizer step with missing grad on parameter " + std::to_string(i));
            const std::vector<double>& g = p.impl()->g;
            std::vector<double>& w = p.val();
            if (kind_ == OptKind::sgd) {
                for (size_t k = 0; k < w.size(); ++k) w[k] -= lr_ * g[k];
            } else {
                State& s = state_[i];
                s.t += 1;
                const double c1 = 1.0 - std::pow(beta1_, double(s.t));
                const double c2 = 1.0 - std::pow(beta2_, double(s.t));
                for (size_t k = 0; k < w.size(); ++k) {
                    s.m[k] = beta1_ * s.m[k] + (1.0 - beta1_) * g[k];
                    s.v[k] = beta2_ * s.v[k] + (1.0 - beta2_) * g[k] * g[k];
                    const double mhat = s.m[k] / c1;
                    const double vhat = s.v[k] / c2;
                    w[k] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
                }
            }
        }
    }

    // Zeroes first/second moments and the step counter of one parameter.
    void reset_moments(const Tensor& param) {
        for (size_t i = 0; i < params_.size(); ++i) {
            if (params_[i].impl() == param.impl()) {
                state_[i].m.assign(params_[i].numel(), 0.0);
                state_[i].v.assign(params_[i].numel(), 0.0);
                state_[i].t = 0;
                return;
            }
        }
        throw Error("reset_moments: parameter not managed by this optimizer");
    }

    void reset_all_moments() {
        for (size_t i = 0; i < params_.size(); ++i) {
            state_[i].m.assign(params_[i].numel(), 0.0);
            state_[i].v.assign(params_[i].numel(), 0.0);
            state_[i].t = 0;
        }
    }

  private:
    struct State {
        std::vector<double> m, v;
        std::uint64_t t = 0;
    };

    OptKind kind_;
    double lr_;
    double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
    std::vector<Tensor> params_;
    std::vector<State> state_;
};

}  // namespace ptycho::nn
