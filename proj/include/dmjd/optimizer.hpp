#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dmjd/model.hpp"

namespace dmjd {

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.05;

    void validate() const {
        if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
            throw config_error("AdamW: betas must lie in [0,1)");
        if (!(eps > 0.0)) throw config_error("AdamW: eps must be positive");
        if (weight_decay < 0.0) throw config_error("AdamW: weight_decay must be >= 0");
    }
};

// AdamW with decoupled weight decay: the decay multiplies parameters before
// the bias-corrected moment update. Parameters flagged weight_decay=false
// (normalization gains/biases, the mask token) skip the decay term.
template <typename T>
class AdamW {
public:
    AdamW(const ParamSet<T>& params, AdamWConfig cfg) : cfg_(cfg) {
        cfg.validate();
        for (const auto& e : params.entries()) {
            m_.emplace_back(e.tensor.numel(), T(0));
            v_.emplace_back(e.tensor.numel(), T(0));
        }
    }

    void step(ParamSet<T>& params, double lr) {
        if (params.entries().size() != m_.size())
            throw contract_error("AdamW::step: parameter set changed size");
        ++t_;
        const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
        const T bc1 = T(1) - static_cast<T>(std::pow(cfg_.beta1, t_));
        const T bc2 = T(1) - static_cast<T>(std::pow(cfg_.beta2, t_));
        const T eps = static_cast<T>(cfg_.eps);
        const T step_lr = static_cast<T>(lr);
        for (std::size_t pi = 0; pi < params.entries().size(); ++pi) {
            auto& entry = params.entries()[pi];
            auto vals = entry.tensor.values_mut();
            const bool has_grad = entry.tensor.has_grad();
            std::span<const T> g;
            if (has_grad) {
                g = entry.tensor.grad();
                const T lim = std::numeric_limits<T>::max();
                for (T gv : g) {
                    if (!(std::fabs(gv) <= lim))
                        throw numeric_error("AdamW: non-finite gradient in parameter '" + entry.name + "'");
                }
            }
            if (entry.weight_decay && cfg_.weight_decay != 0.0) {
                const T keep = T(1) - step_lr * static_cast<T>(cfg_.weight_decay);
                for (auto& v : vals) v *= keep;
            }
            auto& m = m_[pi];
            auto& v = v_[pi];
            for (std::size_t i = 0; i < vals.size(); ++i) {
                const T gi = has_grad ? g[i] : T(0);
                m[i] = b1 * m[i] + (T(1) - b1) * gi;
                v[i] = b2 * v[i] + (T(1) - b2) * gi * gi;
                const T mhat = m[i] / bc1;
                const T vhat = v[i] / bc2;
                vals[i] -= step_lr * mhat / (std::sqrt(vhat) + eps);
            }
        }
    }

    long step_count() const { return t_; }

private:
    AdamWConfig cfg_;
    std::vector<std::vector<T>> m_, v_;
    long t_ = 0;
};

}  // namespace dmjd
