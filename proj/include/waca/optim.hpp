#pragma once

#include <cmath>
#include <numbers>

#include "waca/tensor.hpp"

namespace waca {

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// Moment buffers keyed by parameter name; t counts completed steps.
struct AdamWState {
    std::map<std::string, std::vector<double>> m, v;
    std::size_t t = 0;
};

// One AdamW step over every parameter. Decoupled decay: theta is first shrunk
// by (1 - lr * wd), then moved by the bias-corrected adaptive step.
template <class T>
void adamw_step(ParamSet<T>& params, AdamWState& state, double lr, const AdamWConfig& cfg = {}) {
    state.t += 1;
    const double t = static_cast<double>(state.t);
    const double c1 = 1.0 - std::pow(cfg.beta1, t);
    const double c2 = 1.0 - std::pow(cfg.beta2, t);
    for (auto& [name, p] : params) {
        auto theta = p.mutable_data();
        auto g = p.grad();
        auto& m = state.m[name];
        auto& v = state.v[name];
        if (m.size() != theta.size()) {
            m.assign(theta.size(), 0.0);
            v.assign(theta.size(), 0.0);
        }
        for (std::size_t i = 0; i < theta.size(); ++i) {
            const double gi = static_cast<double>(g[i]);
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            double x = static_cast<double>(theta[i]);
            x *= 1.0 - lr * cfg.weight_decay;
            x -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.eps);
            theta[i] = static_cast<T>(x);
        }
    }
}

// lr_min + (lr_max - lr_min) * (1 + cos(pi * step / total)) / 2.
inline double cosine_lr(std::size_t step, std::size_t total_steps, double lr_max, double lr_min) {
    if (total_steps == 0) return lr_max;
    const double frac = static_cast<double>(std::min(step, total_steps)) / static_cast<double>(total_steps);
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * frac));
}

}  // namespace waca
