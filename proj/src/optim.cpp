#include "unifusion/optim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace unifusion {

void adamw_step(ParamStore& store, AdamWState& state, double lr_t) {
    ++state.step;
    const double bc0 = 1.0 - std::pow(state.beta0, static_cast<double>(state.step));
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    for (auto& [name, p] : store.all()) {
        if (!store.trainable(name)) continue;
        if (!store.has_grad(name))
            throw std::logic_error("adamw_step: trainable parameter has no gradient: " + name);
        auto& g = store.grad(name);
        auto& m = state.m[name];
        auto& v = state.v[name];
        if (m.empty()) m.assign(g.size(), 0.0);
        if (v.empty()) v.assign(g.size(), 0.0);
        if (g.size() != static_cast<std::size_t>(p.numel()))
            throw std::logic_error("adamw_step: gradient size mismatch for " + name);
        for (std::size_t i = 0; i < g.size(); ++i) {
            m[i] = state.beta0 * m[i] + (1.0 - state.beta0) * g[i];
            v[i] = state.beta1 * v[i] + (1.0 - state.beta1) * g[i] * g[i];
            const double mhat = m[i] / bc0;
            const double vhat = v[i] / bc1;
            double& w = (*p.data)[i];
            w -= lr_t * (mhat / (std::sqrt(vhat) + state.eps) + state.weight_decay * w);
        }
    }
}

double clip_grad_norm(ParamStore& store, double max_norm) {
    double sq = 0.0;
    for (const auto& name : store.names()) {
        if (!store.trainable(name) || !store.has_grad(name)) continue;
        for (double g : store.grad(name)) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double s = max_norm / norm;
        for (const auto& name : store.names()) {
            if (!store.trainable(name) || !store.has_grad(name)) continue;
            for (double& g : store.grad(name)) g *= s;
        }
    }
    return norm;
}

void zero_fill_missing_grads(ParamStore& store) {
    for (auto& [name, p] : store.all()) {
        if (!store.trainable(name) || store.has_grad(name)) continue;
        store.install_zero_grad(name, static_cast<std::size_t>(p.numel()));
    }
}

double cosine_warmup_lr(int step, int total_steps, double base_lr, double warmup_frac) {
    if (step < 0 || step > total_steps)
        throw std::invalid_argument("cosine_warmup_lr: step outside [0, total_steps]");
    if (warmup_frac <= 0.0 || warmup_frac >= 1.0)
        throw std::invalid_argument("cosine_warmup_lr: warmup_frac must be in (0, 1)");
    const int warmup = static_cast<int>(std::ceil(warmup_frac * total_steps));
    if (step <= warmup) return base_lr * static_cast<double>(step) / warmup;
    const double t = static_cast<double>(step - warmup) / (total_steps - warmup);
    return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * t));
}

} // namespace unifusion
