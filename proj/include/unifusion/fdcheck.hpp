#pragma once

// Central finite-difference gradient oracle over a parameter store. This is
// diagnostic machinery: it re-evaluates the forward pass at perturbed
// parameter values and never touches the tape's backward path, so it stays
// an independent check of the analytic gradients.

#include "unifusion/param_store.hpp"
#include "unifusion/rng.hpp"
#include "unifusion/tensor.hpp"

#include <cmath>
#include <functional>
#include <string>

namespace unifusion::fd {

inline double rel_err(double a, double b) {
    const double denom = std::max({std::fabs(a), std::fabs(b), 1e-3});
    return std::fabs(a - b) / denom;
}

struct ParamCheckResult {
    double max_rel_err = 0.0;
    std::string worst_param;
    int coords_checked = 0;
};

// Checks every trainable parameter's analytic gradient against central
// differences of the re-evaluated loss. coords_per_param < 0 sweeps every
// coordinate; otherwise a seeded random subset per tensor.
inline ParamCheckResult max_rel_error_params(ParamStore& store,
                                             const std::function<Tensor(Tape*)>& loss_fn,
                                             double h = 1e-5, int coords_per_param = -1,
                                             RngStream* pick = nullptr) {
    store.zero_grads();
    Tape tape;
    store.begin_tape(&tape);
    Tensor loss = loss_fn(&tape);
    backward(tape, loss, store);

    ParamCheckResult res;
    for (const auto& name : store.names()) {
        if (!store.trainable(name) || !store.has_grad(name)) continue;
        const auto& g = store.grad(name);
        Tensor& p = store.param(name);
        std::vector<int> coords;
        if (coords_per_param < 0 || coords_per_param >= p.numel()) {
            coords.resize(p.numel());
            for (int i = 0; i < p.numel(); ++i) coords[i] = i;
        } else {
            for (int k = 0; k < coords_per_param; ++k) coords.push_back(pick->uniform_int(p.numel()));
        }
        for (int i : coords) {
            const double orig = p.at(i);
            p.at(i) = orig + h;
            const double up = loss_fn(nullptr).value();
            p.at(i) = orig - h;
            const double dn = loss_fn(nullptr).value();
            p.at(i) = orig;
            const double numeric = (up - dn) / (2.0 * h);
            const double e = rel_err(g[i], numeric);
            ++res.coords_checked;
            if (e > res.max_rel_err) {
                res.max_rel_err = e;
                res.worst_param = name;
            }
        }
    }
    return res;
}

} // namespace unifusion::fd
