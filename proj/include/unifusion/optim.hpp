#pragma once

#include "unifusion/param_store.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace unifusion {

struct AdamWState {
    double beta0 = 0.9;
    double beta1 = 0.99;
    double eps = 1e-8;
    double weight_decay = 0.0;
    std::int64_t step = 0;
    std::map<std::string, std::vector<double>> m;
    std::map<std::string, std::vector<double>> v;
};

// Decoupled-weight-decay Adam with bias correction. Updates every trainable
// parameter in the store; frozen parameters are untouched. A trainable
// parameter without a gradient is a consistency error.
void adamw_step(ParamStore& store, AdamWState& state, double lr_t);

// Scales all gradients so their global L2 norm does not exceed max_norm.
// Returns the pre-clip norm.
double clip_grad_norm(ParamStore& store, double max_norm);

// Installs zero gradients for trainable parameters the loss did not reach.
// Parameters with stochastic participation (the null-condition row) sit out
// of some steps; their Adam update still applies with a zero gradient.
void zero_fill_missing_grads(ParamStore& store);

// Linear ramp to base_lr over ceil(warmup_frac*total_steps) steps, then
// cosine decay to 0 at total_steps.
double cosine_warmup_lr(int step, int total_steps, double base_lr, double warmup_frac);

} // namespace unifusion
