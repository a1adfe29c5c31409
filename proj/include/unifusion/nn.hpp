#pragma once

#include "unifusion/param_store.hpp"
#include "unifusion/rng.hpp"
#include "unifusion/tensor.hpp"

#include <set>
#include <string>

namespace unifusion::nn {

// Low-rank adapters attached to named linear layers. Adapter parameters live
// under "lora.<layer>" so a single freeze prefix covers them all.
struct LoraSet {
    int rank = 0;
    double scale = 0.0; // alpha / rank
    std::set<std::string> layers;

    bool adapts(const std::string& layer) const { return rank > 0 && layers.count(layer) > 0; }
};

// weights are [in x out]; y = x W + b
void init_linear(ParamStore& ps, const std::string& prefix, int in, int out, RngStream& rng,
                 bool bias = true);
Tensor linear(Tape* tp, ParamStore& ps, const std::string& prefix, const Tensor& x,
              const LoraSet* lora = nullptr);

void init_layernorm(ParamStore& ps, const std::string& prefix, int d);
Tensor layer_norm(Tape* tp, ParamStore& ps, const std::string& prefix, const Tensor& x);

// multi-head attention; kv may have a different width than q
void init_attention(ParamStore& ps, const std::string& prefix, int d, int d_kv, RngStream& rng);
Tensor attention(Tape* tp, ParamStore& ps, const std::string& prefix, const Tensor& xq,
                 const Tensor& xkv, const Tensor* mask, int n_heads, const LoraSet* lora = nullptr);

void init_ffn(ParamStore& ps, const std::string& prefix, int d, int hidden, RngStream& rng);
Tensor ffn(Tape* tp, ParamStore& ps, const std::string& prefix, const Tensor& x,
           const LoraSet* lora = nullptr);

// fixed sin/cos table, rows are positions
Tensor sinusoid_table(int n_pos, int d);

// LoRA lifecycle: apply creates lora.<layer>.{a,b} (a seeded normal, b zero),
// merge folds scale*A*B into the base weight and removes the adapter.
void lora_apply(ParamStore& ps, const std::string& layer, int rank, RngStream& rng);
void lora_merge(ParamStore& ps, const std::string& layer, double scale);

} // namespace unifusion::nn
