#pragma once

#include "unifusion/model_config.hpp"
#include "unifusion/nn.hpp"
#include "unifusion/param_store.hpp"
#include "unifusion/synthdata.hpp"

#include <optional>
#include <string>
#include <vector>

namespace unifusion::enc {

enum class MaskMode { Unimodal, Bidirectional, TextOnly };

// Additive attention mask over the concatenation [queries; text]:
// 0 where attention is allowed, -inf where blocked.
Tensor build_mask(MaskMode mode, int n_q, int n_t);

struct EncoderOutput {
    Tensor z_query; // [n_q x d_model], present iff a query bank was supplied
    Tensor z_text;  // [n_t x d_model], present iff text was supplied
    Tensor e_cls;   // [1 x d_model], the output at the [CLS] text position
    bool has_query = false;
    bool has_text = false;
};

// Query banks; q_t is used with image-only input, q_r with image+text.
enum class Bank { q, q_r, q_t };
const char* bank_param(Bank b);

// The frozen patch encoder plus the querying transformer with switchable
// masks, the shared-embedding projection heads, the listwise matching
// scorer and the two task-specific adapters.
class MultimodalEncoder {
public:
    MultimodalEncoder(ParamStore& ps, const ModelConfig& cfg) : ps_(ps), cfg_(cfg) {}

    // creates imgenc.*, qformer.*, queries.*, proj.*, itm.*, temp.*, adapter.*
    void init_params(RngStream& rng);

    // frozen, deterministic: per-patch linear projection plus fixed
    // sinusoidal position encodings
    Tensor patch_encode(const synth::ImageF& img) const;

    EncoderOutput forward(Tape* tp, const Tensor* patches, const std::vector<int>* tokens,
                          std::optional<Bank> bank, MaskMode mode);

    // affine projection (no bias) into the shared embedding space, then L2
    // normalization; separate heads for query-side and text-side rows
    Tensor embed_project(Tape* tp, const Tensor& rows, bool text_side);

    // learnable temperature, stored as log-temperature, clamped at 100
    Tensor temperature(Tape* tp);

    // f(X, y) = max_k < W_m x_k, W_m' y >
    Tensor itm_score(Tape* tp, const Tensor& z_query, const Tensor& e_cls);
    Tensor itm_project_candidates(Tape* tp, const Tensor& rows); // W_m side
    Tensor itm_project_anchor(Tape* tp, const Tensor& rows);     // W_m' side

    Tensor adapt_text(Tape* tp, const Tensor& z_query);  // -> [n_q x d_lm]
    Tensor adapt_image(Tape* tp, const Tensor& z_query); // -> [n_q x d_cond]

    const ModelConfig& config() const { return cfg_; }
    ParamStore& store() { return ps_; }

private:
    ParamStore& ps_;
    ModelConfig cfg_;
    mutable Tensor patch_pos_; // fixed sinusoid, built on first use
};

} // namespace unifusion::enc
