#include "unifusion/encoders.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace unifusion::enc {

namespace {
const double kInf = std::numeric_limits<double>::infinity();
}

const char* bank_param(Bank b) {
    switch (b) {
    case Bank::q: return "queries.q";
    case Bank::q_r: return "queries.q_r";
    case Bank::q_t: return "queries.q_t";
    }
    return "?";
}

Tensor build_mask(MaskMode mode, int n_q, int n_t) {
    if (n_q < 0 || n_t < 0) throw std::invalid_argument("build_mask: negative sizes");
    const int s = n_q + n_t;
    Tensor m = Tensor::zeros({s, s});
    if (mode == MaskMode::Unimodal) {
        for (int i = 0; i < s; ++i)
            for (int j = 0; j < s; ++j) {
                const bool iq = i < n_q, jq = j < n_q;
                if (iq != jq) m.at(i * s + j) = -kInf;
            }
    } else if (mode == MaskMode::TextOnly) {
        if (n_q != 0) throw std::invalid_argument("build_mask: TextOnly with query positions");
    }
    return m;
}

void MultimodalEncoder::init_params(RngStream& rng) {
    const auto& c = cfg_;
    // frozen image encoder: seeded projection, zero bias
    ps_.create_normal("imgenc.w", {c.patch_dim(), c.d_img}, 1.0 / std::sqrt(static_cast<double>(c.patch_dim())), rng);
    ps_.create_full("imgenc.b", {c.d_img}, 0.0);

    ps_.create_normal("queries.q", {c.n_q, c.d_model}, 0.1, rng);
    ps_.create_normal("queries.q_r", {c.n_q, c.d_model}, 0.1, rng);
    ps_.create_normal("queries.q_t", {c.n_q, c.d_model}, 0.1, rng);

    ps_.create_normal("qformer.tok_emb", {c.vocab_size, c.d_model}, 0.1, rng);
    ps_.create_normal("qformer.pos_emb", {c.text_max_len + 1, c.d_model}, 0.1, rng);
    ps_.create_normal("qformer.cls", {1, c.d_model}, 0.1, rng);
    for (int b = 0; b < c.n_blocks; ++b) {
        const std::string p = "qformer.b" + std::to_string(b);
        nn::init_layernorm(ps_, p + ".ln1", c.d_model);
        nn::init_attention(ps_, p + ".attn", c.d_model, c.d_model, rng);
        nn::init_layernorm(ps_, p + ".ln2", c.d_model);
        nn::init_attention(ps_, p + ".cross", c.d_model, c.d_img, rng);
        nn::init_layernorm(ps_, p + ".ln3", c.d_model);
        nn::init_ffn(ps_, p + ".ffn", c.d_model, 4 * c.d_model, rng);
    }
    nn::init_layernorm(ps_, "qformer.lnf", c.d_model);

    nn::init_linear(ps_, "proj.query", c.d_model, c.d_e, rng, /*bias=*/false);
    nn::init_linear(ps_, "proj.text", c.d_model, c.d_e, rng, /*bias=*/false);
    nn::init_linear(ps_, "itm.wx", c.d_model, c.d_itm, rng, /*bias=*/false);
    nn::init_linear(ps_, "itm.wy", c.d_model, c.d_itm, rng, /*bias=*/false);
    ps_.create_full("temp.log_lambda", {1}, std::log(1.0 / 0.07));

    nn::init_linear(ps_, "adapter.text", c.d_model, c.d_lm, rng);
    nn::init_linear(ps_, "adapter.image", c.d_model, c.d_cond, rng);
}

Tensor MultimodalEncoder::patch_encode(const synth::ImageF& img) const {
    const auto& c = cfg_;
    if (c.image_size % c.patch != 0)
        throw std::invalid_argument("patch_encode: image size not divisible by patch size");
    if (img.rgb.size() != static_cast<std::size_t>(c.image_size) * c.image_size * 3)
        throw std::invalid_argument("patch_encode: image does not match configured size");
    const int per_side = c.image_size / c.patch;
    const int n_patch = per_side * per_side;
    Tensor patches = Tensor::zeros({n_patch, c.patch_dim()});
    for (int py = 0; py < per_side; ++py)
        for (int px = 0; px < per_side; ++px) {
            const int row = py * per_side + px;
            int k = 0;
            for (int dy = 0; dy < c.patch; ++dy)
                for (int dx = 0; dx < c.patch; ++dx)
                    for (int ch = 0; ch < 3; ++ch) {
                        const int y = py * c.patch + dy, x = px * c.patch + dx;
                        patches.at(row, k++) = img.rgb[(y * c.image_size + x) * 3 + ch];
                    }
        }
    // frozen weights: no tape involvement ever
    Tensor feats = matmul(nullptr, patches, ps_.param("imgenc.w"));
    feats = add_rowvec(nullptr, feats, ps_.param("imgenc.b"));
    if (patch_pos_.numel() == 0) patch_pos_ = nn::sinusoid_table(n_patch, c.d_img);
    return add(nullptr, feats, patch_pos_);
}

EncoderOutput MultimodalEncoder::forward(Tape* tp, const Tensor* patches,
                                         const std::vector<int>* tokens,
                                         std::optional<Bank> bank, MaskMode mode) {
    const auto& c = cfg_;
    if (!bank && !tokens)
        throw std::invalid_argument("qformer: need a query bank or text");
    if ((bank != std::nullopt) != (patches != nullptr))
        throw std::invalid_argument("qformer: patch features required exactly when a bank is used");
    if ((mode == MaskMode::TextOnly) != (bank == std::nullopt))
        throw std::invalid_argument("qformer: TextOnly mode is for text-only input");
    if (tokens && static_cast<int>(tokens->size()) > c.text_max_len)
        throw std::invalid_argument("qformer: text longer than max_len");

    const int n_q = bank ? c.n_q : 0;
    int n_t = 0;
    std::vector<Tensor> rows;
    if (bank) rows.push_back(ps_.use(tp, bank_param(*bank)));
    if (tokens) {
        Tensor emb = embedding_lookup(tp, ps_.use(tp, "qformer.tok_emb"), *tokens);
        Tensor with_cls = concat_rows(tp, {ps_.use(tp, "qformer.cls"), emb});
        n_t = with_cls.rows();
        Tensor pos = slice_rows(tp, ps_.use(tp, "qformer.pos_emb"), 0, n_t);
        rows.push_back(add(tp, with_cls, pos));
    }
    Tensor x = rows.size() == 1 ? rows[0] : concat_rows(tp, rows);
    const Tensor mask = build_mask(mode, n_q, n_t);

    for (int b = 0; b < c.n_blocks; ++b) {
        const std::string p = "qformer.b" + std::to_string(b);
        Tensor h = nn::layer_norm(tp, ps_, p + ".ln1", x);
        x = add(tp, x, nn::attention(tp, ps_, p + ".attn", h, h, &mask, c.n_heads));
        if (n_q > 0) {
            // cross-attention is restricted to query positions
            Tensor xq = n_t > 0 ? slice_rows(tp, x, 0, n_q) : x;
            Tensor hq = nn::layer_norm(tp, ps_, p + ".ln2", xq);
            xq = add(tp, xq, nn::attention(tp, ps_, p + ".cross", hq, *patches, nullptr, c.n_heads));
            x = n_t > 0 ? concat_rows(tp, {xq, slice_rows(tp, x, n_q, n_t)}) : xq;
        }
        Tensor h2 = nn::layer_norm(tp, ps_, p + ".ln3", x);
        x = add(tp, x, nn::ffn(tp, ps_, p + ".ffn", h2));
    }
    x = nn::layer_norm(tp, ps_, "qformer.lnf", x);

    EncoderOutput out;
    if (n_q > 0) {
        out.z_query = n_t > 0 ? slice_rows(tp, x, 0, n_q) : x;
        out.has_query = true;
    }
    if (n_t > 0) {
        out.z_text = n_q > 0 ? slice_rows(tp, x, n_q, n_t) : x;
        out.e_cls = slice_rows(tp, out.z_text, 0, 1);
        out.has_text = true;
    }
    return out;
}

Tensor MultimodalEncoder::embed_project(Tape* tp, const Tensor& rows, bool text_side) {
    return l2_normalize_rows(tp, nn::linear(tp, ps_, text_side ? "proj.text" : "proj.query", rows));
}

Tensor MultimodalEncoder::temperature(Tape* tp) {
    return clamp_max(tp, exp_elem(tp, ps_.use(tp, "temp.log_lambda")), 100.0);
}

Tensor MultimodalEncoder::itm_project_candidates(Tape* tp, const Tensor& rows) {
    return nn::linear(tp, ps_, "itm.wx", rows);
}

Tensor MultimodalEncoder::itm_project_anchor(Tape* tp, const Tensor& rows) {
    return nn::linear(tp, ps_, "itm.wy", rows);
}

Tensor MultimodalEncoder::itm_score(Tape* tp, const Tensor& z_query, const Tensor& e_cls) {
    Tensor px = itm_project_candidates(tp, z_query);      // [n_q x d_itm]
    Tensor py = itm_project_anchor(tp, e_cls);            // [1 x d_itm]
    Tensor scores = matmul(tp, px, transpose(tp, py));    // [n_q x 1]
    return row_max(tp, transpose(tp, scores));            // [1]
}

Tensor MultimodalEncoder::adapt_text(Tape* tp, const Tensor& z_query) {
    return nn::linear(tp, ps_, "adapter.text", z_query);
}

Tensor MultimodalEncoder::adapt_image(Tape* tp, const Tensor& z_query) {
    return nn::linear(tp, ps_, "adapter.image", z_query);
}

} // namespace unifusion::enc
