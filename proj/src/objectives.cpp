#include "unifusion/objectives.hpp"

#include <stdexcept>

namespace unifusion::loss {

namespace {

std::vector<int> iota_targets(int n) {
    std::vector<int> t(n);
    for (int i = 0; i < n; ++i) t[i] = i;
    return t;
}

Tensor stack_rows(Tape* tp, const std::vector<Tensor>& rows) {
    return rows.size() == 1 ? rows[0] : concat_rows(tp, rows);
}

// mean of per-sample scalar terms
Tensor batch_mean(Tape* tp, const std::vector<Tensor>& terms) {
    Tensor s = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) s = add(tp, s, terms[i]);
    return scale(tp, s, 1.0 / static_cast<double>(terms.size()));
}

struct Accum {
    Tape* tp;
    Tensor total;
    LossReport report;
    void add_component(const std::string& name, const Tensor& value, double weight) {
        Tensor scaled = weight == 1.0 ? value : scale(tp, value, weight);
        report.components[name] = scaled.value();
        total = total.numel() == 0 ? scaled : add(tp, total, scaled);
    }
    LossResult finish() {
        report.total = total.value();
        return LossResult{total, report};
    }
};

} // namespace

Tensor itc_similarity_logits(Tape* tp, const Tensor& anchors, const CandidateSide& cands,
                             const Tensor& lambda) {
    const int b = anchors.rows();
    if (b < 1) throw std::invalid_argument("itc_loss: empty batch");
    const int g = cands.group;
    if (cands.rows.rows() != b * g)
        throw std::invalid_argument("itc_loss: candidate side holds " + std::to_string(cands.rows.rows()) +
                                    " rows, expected " + std::to_string(b * g));
    Tensor m = matmul(tp, anchors, transpose(tp, cands.rows)); // [B x B*g]
    Tensor s;
    if (g == 1) {
        s = m;
    } else {
        std::vector<Tensor> cols;
        cols.reserve(b);
        for (int j = 0; j < b; ++j) {
            Tensor block = slice_cols(tp, m, j * g, g);
            cols.push_back(reshape(tp, row_max(tp, block), {b, 1}));
        }
        s = concat_cols(tp, cols);
    }
    return mul_scalar(tp, s, lambda);
}

Tensor itc_loss(Tape* tp, const Tensor& anchors, const CandidateSide& cands, const Tensor& lambda) {
    Tensor logits = itc_similarity_logits(tp, anchors, cands, lambda);
    return cross_entropy_logits(tp, logits, iota_targets(anchors.rows()));
}

Tensor itm_score_matrix(Tape* tp, enc::MultimodalEncoder& e, const std::vector<Tensor>& stacks,
                        const Tensor& vectors) {
    if (stacks.empty()) throw std::invalid_argument("itm_score_matrix: empty batch");
    const int n_q = stacks[0].rows();
    Tensor px = e.itm_project_candidates(tp, stack_rows(tp, stacks)); // [B_s*n_q x d_itm]
    Tensor pa = e.itm_project_anchor(tp, vectors);                    // [B_v x d_itm]
    Tensor m0 = matmul(tp, px, transpose(tp, pa));                    // [B_s*n_q x B_v]
    const int bs = static_cast<int>(stacks.size());
    const int bv = vectors.rows();
    std::vector<Tensor> rows;
    rows.reserve(bs);
    for (int i = 0; i < bs; ++i) {
        Tensor block = transpose(tp, slice_rows(tp, m0, i * n_q, n_q)); // [B_v x n_q]
        rows.push_back(reshape(tp, row_max(tp, block), {1, bv}));
    }
    return stack_rows(tp, rows); // [B_s x B_v]
}

Tensor itm_loss(Tape* tp, enc::MultimodalEncoder& e, const std::vector<Tensor>& stacks,
                const Tensor& vectors, bool anchors_are_stacks) {
    const int bs = static_cast<int>(stacks.size());
    const int bv = vectors.rows();
    if (bs != bv) throw std::invalid_argument("itm_loss: candidate/anchor batch mismatch");
    Tensor m = itm_score_matrix(tp, e, stacks, vectors);
    if (!anchors_are_stacks) m = transpose(tp, m); // normalize over the stack side
    return cross_entropy_logits(tp, m, iota_targets(bs));
}

Tensor q2i_loss(Tape* tp, const diff::NoiseSchedule& s, const EpsFn& eps_net, const diff::Latent& x0,
                const diff::Condition& cond, int t, const diff::Latent& eps) {
    const diff::Latent x_t = diff::forward_noise(s, x0, t, eps);
    Tensor pred = eps_net(tp, x_t, t, cond);
    return mse(tp, pred, eps);
}

Tensor itg_loss(Tape* tp, Model& m, const Tensor& soft_prompt, synth::CaptionStyle style,
                const std::vector<int>& caption_tokens) {
    return m.captioner.score_caption(tp, soft_prompt, style, caption_tokens);
}

namespace {

struct PairEncodings {
    std::vector<enc::EncoderOutput> z_i, z_c;
};

PairEncodings encode_pairs(Tape* tp, Model& m, const std::vector<PairSample>& batch, bool with_text) {
    PairEncodings out;
    for (const PairSample& s : batch) {
        Tensor patches = m.encoder.patch_encode(s.image);
        out.z_i.push_back(m.encoder.forward(tp, &patches, nullptr, enc::Bank::q, enc::MaskMode::Unimodal));
        if (with_text)
            out.z_c.push_back(m.encoder.forward(tp, nullptr, &s.caption_tokens, std::nullopt,
                                                enc::MaskMode::TextOnly));
    }
    return out;
}

void add_cross_components(Tape* tp, Model& m, const PairEncodings& e, const Weights& w, Accum& acc) {
    std::vector<Tensor> cls_rows, zq_stacks;
    for (const auto& zc : e.z_c) cls_rows.push_back(zc.e_cls);
    for (const auto& zi : e.z_i) zq_stacks.push_back(zi.z_query);
    Tensor cls = stack_rows(tp, cls_rows);
    Tensor anchors = m.encoder.embed_project(tp, cls, /*text_side=*/true);
    Tensor cand_rows = m.encoder.embed_project(tp, stack_rows(tp, zq_stacks), /*text_side=*/false);
    Tensor lambda = m.encoder.temperature(tp);
    // the same max-over-queries similarity serves retrieval in both
    // directions, so the contrastive term normalizes over both sides of the
    // matrix (the symmetrical reading of the cross-modal loss)
    Tensor logits = itc_similarity_logits(tp, anchors, {cand_rows, m.cfg.n_q}, lambda);
    const auto targets = iota_targets(anchors.rows());
    Tensor itc_sym = scale(tp,
                           add(tp, cross_entropy_logits(tp, logits, targets),
                               cross_entropy_logits(tp, transpose(tp, logits), targets)),
                           0.5);
    acc.add_component("itc", itc_sym, w.itc);
    acc.add_component("itm", itm_loss(tp, m.encoder, zq_stacks, cls, /*anchors_are_stacks=*/true), w.itm);
}

void add_generation_components(Tape* tp, Model& m, const std::vector<PairSample>& batch,
                               const std::vector<enc::EncoderOutput>& z_i, const Weights& w,
                               Accum& acc) {
    std::vector<Tensor> itg_terms, q2i_terms;
    auto eps_net = [&m](Tape* t2, const diff::Latent& x_t, int t, const diff::Condition& c) {
        return m.epsnet.forward(t2, x_t, t, c, m.schedule);
    };
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const PairSample& s = batch[i];
        Tensor soft = m.encoder.adapt_text(tp, z_i[i].z_query);
        itg_terms.push_back(itg_loss(tp, m, soft, s.style, s.caption_tokens));
        diff::Condition cond = s.drop_cond
                                   ? diff::Condition(std::nullopt)
                                   : diff::Condition(m.encoder.adapt_image(tp, z_i[i].z_query));
        q2i_terms.push_back(q2i_loss(tp, m.schedule, eps_net, m.codec.encode(s.image), cond, s.t, s.eps));
    }
    acc.add_component("itg", batch_mean(tp, itg_terms), w.itg);
    acc.add_component("q2i", batch_mean(tp, q2i_terms), w.q2i);
}

} // namespace

LossResult cross_modal_loss(Tape* tp, Model& m, const std::vector<PairSample>& batch, const Weights& w) {
    if (batch.size() < 2)
        throw std::invalid_argument("cross_modal_loss: contrastive terms need a batch of at least 2");
    PairEncodings e = encode_pairs(tp, m, batch, /*with_text=*/true);
    Accum acc{tp, {}, {}};
    add_cross_components(tp, m, e, w, acc);
    return acc.finish();
}

LossResult cir_loss(Tape* tp, Model& m, const CirEncodings& e, const Weights& w) {
    if (e.z_r.empty()) throw std::invalid_argument("cir_loss: empty batch");
    for (const auto& zr : e.z_r)
        if (!zr.has_text) throw std::invalid_argument("cir_loss: composed encoding lacks e_cls");
    std::vector<Tensor> cls_rows, zt_stacks, zc_rows;
    for (const auto& zr : e.z_r) cls_rows.push_back(zr.e_cls);
    for (const auto& zt : e.z_t) zt_stacks.push_back(zt.z_query);
    for (const auto& zc : e.z_c) zc_rows.push_back(zc.e_cls);

    Tensor cls = stack_rows(tp, cls_rows);
    Tensor anchors = m.encoder.embed_project(tp, cls, /*text_side=*/true);
    Tensor img_cands = m.encoder.embed_project(tp, stack_rows(tp, zt_stacks), /*text_side=*/false);
    Tensor cap_cands = m.encoder.embed_project(tp, stack_rows(tp, zc_rows), /*text_side=*/true);
    Tensor lambda = m.encoder.temperature(tp);

    Accum acc{tp, {}, {}};
    acc.add_component("cir_itc_img", itc_loss(tp, anchors, {img_cands, m.cfg.n_q}, lambda), w.cir_itc_img);
    acc.add_component("cir_itc_cap", itc_loss(tp, anchors, {cap_cands, 1}, lambda), w.cir_itc_cap);
    acc.add_component("cir_itm", itm_loss(tp, m.encoder, zt_stacks, cls, /*anchors_are_stacks=*/false),
                      w.cir_itm);
    return acc.finish();
}

LossResult phase1a_loss(Tape* tp, Model& m, const std::vector<PairSample>& batch, const Weights& w) {
    return cross_modal_loss(tp, m, batch, w);
}

LossResult phase1b_loss(Tape* tp, Model& m, const std::vector<PairSample>& batch, const Weights& w) {
    if (batch.empty()) throw std::invalid_argument("phase1b_loss: empty batch");
    PairEncodings e = encode_pairs(tp, m, batch, /*with_text=*/false);
    Accum acc{tp, {}, {}};
    add_generation_components(tp, m, batch, e.z_i, w, acc);
    return acc.finish();
}

LossResult phase1_loss(Tape* tp, Model& m, const std::vector<PairSample>& batch, const Weights& w) {
    if (batch.size() < 2)
        throw std::invalid_argument("phase1_loss: contrastive terms need a batch of at least 2");
    PairEncodings e = encode_pairs(tp, m, batch, /*with_text=*/true);
    Accum acc{tp, {}, {}};
    add_cross_components(tp, m, e, w, acc);
    add_generation_components(tp, m, batch, e.z_i, w, acc);
    return acc.finish();
}

LossResult phase2_loss(Tape* tp, Model& m, const std::vector<TripletSample>& batch, const Weights& w) {
    if (batch.empty()) throw std::invalid_argument("phase2_loss: empty batch");
    CirEncodings e;
    for (const TripletSample& s : batch) {
        Tensor ref_patches = m.encoder.patch_encode(s.ref_image);
        Tensor tgt_patches = m.encoder.patch_encode(s.target_image);
        e.z_r.push_back(m.encoder.forward(tp, &ref_patches, &s.mod_tokens, enc::Bank::q_r,
                                          enc::MaskMode::Bidirectional));
        e.z_t.push_back(m.encoder.forward(tp, &tgt_patches, nullptr, enc::Bank::q_t,
                                          enc::MaskMode::Unimodal));
        e.z_c.push_back(m.encoder.forward(tp, nullptr, &s.target_caption_tokens, std::nullopt,
                                          enc::MaskMode::TextOnly));
    }
    LossResult cir = cir_loss(tp, m, e, w);
    Accum acc{tp, cir.total, cir.report};

    std::vector<Tensor> itg_terms, q2i_terms;
    auto eps_net = [&m](Tape* t2, const diff::Latent& x_t, int t, const diff::Condition& c) {
        return m.epsnet.forward(t2, x_t, t, c, m.schedule);
    };
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const TripletSample& s = batch[i];
        Tensor soft = m.encoder.adapt_text(tp, e.z_r[i].z_query);
        itg_terms.push_back(itg_loss(tp, m, soft, s.style, s.target_caption_tokens));
        diff::Condition cond = s.drop_cond
                                   ? diff::Condition(std::nullopt)
                                   : diff::Condition(m.encoder.adapt_image(tp, e.z_r[i].z_query));
        q2i_terms.push_back(
            q2i_loss(tp, m.schedule, eps_net, m.codec.encode(s.target_image), cond, s.t, s.eps));
    }
    acc.add_component("itg", batch_mean(tp, itg_terms), w.itg);
    acc.add_component("q2i", batch_mean(tp, q2i_terms), w.q2i);
    return acc.finish();
}

} // namespace unifusion::loss
