#pragma once

#include "unifusion/diffuser.hpp"
#include "unifusion/model.hpp"

#include <functional>
#include <map>
#include <string>
#include <vector>

namespace unifusion::loss {

struct LossReport {
    double total = 0.0;
    std::map<std::string, double> components; // weighted contributions
};

struct Weights {
    double itc = 1.0, itm = 1.0, itg = 1.0, q2i = 1.0;
    double cir_itc_img = 1.0, cir_itc_cap = 1.0, cir_itm = 1.0;
};

// Candidate side of a contrastive term: B groups of `group` unit rows each.
// Pair similarity is the max over the group (max-over-queries).
struct CandidateSide {
    Tensor rows; // [B*group x d_e]
    int group = 1;
};

// lambda-scaled pairwise similarity logits S[i][j] = lambda * s(X_i, Y_j)
Tensor itc_similarity_logits(Tape* tp, const Tensor& anchors, const CandidateSide& cands,
                             const Tensor& lambda);

// -(1/B) sum_i log softmax_j(lambda * s(X_i, Y_j))|_{j=i}
Tensor itc_loss(Tape* tp, const Tensor& anchors, const CandidateSide& cands, const Tensor& lambda);

// scores[i][j] = max_k < W_m stack_i[k], W_m' vec_j >
Tensor itm_score_matrix(Tape* tp, enc::MultimodalEncoder& e, const std::vector<Tensor>& stacks,
                        const Tensor& vectors);

// Eq-4 style listwise matching loss. anchors_are_vectors selects which side
// of the score matrix is normalized over.
Tensor itm_loss(Tape* tp, enc::MultimodalEncoder& e, const std::vector<Tensor>& stacks,
                const Tensor& vectors, bool anchors_are_stacks);

// noise-prediction objective; the predictor is injectable so tests can run
// the exact-noise oracle against the same composition path
using EpsFn = std::function<diff::Latent(Tape*, const diff::Latent& x_t, int t, const diff::Condition&)>;
Tensor q2i_loss(Tape* tp, const diff::NoiseSchedule& s, const EpsFn& eps_net, const diff::Latent& x0,
                const diff::Condition& cond, int t, const diff::Latent& eps);

// One phase-1 sample: an image-caption pair plus this step's diffusion draws.
struct PairSample {
    synth::ImageF image;
    std::vector<int> caption_tokens;
    synth::CaptionStyle style = synth::CaptionStyle::professional;
    int t = 1;
    diff::Latent eps;
    bool drop_cond = false;
};

// One phase-2 sample: a composed triplet plus this step's diffusion draws.
struct TripletSample {
    synth::ImageF ref_image;
    std::vector<int> mod_tokens;
    synth::ImageF target_image;
    std::vector<int> target_caption_tokens;
    synth::CaptionStyle style = synth::CaptionStyle::professional;
    int t = 1;
    diff::Latent eps;
    bool drop_cond = false;
};

struct LossResult {
    Tensor total;      // scalar on the tape
    LossReport report;
};

// L_cross = ITC(e_cls, Z_I) + ITM(Z_C, Z_I)
LossResult cross_modal_loss(Tape* tp, Model& m, const std::vector<PairSample>& batch,
                            const Weights& w = {});

// L_cir = ITC(e_cls, Z_T) + ITC(e_cls, Z_C) + ITM(t, Z_T)
struct CirEncodings {
    std::vector<enc::EncoderOutput> z_r, z_t, z_c;
};
LossResult cir_loss(Tape* tp, Model& m, const CirEncodings& e, const Weights& w = {});

// generation losses shared by both phases
Tensor itg_loss(Tape* tp, Model& m, const Tensor& soft_prompt, synth::CaptionStyle style,
                const std::vector<int>& caption_tokens);

// full per-phase objectives
LossResult phase1_loss(Tape* tp, Model& m, const std::vector<PairSample>& batch,
                       const Weights& w = {});
LossResult phase2_loss(Tape* tp, Model& m, const std::vector<TripletSample>& batch,
                       const Weights& w = {});

// sub-phase objectives used by the trainer's schedule
LossResult phase1a_loss(Tape* tp, Model& m, const std::vector<PairSample>& batch, const Weights& w = {});
LossResult phase1b_loss(Tape* tp, Model& m, const std::vector<PairSample>& batch, const Weights& w = {});

} // namespace unifusion::loss
