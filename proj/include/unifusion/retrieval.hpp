#pragma once

#include "unifusion/model.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace unifusion::ret {

struct GalleryItem {
    int id = 0;            // unique candidate id
    int spec_id = 0;       // ground-truth spec
    int category = 0;
    Tensor img_queries;    // [n_q x d_e] unit rows
    Tensor cap_embedding;  // [1 x d_e] unit row, when captions are attached
    bool has_caption = false;
    bool caption_flagged = false; // empty generated caption; excluded from cap scoring
};

struct Gallery {
    std::vector<GalleryItem> items;
    const GalleryItem& by_id(int id) const;
};

// max over query rows of <row, e>
double pair_similarity(const Tensor& z_query, const Tensor& e);
// max over all row pairs; the image-only composed baseline
double pair_pair_similarity(const Tensor& a_rows, const Tensor& b_rows);

struct EvalInstance {
    int positive_id = 0;
    std::vector<int> candidate_ids; // n distinct ids, positive included
};

// For each positive: n-1 negatives sampled without replacement from the
// same category, deterministically from the seed.
std::vector<EvalInstance> random_n_protocol(const Gallery& g, const std::vector<int>& positive_ids,
                                            int n, int category, std::uint64_t seed);

struct Ranking {
    std::vector<std::pair<int, double>> ordered; // (id, score), score desc, ties by id asc
    int positive_rank = 0;                       // 1-based
};

Ranking rank_candidates(std::vector<std::pair<int, double>> scored, int positive_id);
double recall_at_k(const std::vector<Ranking>& rankings, int k);

enum class CirVariant { img_only, cap_only, fused };
CirVariant parse_variant(const std::string& s);

double cir_score(const Tensor& query_e, const GalleryItem& item, CirVariant variant);

// --- model-backed gallery and query construction --------------------------

// Encodes one item per spec id (canonical render) with the given bank.
Gallery build_image_gallery(Model& m, const std::vector<int>& spec_ids, enc::Bank bank);

// Attaches ground-truth professional caption embeddings (for CMR).
void attach_reference_captions(Model& m, Gallery& g);

// Attaches captioner-generated caption embeddings (for CIR fusion).
// Deterministic given the checkpoints; returns the generated texts by id.
std::map<int, std::string> pregenerate_captions(Model& m, Gallery& g);

Tensor encode_caption_embedding(Model& m, const std::string& text);       // TextOnly e_cls, projected
Tensor encode_image_queries(Model& m, const synth::ImageF& img, enc::Bank bank);
Tensor compose_query_embedding(Model& m, const synth::ImageF& ref, const std::string& mod_text);
Tensor compose_query_rows(Model& m, const synth::ImageF& ref, const std::string& mod_text); // query rows
Tensor image_only_query_rows(Model& m, const synth::ImageF& ref); // q_r bank, no text

// --- end-to-end evaluation -------------------------------------------------

struct RecallTable {
    std::map<std::string, std::map<std::string, double>> per_category; // cat -> R@k -> value
    std::map<std::string, double> mean;                                // R@k -> value
};

struct CmrReport {
    int n = 0;
    std::uint64_t seed = 0;
    RecallTable text_to_image;
    RecallTable image_to_text;
};

CmrReport eval_cmr(Model& m, const synth::DatasetManifest& data, int n, std::uint64_t seed);

struct CirReport {
    int n = 0;
    std::uint64_t seed = 0;
    std::string variant;
    RecallTable composed;
    RecallTable image_only_baseline;
};

CirReport eval_cir(Model& m, const std::vector<synth::CIRTriplet>& triplets, CirVariant variant,
                   int n, std::uint64_t seed);

} // namespace unifusion::ret
