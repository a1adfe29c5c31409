#include "unifusion/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace unifusion::ret {

const GalleryItem& Gallery::by_id(int id) const {
    for (const auto& it : items)
        if (it.id == id) return it;
    throw std::out_of_range("gallery has no item " + std::to_string(id));
}

double pair_similarity(const Tensor& z_query, const Tensor& e) {
    const int n_q = z_query.rows(), d = z_query.cols();
    if (e.numel() != d) throw std::invalid_argument("pair_similarity: dimension mismatch");
    double best = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < n_q; ++k) {
        double dot = 0.0;
        for (int j = 0; j < d; ++j) dot += z_query.at(k, j) * e.at(j);
        best = std::max(best, dot);
    }
    return best;
}

double pair_pair_similarity(const Tensor& a_rows, const Tensor& b_rows) {
    double best = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < b_rows.rows(); ++i) {
        Tensor row = slice_rows(nullptr, b_rows, i, 1);
        best = std::max(best, pair_similarity(a_rows, row));
    }
    return best;
}

std::vector<EvalInstance> random_n_protocol(const Gallery& g, const std::vector<int>& positive_ids,
                                            int n, int category, std::uint64_t seed) {
    std::vector<int> pool;
    for (const auto& it : g.items)
        if (it.category == category) pool.push_back(it.id);
    if (static_cast<int>(pool.size()) < n)
        throw std::invalid_argument("random_n_protocol: category " + std::to_string(category) + " has " +
                                    std::to_string(pool.size()) + " candidates, need " + std::to_string(n));
    RngStream rng = RngStream::keyed(seed, "random_n_protocol");
    std::vector<EvalInstance> out;
    for (int pos : positive_ids) {
        if (g.by_id(pos).category != category)
            throw std::invalid_argument("random_n_protocol: positive " + std::to_string(pos) +
                                        " is not in category " + std::to_string(category));
        std::vector<int> negs;
        negs.reserve(pool.size() - 1);
        for (int id : pool)
            if (id != pos) negs.push_back(id);
        // partial Fisher-Yates for n-1 draws without replacement
        EvalInstance inst;
        inst.positive_id = pos;
        inst.candidate_ids.push_back(pos);
        for (int k = 0; k < n - 1; ++k) {
            const int j = k + rng.uniform_int(static_cast<int>(negs.size()) - k);
            std::swap(negs[k], negs[j]);
            inst.candidate_ids.push_back(negs[k]);
        }
        out.push_back(std::move(inst));
    }
    return out;
}

Ranking rank_candidates(std::vector<std::pair<int, double>> scored, int positive_id) {
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    Ranking r;
    r.ordered = std::move(scored);
    for (std::size_t i = 0; i < r.ordered.size(); ++i)
        if (r.ordered[i].first == positive_id) {
            r.positive_rank = static_cast<int>(i) + 1;
            return r;
        }
    throw std::invalid_argument("rank_candidates: positive not among candidates");
}

double recall_at_k(const std::vector<Ranking>& rankings, int k) {
    if (k < 1) throw std::invalid_argument("recall_at_k: k must be at least 1");
    if (rankings.empty()) return 0.0;
    int hit = 0;
    for (const auto& r : rankings)
        if (r.positive_rank <= k) ++hit;
    return static_cast<double>(hit) / rankings.size();
}

CirVariant parse_variant(const std::string& s) {
    if (s == "img") return CirVariant::img_only;
    if (s == "cap") return CirVariant::cap_only;
    if (s == "fused") return CirVariant::fused;
    throw std::invalid_argument("unknown variant: " + s + " (expected img|cap|fused)");
}

double cir_score(const Tensor& query_e, const GalleryItem& item, CirVariant variant) {
    const double img = variant == CirVariant::cap_only ? 0.0 : pair_similarity(item.img_queries, query_e);
    if (variant == CirVariant::img_only) return img;
    if (!item.has_caption)
        throw std::invalid_argument("cir_score: candidate " + std::to_string(item.id) +
                                    " has no caption embedding");
    if (item.caption_flagged) return -2.0; // excluded: below any cosine
    double cap = 0.0;
    for (int j = 0; j < query_e.numel(); ++j) cap += query_e.at(j) * item.cap_embedding.at(j);
    if (variant == CirVariant::cap_only) return cap;
    return 0.5 * (img + cap);
}

// --- model-backed construction ---------------------------------------------

Tensor encode_image_queries(Model& m, const synth::ImageF& img, enc::Bank bank) {
    Tensor patches = m.encoder.patch_encode(img);
    auto out = m.encoder.forward(nullptr, &patches, nullptr, bank, enc::MaskMode::Unimodal);
    return m.encoder.embed_project(nullptr, out.z_query, /*text_side=*/false);
}

Tensor encode_caption_embedding(Model& m, const std::string& text) {
    const std::vector<int> tokens = m.captioner.vocab().tokenize(text);
    auto out = m.encoder.forward(nullptr, nullptr, &tokens, std::nullopt, enc::MaskMode::TextOnly);
    return m.encoder.embed_project(nullptr, out.e_cls, /*text_side=*/true);
}

Tensor compose_query_embedding(Model& m, const synth::ImageF& ref, const std::string& mod_text) {
    const std::vector<int> tokens = m.captioner.vocab().tokenize(mod_text);
    Tensor patches = m.encoder.patch_encode(ref);
    auto out = m.encoder.forward(nullptr, &patches, &tokens, enc::Bank::q_r, enc::MaskMode::Bidirectional);
    return m.encoder.embed_project(nullptr, out.e_cls, /*text_side=*/true);
}

Tensor compose_query_rows(Model& m, const synth::ImageF& ref, const std::string& mod_text) {
    const std::vector<int> tokens = m.captioner.vocab().tokenize(mod_text);
    Tensor patches = m.encoder.patch_encode(ref);
    auto out = m.encoder.forward(nullptr, &patches, &tokens, enc::Bank::q_r, enc::MaskMode::Bidirectional);
    return out.z_query;
}

Tensor image_only_query_rows(Model& m, const synth::ImageF& ref) {
    Tensor patches = m.encoder.patch_encode(ref);
    auto out = m.encoder.forward(nullptr, &patches, nullptr, enc::Bank::q_r, enc::MaskMode::Unimodal);
    return m.encoder.embed_project(nullptr, out.z_query, /*text_side=*/false);
}

Gallery build_image_gallery(Model& m, const std::vector<int>& spec_ids, enc::Bank bank) {
    Gallery g;
    g.items.reserve(spec_ids.size());
    for (int id : spec_ids) {
        const auto spec = synth::GarmentSpec::from_id(id);
        GalleryItem item;
        item.id = id;
        item.spec_id = id;
        item.category = static_cast<int>(spec.category);
        item.img_queries = encode_image_queries(m, synth::to_float(synth::render(spec, 0)), bank);
        g.items.push_back(std::move(item));
    }
    return g;
}

void attach_reference_captions(Model& m, Gallery& g) {
    for (auto& item : g.items) {
        const auto spec = synth::GarmentSpec::from_id(item.spec_id);
        item.cap_embedding =
            encode_caption_embedding(m, synth::describe(spec, synth::CaptionStyle::professional));
        item.has_caption = true;
        item.caption_flagged = false;
    }
}

std::map<int, std::string> pregenerate_captions(Model& m, Gallery& g) {
    std::map<int, std::string> texts;
    for (auto& item : g.items) {
        const auto spec = synth::GarmentSpec::from_id(item.spec_id);
        const synth::ImageF img = synth::to_float(synth::render(spec, 0));
        Tensor patches = m.encoder.patch_encode(img);
        auto out = m.encoder.forward(nullptr, &patches, nullptr, enc::Bank::q, enc::MaskMode::Unimodal);
        Tensor soft = m.encoder.adapt_text(nullptr, out.z_query);
        auto gen = m.captioner.generate(soft, synth::CaptionStyle::professional, 16);
        texts[item.id] = gen.text;
        if (gen.text.empty()) {
            item.has_caption = true;
            item.caption_flagged = true;
            item.cap_embedding = Tensor::zeros({1, m.cfg.d_e});
        } else {
            item.cap_embedding = encode_caption_embedding(m, gen.text);
            item.has_caption = true;
            item.caption_flagged = false;
        }
    }
    return texts;
}

// --- end-to-end evaluation ---------------------------------------------------

namespace {

const std::vector<int> kRecallKs = {1, 5, 10, 50};

void fill_mean(RecallTable& t) {
    for (int k : kRecallKs) {
        double acc = 0.0;
        int cnt = 0;
        for (const auto& [cat, row] : t.per_category) {
            acc += row.at("R@" + std::to_string(k));
            ++cnt;
        }
        t.mean["R@" + std::to_string(k)] = cnt ? acc / cnt : 0.0;
    }
}

void fill_category(RecallTable& t, const std::string& cat, const std::vector<Ranking>& rankings) {
    for (int k : kRecallKs)
        t.per_category[cat]["R@" + std::to_string(k)] = recall_at_k(rankings, k);
}

} // namespace

CmrReport eval_cmr(Model& m, const synth::DatasetManifest& data, int n, std::uint64_t seed) {
    CmrReport rep;
    rep.n = n;
    rep.seed = seed;

    std::vector<int> all_ids(synth::kNumSpecs);
    for (int i = 0; i < synth::kNumSpecs; ++i) all_ids[i] = i;
    Gallery g = build_image_gallery(m, all_ids, enc::Bank::q);
    attach_reference_captions(m, g);

    for (int cat = 0; cat < synth::kNumCategories; ++cat) {
        std::vector<int> positives;
        for (int id : data.val_ids)
            if (static_cast<int>(synth::GarmentSpec::from_id(id).category) == cat) positives.push_back(id);
        if (positives.empty()) continue;
        const auto instances = random_n_protocol(g, positives, n, cat, seed + cat);

        std::vector<Ranking> t2i, i2t;
        for (const auto& inst : instances) {
            const auto spec = synth::GarmentSpec::from_id(inst.positive_id);
            Tensor cap_q = encode_caption_embedding(
                m, synth::describe(spec, synth::CaptionStyle::professional));
            const Tensor& img_q = g.by_id(inst.positive_id).img_queries;

            std::vector<std::pair<int, double>> st2i, si2t;
            for (int cid : inst.candidate_ids) {
                const auto& item = g.by_id(cid);
                st2i.emplace_back(cid, pair_similarity(item.img_queries, cap_q));
                si2t.emplace_back(cid, pair_similarity(img_q, item.cap_embedding));
            }
            t2i.push_back(rank_candidates(std::move(st2i), inst.positive_id));
            i2t.push_back(rank_candidates(std::move(si2t), inst.positive_id));
        }
        const std::string cat_name = synth::name(static_cast<synth::Category>(cat));
        fill_category(rep.text_to_image, cat_name, t2i);
        fill_category(rep.image_to_text, cat_name, i2t);
    }
    fill_mean(rep.text_to_image);
    fill_mean(rep.image_to_text);
    return rep;
}

CirReport eval_cir(Model& m, const std::vector<synth::CIRTriplet>& triplets, CirVariant variant,
                   int n, std::uint64_t seed) {
    CirReport rep;
    rep.n = n;
    rep.seed = seed;
    rep.variant = variant == CirVariant::img_only ? "img" : variant == CirVariant::cap_only ? "cap" : "fused";

    std::vector<int> all_ids(synth::kNumSpecs);
    for (int i = 0; i < synth::kNumSpecs; ++i) all_ids[i] = i;
    Gallery g = build_image_gallery(m, all_ids, enc::Bank::q_t);
    if (variant != CirVariant::img_only) pregenerate_captions(m, g);

    std::map<int, std::vector<Ranking>> composed_by_cat, baseline_by_cat;
    for (std::size_t i = 0; i < triplets.size(); ++i) {
        const auto& t = triplets[i];
        const auto ref = synth::GarmentSpec::from_id(t.ref_id);
        const int cat = static_cast<int>(ref.category);
        const auto instances = random_n_protocol(g, {t.target_id}, n, cat,
                                                 seed + 7919 * static_cast<std::uint64_t>(i));
        const auto& inst = instances[0];

        Tensor composed = compose_query_embedding(m, synth::to_float(synth::render(ref, 0)), t.text);
        Tensor baseline_rows = image_only_query_rows(m, synth::to_float(synth::render(ref, 0)));

        std::vector<std::pair<int, double>> sc, sb;
        for (int cid : inst.candidate_ids) {
            const auto& item = g.by_id(cid);
            sc.emplace_back(cid, cir_score(composed, item, variant));
            sb.emplace_back(cid, pair_pair_similarity(baseline_rows, item.img_queries));
        }
        composed_by_cat[cat].push_back(rank_candidates(std::move(sc), t.target_id));
        baseline_by_cat[cat].push_back(rank_candidates(std::move(sb), t.target_id));
    }
    for (const auto& [cat, rankings] : composed_by_cat) {
        const std::string cat_name = synth::name(static_cast<synth::Category>(cat));
        fill_category(rep.composed, cat_name, rankings);
        fill_category(rep.image_only_baseline, cat_name, baseline_by_cat.at(cat));
    }
    fill_mean(rep.composed);
    fill_mean(rep.image_only_baseline);
    return rep;
}

} // namespace unifusion::ret
