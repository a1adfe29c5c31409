#include "doctest.h"
#include "gradcheck.hpp"

#include "unifusion/retrieval.hpp"

#include <cmath>
#include <set>

using namespace unifusion;
using namespace unifusion::ret;

namespace {

Tensor unit_row(std::vector<double> v) {
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    for (double& x : v) x /= n;
    const int d = static_cast<int>(v.size());
    return Tensor::from({1, d}, std::move(v));
}

Gallery toy_gallery(int count, int d, RngStream& rng, int categories = 1) {
    Gallery g;
    for (int i = 0; i < count; ++i) {
        GalleryItem item;
        item.id = i;
        item.spec_id = i;
        item.category = i % categories;
        item.img_queries = l2_normalize_rows(nullptr, gradcheck::random_tensor({2, d}, rng));
        item.cap_embedding = l2_normalize_rows(nullptr, gradcheck::random_tensor({1, d}, rng));
        item.has_caption = true;
        g.items.push_back(std::move(item));
    }
    return g;
}

} // namespace

TEST_CASE("pair_similarity") {
    Tensor one = unit_row({0.6, 0.8});
    CHECK(pair_similarity(one, one) == doctest::Approx(1.0).epsilon(1e-12));

    Tensor rows = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor e = Tensor::from({1, 2}, {0, 1});
    CHECK(pair_similarity(rows, e) == doctest::Approx(1.0).epsilon(1e-12));

    // unit inputs keep the score in [-1, 1]
    RngStream rng(3);
    for (int i = 0; i < 50; ++i) {
        Tensor q = l2_normalize_rows(nullptr, gradcheck::random_tensor({4, 8}, rng));
        Tensor v = l2_normalize_rows(nullptr, gradcheck::random_tensor({1, 8}, rng));
        const double s = pair_similarity(q, v);
        CHECK(s <= 1.0 + 1e-12);
        CHECK(s >= -1.0 - 1e-12);
    }
}

TEST_CASE("random_n_protocol determinism and audit") {
    RngStream rng(4);
    Gallery g = toy_gallery(500, 8, rng);
    std::vector<int> positives = {3, 77, 400};

    auto a = random_n_protocol(g, positives, 100, 0, 9);
    auto b = random_n_protocol(g, positives, 100, 0, 9);
    REQUIRE(a.size() == 3);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].candidate_ids == b[i].candidate_ids);

    for (const auto& inst : a) {
        CHECK(inst.candidate_ids.size() == 100);
        std::set<int> distinct(inst.candidate_ids.begin(), inst.candidate_ids.end());
        CHECK(distinct.size() == 100);
        CHECK(distinct.count(inst.positive_id) == 1);
    }

    // n = 1 degenerate: positive only
    auto solo = random_n_protocol(g, {5}, 1, 0, 1);
    CHECK(solo[0].candidate_ids == std::vector<int>{5});

    // insufficient candidates
    Gallery small = toy_gallery(10, 8, rng);
    CHECK_THROWS_AS(random_n_protocol(small, {1}, 100, 0, 1), std::invalid_argument);
}

TEST_CASE("ranking and recall") {
    std::vector<std::pair<int, double>> scored = {{10, 0.5}, {11, 0.9}, {12, 0.5}, {13, 0.1}};
    Ranking r = rank_candidates(scored, 12);
    CHECK(r.ordered[0].first == 11);
    CHECK(r.ordered[1].first == 10); // tie with 12 broken by ascending id
    CHECK(r.ordered[2].first == 12);
    CHECK(r.positive_rank == 3);

    Ranking top = rank_candidates({{1, 0.9}, {2, 0.1}}, 1);
    Ranking third = rank_candidates({{1, 0.9}, {2, 0.8}, {3, 0.7}}, 3);
    std::vector<Ranking> rs = {top, third};
    CHECK(recall_at_k(rs, 1) == doctest::Approx(0.5));
    CHECK(recall_at_k(rs, 5) == doctest::Approx(1.0));
    // monotone in k
    for (int k = 1; k < 4; ++k) CHECK(recall_at_k(rs, k) <= recall_at_k(rs, k + 1));

    // insertion order never matters: permuting the scored list keeps ranks
    std::vector<std::pair<int, double>> shuffled = {{13, 0.1}, {12, 0.5}, {11, 0.9}, {10, 0.5}};
    Ranking r2 = rank_candidates(shuffled, 12);
    CHECK(r2.positive_rank == r.positive_rank);
    CHECK(r2.ordered == r.ordered);
}

TEST_CASE("chance-level recall on random embeddings") {
    RngStream rng(5);
    Gallery g = toy_gallery(500, 16, rng);
    std::vector<Ranking> rankings;
    for (int qi = 0; qi < 1000; ++qi) {
        const int pos = qi % 500;
        auto inst = random_n_protocol(g, {pos}, 100, 0, 1000 + qi)[0];
        Tensor q = l2_normalize_rows(nullptr, gradcheck::random_tensor({1, 16}, rng));
        std::vector<std::pair<int, double>> scored;
        for (int cid : inst.candidate_ids)
            scored.emplace_back(cid, pair_similarity(g.by_id(cid).img_queries, q));
        rankings.push_back(rank_candidates(std::move(scored), pos));
    }
    const double r1 = recall_at_k(rankings, 1);
    CHECK(r1 > 0.0);
    CHECK(r1 < 0.02); // 0.01 +- 0.01
}

TEST_CASE("cir_score variants") {
    RngStream rng(6);
    GalleryItem item;
    item.id = 0;
    item.img_queries = unit_row({1, 0});
    item.cap_embedding = unit_row({1, 0});
    item.has_caption = true;

    Tensor q = unit_row({1, 0});
    CHECK(cir_score(q, item, CirVariant::img_only) == doctest::Approx(1.0));
    CHECK(cir_score(q, item, CirVariant::cap_only) == doctest::Approx(1.0));
    // identical component scores: fused equals each
    CHECK(cir_score(q, item, CirVariant::fused) == doctest::Approx(1.0));

    // img 0.9, cap 0.5 -> fused 0.7
    GalleryItem mixed;
    mixed.id = 1;
    mixed.img_queries = Tensor::from({1, 2}, {0.9, std::sqrt(1 - 0.81)});
    mixed.cap_embedding = Tensor::from({1, 2}, {0.5, std::sqrt(1 - 0.25)});
    mixed.has_caption = true;
    Tensor qx = Tensor::from({1, 2}, {1.0, 0.0});
    CHECK(cir_score(qx, mixed, CirVariant::fused) == doctest::Approx(0.7).epsilon(1e-12));

    // missing caption embedding is a variant error; flagged is excluded
    GalleryItem bare;
    bare.id = 2;
    bare.img_queries = unit_row({0, 1});
    CHECK_THROWS_AS(cir_score(q, bare, CirVariant::cap_only), std::invalid_argument);
    bare.has_caption = true;
    bare.caption_flagged = true;
    CHECK(cir_score(q, bare, CirVariant::cap_only) == -2.0);
    CHECK(cir_score(q, bare, CirVariant::fused) == -2.0);

    CHECK_THROWS_AS(parse_variant("both"), std::invalid_argument);
    CHECK(parse_variant("img") == CirVariant::img_only);
}

TEST_CASE("scores invariant under a joint orthogonal transform") {
    RngStream rng(7);
    const int d = 8;
    // Gram-Schmidt an orthogonal map
    Tensor r = gradcheck::random_tensor({d, d}, rng);
    for (int c = 0; c < d; ++c) {
        for (int prev = 0; prev < c; ++prev) {
            double dot = 0.0;
            for (int k = 0; k < d; ++k) dot += r.at(k, c) * r.at(k, prev);
            for (int k = 0; k < d; ++k) r.at(k, c) -= dot * r.at(k, prev);
        }
        double n = 0.0;
        for (int k = 0; k < d; ++k) n += r.at(k, c) * r.at(k, c);
        n = std::sqrt(n);
        for (int k = 0; k < d; ++k) r.at(k, c) /= n;
    }
    for (int trial = 0; trial < 20; ++trial) {
        Tensor q = l2_normalize_rows(nullptr, gradcheck::random_tensor({4, d}, rng));
        Tensor e = l2_normalize_rows(nullptr, gradcheck::random_tensor({1, d}, rng));
        const double base = pair_similarity(q, e);
        const double rotated = pair_similarity(matmul(nullptr, q, r), matmul(nullptr, e, r));
        CHECK(std::fabs(base - rotated) < 1e-10);
    }
}
