#include "doctest.h"
#include "gradcheck.hpp"

#include "unifusion/checkpoint.hpp"
#include "unifusion/optim.hpp"
#include "unifusion/param_store.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

using namespace unifusion;

TEST_CASE("adamw semantics") {
    ParamStore store;
    store.create_full("w", {1}, 1.0);
    store.create_full("frozen.w", {1}, 4.0);
    store.set_trainable_prefixes({"w"});
    AdamWState state;

    SUBCASE("zero gradient, weight_decay 0 is the identity") {
        Tape tape;
        store.begin_tape(&tape);
        Tensor w = store.use(&tape, "w");
        Tensor loss = mul(&tape, w, Tensor::zeros({1}));
        Tensor s = sum_all(&tape, loss);
        backward(tape, s, store);
        adamw_step(store, state, 0.1);
        CHECK(store.param("w").at(0) == 1.0);
    }

    SUBCASE("single hand-evaluated step") {
        store.zero_grads();
        Tape tape;
        store.begin_tape(&tape);
        Tensor w = store.use(&tape, "w");
        backward(tape, sum_all(&tape, w), store); // grad = 1
        adamw_step(store, state, 0.1);
        // m-hat = 1, v-hat = 1 after bias correction
        CHECK(store.param("w").at(0) == doctest::Approx(0.9).epsilon(1e-7));
        CHECK(store.param("frozen.w").at(0) == 4.0);
    }

    SUBCASE("missing gradient on trainable parameter is an error") {
        store.zero_grads();
        CHECK_THROWS_AS(adamw_step(store, state, 0.1), std::logic_error);
    }
}

TEST_CASE("adamw determinism over 100 steps") {
    auto run = [] {
        ParamStore store;
        RngStream rng(9);
        store.create_normal("a.w", {4, 4}, 0.3, rng);
        store.set_trainable_prefixes({"a"});
        AdamWState st;
        for (int i = 0; i < 100; ++i) {
            store.zero_grads();
            Tape tape;
            store.begin_tape(&tape);
            Tensor w = store.use(&tape, "a.w");
            Tensor loss = mse(&tape, w, Tensor::full({4, 4}, 0.5));
            backward(tape, loss, store);
            adamw_step(store, st, 1e-2);
        }
        return *store.param("a.w").data;
    };
    CHECK(run() == run()); // bit-identical
}

TEST_CASE("prefix matching stops at segment boundaries") {
    CHECK(ParamStore::prefix_matches("queries.q", "queries.q"));
    CHECK(ParamStore::prefix_matches("queries.q", "queries.q.rows"));
    CHECK(!ParamStore::prefix_matches("queries.q", "queries.q_r"));
    CHECK(!ParamStore::prefix_matches("qformer", "qformer2.w"));
}

TEST_CASE("cosine warmup schedule endpoints") {
    const int total = 1000;
    CHECK(cosine_warmup_lr(0, total, 3e-4, 0.03) == 0.0);
    const int warmup = static_cast<int>(std::ceil(0.03 * total));
    CHECK(cosine_warmup_lr(warmup, total, 3e-4, 0.03) == doctest::Approx(3e-4).epsilon(1e-12));
    CHECK(cosine_warmup_lr(total, total, 3e-4, 0.03) == doctest::Approx(0.0).epsilon(1e-12));
    // monotone ramp then decay
    CHECK(cosine_warmup_lr(warmup / 2, total, 3e-4, 0.03) < 3e-4);
    CHECK(cosine_warmup_lr((total + warmup) / 2, total, 3e-4, 0.03) < 3e-4);
}

TEST_CASE("clip_grad_norm caps the global norm") {
    ParamStore store;
    store.create_full("w", {4}, 0.0);
    store.set_trainable_prefixes({"w"});
    store.zero_grads();
    Tape tape;
    store.begin_tape(&tape);
    Tensor w = store.use(&tape, "w");
    Tensor big = scale(&tape, w, 100.0);
    backward(tape, sum_all(&tape, big), store); // grad = 100 each
    const double before = clip_grad_norm(store, 1.0);
    CHECK(before == doctest::Approx(200.0));
    double sq = 0.0;
    for (double g : store.grad("w")) sq += g * g;
    CHECK(std::sqrt(sq) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("tensor file round trip") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "unifusion_ckpt_test";
    fs::create_directories(dir);
    const std::string p1 = (dir / "a.ckpt").string();
    const std::string p2 = (dir / "b.ckpt").string();

    RngStream rng(4);
    std::map<std::string, Tensor> entries;
    entries["b.w"] = gradcheck::random_tensor({3, 2}, rng);
    entries["a.v"] = gradcheck::random_tensor({5}, rng);
    save_tensor_file(p1, entries);
    auto loaded = load_tensor_file(p1);
    REQUIRE(loaded.size() == 2);
    CHECK(*loaded["b.w"].data == *entries["b.w"].data);
    CHECK(loaded["a.v"].shape == std::vector<int>{5});
    save_tensor_file(p2, loaded);

    // save -> load -> save is byte-identical
    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), {});
    std::string s2((std::istreambuf_iterator<char>(f2)), {});
    CHECK(s1 == s2);

    // file size equals header + newline + 8 * total elements
    const std::size_t expect_blob = 8 * (6 + 5);
    CHECK(s1.size() == s1.find('\n') + 1 + expect_blob);

    // truncation names the missing parameter
    std::ofstream trunc((dir / "t.ckpt").string(), std::ios::binary);
    trunc.write(s1.data(), static_cast<std::streamsize>(s1.size() - 12));
    trunc.close();
    try {
        load_tensor_file((dir / "t.ckpt").string());
        FAIL("expected truncation error");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("b.w") != std::string::npos);
    }
    fs::remove_all(dir);
}
