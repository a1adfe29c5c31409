#include "doctest.h"
#include "gradcheck.hpp"

#include "unifusion/trainkit.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace unifusion;
using namespace unifusion::train;

namespace fs = std::filesystem;

namespace {

ModelConfig mini_config() {
    ModelConfig c;
    c.n_q = 2;
    c.d_model = 8;
    c.n_blocks = 1;
    c.n_heads = 2;
    c.d_img = 8;
    c.d_e = 4;
    c.d_itm = 4;
    c.patch = 8;
    c.d_lm = 8;
    c.lm_blocks = 1;
    c.lm_heads = 2;
    c.lora_rank = 2;
    c.lora_alpha = 4.0;
    c.d_cond = 4;
    c.eps_ch = 4;
    c.T = 4;
    return c;
}

struct DataRig {
    fs::path dir;
    synth::DatasetManifest manifest;
    std::vector<synth::CIRTriplet> triplets;
    DataRig() {
        dir = fs::temp_directory_path() / "unifusion_trainkit_data";
        if (!fs::exists(dir / "manifest.json")) {
            synth::DatasetConfig dc;
            dc.cir_train = 200;
            dc.cir_val = 40;
            synth::gen_dataset(dir.string(), dc, 99);
        }
        manifest = synth::load_manifest(dir.string());
        triplets = synth::load_triplets((dir / "cir_train.jsonl").string());
    }
};

PhaseConfig quick(int steps, std::uint64_t seed = 5, int batch = 4) {
    PhaseConfig c;
    c.steps = steps;
    c.batch = batch;
    c.base_lr = 1e-3;
    c.warmup_frac = 0.1;
    c.seed = seed;
    c.eval_cadence = 5;
    return c;
}

std::map<std::string, std::vector<double>> param_copy(const Model& m) {
    std::map<std::string, std::vector<double>> out;
    for (const auto& [name, t] : m.store.all()) out[name] = *t.data;
    return out;
}

} // namespace

TEST_CASE("freeze policy prefixes") {
    auto p1a = trainable_prefixes(Phase::p1a);
    CHECK(std::count(p1a.begin(), p1a.end(), "qformer") == 1);
    CHECK(std::count(p1a.begin(), p1a.end(), "queries.q") == 1);
    CHECK(std::count(p1a.begin(), p1a.end(), "adapter") == 0);

    ParamStore ps;
    ps.set_trainable_prefixes(p1a);
    CHECK(ps.trainable("queries.q"));
    CHECK(!ps.trainable("queries.q_r"));
    CHECK(!ps.trainable("queries.q_t"));
    CHECK(!ps.trainable("imgenc.w"));
    CHECK(!ps.trainable("lm.head.w"));
    CHECK(!ps.trainable("lora.lm.head.a"));

    ps.set_trainable_prefixes(trainable_prefixes(Phase::p1b));
    CHECK(ps.trainable("adapter.text.w"));
    CHECK(ps.trainable("lora.lm.head.a"));
    CHECK(ps.trainable("epsnet.in.w"));
    CHECK(!ps.trainable("qformer.cls"));
    CHECK(!ps.trainable("lm.head.w"));

    ps.set_trainable_prefixes(trainable_prefixes(Phase::p2));
    CHECK(ps.trainable("qformer.cls"));
    CHECK(ps.trainable("queries.q_r"));
    CHECK(ps.trainable("queries.q_t"));
    CHECK(!ps.trainable("queries.q"));
    CHECK(!ps.trainable("lm.head.w"));
    CHECK(!ps.trainable("lora.lm.head.a"));
}

TEST_CASE("zero steps leaves the checkpoint at initialization") {
    DataRig data;
    Model m(mini_config(), 7);
    const auto before = param_copy(m);
    RunCursor cur;
    run_phase(m, Phase::p1a, quick(10), data.manifest, nullptr, cur, 0, nullptr);
    CHECK(param_copy(m) == before);
    CHECK(cur.step == 0);
}

TEST_CASE("frozen parameters hold bit-exact through training") {
    DataRig data;
    Model m(mini_config(), 8);
    const auto before = param_copy(m);

    RunCursor cur;
    run_phase(m, Phase::p1a, quick(8), data.manifest, nullptr, cur, 8, nullptr);
    // generation stack untouched in 1a
    for (const auto& [name, v] : param_copy(m)) {
        if (name.rfind("lm.", 0) == 0 || name.rfind("lora.", 0) == 0 ||
            name.rfind("adapter.", 0) == 0 || name.rfind("epsnet.", 0) == 0 ||
            name.rfind("imgenc.", 0) == 0 || name == "queries.q_r" || name == "queries.q_t") {
            CHECK(v == before.at(name));
        }
    }
    // and the trained stack moved
    CHECK(param_copy(m).at("queries.q") != before.at("queries.q"));

    const auto after_1a = param_copy(m);
    RunCursor cur_b;
    cur_b.phase = static_cast<int>(Phase::p1b);
    run_phase(m, Phase::p1b, quick(6), data.manifest, nullptr, cur_b, 6, nullptr);
    for (const auto& [name, v] : param_copy(m)) {
        if (name.rfind("qformer.", 0) == 0 || name.rfind("queries.", 0) == 0 ||
            name.rfind("lm.", 0) == 0 || name.rfind("proj.", 0) == 0) {
            CHECK(v == after_1a.at(name));
        }
    }
    CHECK(param_copy(m).at("adapter.text.w") != after_1a.at("adapter.text.w"));

    // phase 2: base LM bytes bit-identical before and after
    const auto after_1b = param_copy(m);
    RunCursor cur2;
    cur2.phase = static_cast<int>(Phase::p2);
    run_phase(m, Phase::p2, quick(6), data.manifest, &data.triplets, cur2, 6, nullptr);
    for (const auto& [name, v] : param_copy(m))
        if (name.rfind("lm.", 0) == 0 || name.rfind("lora.", 0) == 0)
            CHECK(v == after_1b.at(name));
    CHECK(param_copy(m).at("qformer.cls") != after_1b.at("qformer.cls"));
}

TEST_CASE("resume from checkpoint matches the uninterrupted run bit-exactly") {
    DataRig data;
    const fs::path dir = fs::temp_directory_path() / "unifusion_resume";
    fs::create_directories(dir);

    // uninterrupted: 14 steps of phase 1a
    Model m1(mini_config(), 9);
    RunCursor c1;
    run_phase(m1, Phase::p1a, quick(14), data.manifest, nullptr, c1, 14, nullptr);

    // split: 7 steps, checkpoint, reload into a fresh model, 7 more
    Model m2(mini_config(), 9);
    RunCursor c2;
    run_phase(m2, Phase::p1a, quick(14), data.manifest, nullptr, c2, 7, nullptr);
    const std::string ckpt = (dir / "mid.ckpt").string();
    save_checkpoint(m2, c2, ckpt);

    Model m3(mini_config(), 1234); // different init seed; checkpoint overwrites everything
    RunCursor c3 = load_checkpoint(m3, ckpt);
    CHECK(c3.step == 7);
    run_phase(m3, Phase::p1a, quick(14), data.manifest, nullptr, c3, 14, nullptr);

    CHECK(param_copy(m3) == param_copy(m1));
    CHECK(c3.opt.m == c1.opt.m);
    CHECK(c3.opt.v == c1.opt.v);
    CHECK(c3.batch_counter == c1.batch_counter);
    CHECK(c3.draw_counter == c1.draw_counter);

    // save -> load -> save is byte-identical
    const std::string ckpt2 = (dir / "mid2.ckpt").string();
    save_checkpoint(m3, c3, (dir / "a.ckpt").string());
    Model m4(mini_config(), 0);
    RunCursor c4 = load_checkpoint(m4, (dir / "a.ckpt").string());
    save_checkpoint(m4, c4, ckpt2);
    std::ifstream f1(dir / "a.ckpt", std::ios::binary), f2(ckpt2, std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), {});
    std::string s2((std::istreambuf_iterator<char>(f2)), {});
    CHECK(s1 == s2);
    fs::remove_all(dir);
}

TEST_CASE("identical seeds give bit-identical runs") {
    DataRig data;
    auto run = [&] {
        Model m(mini_config(), 11);
        RunCursor c;
        run_phase(m, Phase::p1a, quick(10), data.manifest, nullptr, c, 10, nullptr);
        return param_copy(m);
    };
    CHECK(run() == run());
}

TEST_CASE("numerical breakdown aborts with a loadable last-good checkpoint") {
    DataRig data;
    const fs::path dir = fs::temp_directory_path() / "unifusion_abort";
    fs::create_directories(dir);
    Model m(mini_config(), 12);
    RunCursor cur;
    PhaseConfig cfg = quick(20);
    cfg.eval_cadence = 1; // snapshot every step
    run_phase(m, Phase::p1a, cfg, data.manifest, nullptr, cur, 3, nullptr);

    // a divergent learning rate blows the parameters up mid-run
    PhaseConfig wild = cfg;
    wild.base_lr = 1e200; // squares overflow, poisoning the next forward
    const std::string abort_path = (dir / "abort.ckpt").string();
    CHECK_THROWS_AS(
        run_phase(m, Phase::p1a, wild, data.manifest, nullptr, cur, 9, nullptr, abort_path),
        std::runtime_error);
    // rolled back to the last snapshot: every parameter is finite again
    for (const auto& [name, v] : param_copy(m))
        for (double x : v) REQUIRE(std::isfinite(x));
    CHECK(fs::exists(abort_path));
    Model fresh(mini_config(), 99);
    RunCursor restored = load_checkpoint(fresh, abort_path);
    CHECK(restored.step >= 3);
    fs::remove_all(dir);
}

TEST_CASE("windowed loss means do not increase over a short run") {
    DataRig data;
    Model m(mini_config(), 13);
    RunCursor cur;
    PhaseConfig cfg = quick(260, 21, 6);
    auto logs = run_phase(m, Phase::p1a, cfg, data.manifest, nullptr, cur, 260, nullptr);
    REQUIRE(logs.size() == 260);
    auto window_mean = [&](int from) {
        double acc = 0.0;
        for (int i = from; i < from + 100; ++i) acc += logs[i].report.total;
        return acc / 100.0;
    };
    CHECK(window_mean(160) <= window_mean(0));
}

TEST_CASE("train_phase1 then train_phase2 wiring") {
    DataRig data;
    const fs::path dir = fs::temp_directory_path() / "unifusion_two_phase";
    fs::remove_all(dir);
    Model m(mini_config(), 14);

    std::ofstream log(dir / "train.jsonl");
    fs::create_directories(dir);
    log.open(dir / "train.jsonl");
    const std::string p1 = train_phase1(m, quick(6), quick(6), data.manifest, dir.string(), &log);
    CHECK(fs::exists(p1));

    // q_t starts from q at the top of phase 2
    Model m2(mini_config(), 15);
    const std::string p2 =
        train_phase2(m2, quick(6), data.manifest, data.triplets, p1, dir.string(), &log);
    CHECK(fs::exists(p2));

    // training log carries one JSON report per step
    log.close();
    std::ifstream in(dir / "train.jsonl");
    int lines = 0;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) ++lines;
    CHECK(lines == 18);
    fs::remove_all(dir);
}
