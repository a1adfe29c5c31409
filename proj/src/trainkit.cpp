#include "unifusion/trainkit.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "unifusion/checkpoint.hpp"

namespace unifusion::train {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

const char* phase_name(Phase p) {
    switch (p) {
    case Phase::p1a: return "1a";
    case Phase::p1b: return "1b";
    case Phase::p2: return "2";
    }
    return "?";
}

std::vector<std::string> trainable_prefixes(Phase p) {
    switch (p) {
    case Phase::p1a:
        // representation learning: encoder, projection + scorer heads,
        // temperature and the phase-1 query bank
        return {"qformer", "proj", "itm", "temp", "queries.q"};
    case Phase::p1b:
        // generation heads only, encoder frozen
        return {"adapter", "lora", "epsnet"};
    case Phase::p2:
        // encoder, both phase-2 banks, adapters and the diffusion net;
        // base LM (and its LoRA) stay frozen
        return {"qformer", "queries.q_r", "queries.q_t", "adapter", "epsnet"};
    }
    return {};
}

std::uint64_t frozen_hash(const ParamStore& ps, const std::vector<std::string>& trainable) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto eat = [&h](const void* p, std::size_t n) {
        const unsigned char* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& [name, t] : ps.all()) {
        bool is_trainable = false;
        for (const auto& pre : trainable)
            if (ParamStore::prefix_matches(pre, name)) is_trainable = true;
        if (is_trainable) continue;
        eat(name.data(), name.size());
        eat(t.data->data(), t.data->size() * sizeof(double));
    }
    return h;
}

void save_checkpoint(const Model& m, const RunCursor& c, const std::string& path) {
    std::map<std::string, Tensor> entries;
    for (const auto& [name, t] : m.store.all()) entries[name] = t;
    for (const auto& [name, v] : c.opt.m) entries["opt.m." + name] = Tensor::from({static_cast<int>(v.size())}, v);
    for (const auto& [name, v] : c.opt.v) entries["opt.v." + name] = Tensor::from({static_cast<int>(v.size())}, v);
    entries["meta.phase"] = Tensor::scalar(c.phase);
    entries["meta.step"] = Tensor::scalar(c.step);
    entries["meta.opt.step"] = Tensor::scalar(static_cast<double>(c.opt.step));
    entries["meta.opt.beta0"] = Tensor::scalar(c.opt.beta0);
    entries["meta.opt.beta1"] = Tensor::scalar(c.opt.beta1);
    entries["meta.opt.eps"] = Tensor::scalar(c.opt.eps);
    entries["meta.opt.weight_decay"] = Tensor::scalar(c.opt.weight_decay);
    entries["meta.rng.batch_counter"] = Tensor::scalar(static_cast<double>(c.batch_counter));
    entries["meta.rng.draw_counter"] = Tensor::scalar(static_cast<double>(c.draw_counter));
    save_tensor_file(path, entries);
}

RunCursor load_checkpoint(Model& m, const std::string& path) {
    auto entries = load_tensor_file(path);
    RunCursor c;
    auto take_scalar = [&](const std::string& name) {
        auto it = entries.find(name);
        if (it == entries.end()) throw std::runtime_error("checkpoint missing " + name + " in " + path);
        return it->second.value();
    };
    c.phase = static_cast<int>(take_scalar("meta.phase"));
    c.step = static_cast<int>(take_scalar("meta.step"));
    c.opt.step = static_cast<std::int64_t>(take_scalar("meta.opt.step"));
    c.opt.beta0 = take_scalar("meta.opt.beta0");
    c.opt.beta1 = take_scalar("meta.opt.beta1");
    c.opt.eps = take_scalar("meta.opt.eps");
    c.opt.weight_decay = take_scalar("meta.opt.weight_decay");
    c.batch_counter = static_cast<std::uint64_t>(take_scalar("meta.rng.batch_counter"));
    c.draw_counter = static_cast<std::uint64_t>(take_scalar("meta.rng.draw_counter"));

    for (auto& [name, t] : entries) {
        if (name.rfind("meta.", 0) == 0) continue;
        if (name.rfind("opt.m.", 0) == 0) {
            c.opt.m[name.substr(6)] = *t.data;
        } else if (name.rfind("opt.v.", 0) == 0) {
            c.opt.v[name.substr(6)] = *t.data;
        } else {
            if (!m.store.has(name))
                throw std::runtime_error("checkpoint parameter unknown to this model: " + name);
            Tensor& dst = m.store.param(name);
            if (dst.shape != t.shape)
                throw std::runtime_error("checkpoint shape mismatch for " + name);
            *dst.data = *t.data;
        }
    }
    return c;
}

namespace {

struct Snapshot {
    std::map<std::string, std::vector<double>> values;
    RunCursor cursor;
};

Snapshot take_snapshot(const Model& m, const RunCursor& c) {
    Snapshot s;
    s.cursor = c;
    for (const auto& [name, t] : m.store.all()) s.values[name] = *t.data;
    return s;
}

void restore_snapshot(Model& m, RunCursor& c, const Snapshot& s) {
    for (const auto& [name, v] : s.values) *m.store.param(name).data = v;
    c = s.cursor;
}

std::vector<int> sample_distinct(std::vector<int> pool, int count, RngStream& rng) {
    for (int k = 0; k < count; ++k) {
        const int j = k + rng.uniform_int(static_cast<int>(pool.size()) - k);
        std::swap(pool[k], pool[j]);
    }
    pool.resize(count);
    return pool;
}

bool draw_drop_flag(double p_uncond, RngStream& rng) {
    static const Tensor placeholder = Tensor::scalar(1.0);
    return !diff::drop_condition(diff::Condition(placeholder), p_uncond, rng).has_value();
}

loss::PairSample make_pair_sample(Model& m, int spec_id, Phase phase, RngStream& draw) {
    loss::PairSample s;
    const auto spec = synth::GarmentSpec::from_id(spec_id);
    const std::uint64_t texture = 1 + draw.next_u64() % 1000000;
    s.image = synth::to_float(synth::render(spec, texture));
    if (phase == Phase::p1a) {
        // contrastive pairs use the two styles that pin down every attribute;
        // the brief style would alias same-color same-category specs
        s.style = draw.uniform_int(2) == 0 ? synth::CaptionStyle::professional
                                           : synth::CaptionStyle::detailed;
    } else {
        s.style = static_cast<synth::CaptionStyle>(draw.uniform_int(3));
    }
    s.caption_tokens = m.captioner.vocab().tokenize(synth::describe(spec, s.style));
    if (phase == Phase::p1b) {
        s.t = 1 + draw.uniform_int(m.cfg.T);
        s.eps = Tensor::zeros({m.cfg.lat_ch, m.cfg.lat_tokens()});
        for (int i = 0; i < s.eps.numel(); ++i) s.eps.at(i) = draw.normal();
        s.drop_cond = draw_drop_flag(m.cfg.p_uncond, draw);
    }
    return s;
}

// Contrastive batches draw within one category and in one-attribute twin
// pairs, matching the structure of the evaluation galleries where the
// hardest negatives (hem/sleeve twins) are always present.
std::vector<int> sample_contrastive_batch(const std::vector<int>& train_ids, int count,
                                          RngStream& rng) {
    std::vector<std::vector<int>> by_cat(synth::kNumCategories);
    for (int id : train_ids) by_cat[id / (synth::kNumSpecs / synth::kNumCategories)].push_back(id);
    const auto& pool = by_cat[rng.uniform_int(synth::kNumCategories)];
    std::vector<bool> in_train(synth::kNumSpecs, false);
    for (int id : train_ids) in_train[id] = true;

    std::vector<int> ids;
    std::vector<bool> used(synth::kNumSpecs, false);
    int guard = 0;
    while (static_cast<int>(ids.size()) + 1 < count && ++guard < 4000) {
        const int base = pool[rng.uniform_int(static_cast<int>(pool.size()))];
        if (used[base]) continue;
        auto spec = synth::GarmentSpec::from_id(base);
        int twin = -1;
        for (int tries = 0; tries < 8 && twin < 0; ++tries) {
            auto t = spec;
            switch (rng.uniform_int(4)) {
            case 0: {
                int nv = rng.uniform_int(synth::kNumColors - 1);
                if (nv >= static_cast<int>(t.color)) ++nv;
                t.color = static_cast<synth::Color>(nv);
                break;
            }
            case 1: {
                int nv = rng.uniform_int(synth::kNumSleeves - 1);
                if (nv >= static_cast<int>(t.sleeve)) ++nv;
                t.sleeve = static_cast<synth::Sleeve>(nv);
                break;
            }
            case 2: {
                int nv = rng.uniform_int(synth::kNumPatterns - 1);
                if (nv >= static_cast<int>(t.pattern)) ++nv;
                t.pattern = static_cast<synth::Pattern>(nv);
                break;
            }
            default:
                t.length = t.length == synth::Length::short_cut ? synth::Length::long_cut
                                                                : synth::Length::short_cut;
                break;
            }
            if (in_train[t.id()] && !used[t.id()]) twin = t.id();
        }
        if (twin < 0) continue;
        ids.push_back(base);
        used[base] = true;
        ids.push_back(twin);
        used[twin] = true;
    }
    while (static_cast<int>(ids.size()) < count) {
        const int id = pool[rng.uniform_int(static_cast<int>(pool.size()))];
        if (!used[id]) {
            ids.push_back(id);
            used[id] = true;
        }
    }
    return ids;
}

loss::TripletSample make_triplet_sample(Model& m, const synth::CIRTriplet& t, RngStream& draw) {
    loss::TripletSample s;
    const auto ref = synth::GarmentSpec::from_id(t.ref_id);
    const auto target = synth::GarmentSpec::from_id(t.target_id);
    s.ref_image = synth::to_float(synth::render(ref, 1 + draw.next_u64() % 1000000));
    s.mod_tokens = m.captioner.vocab().tokenize(t.text);
    s.target_image = synth::to_float(synth::render(target, 1 + draw.next_u64() % 1000000));
    s.style = static_cast<synth::CaptionStyle>(draw.uniform_int(3));
    s.target_caption_tokens = m.captioner.vocab().tokenize(synth::describe(target, s.style));
    s.t = 1 + draw.uniform_int(m.cfg.T);
    s.eps = Tensor::zeros({m.cfg.lat_ch, m.cfg.lat_tokens()});
    for (int i = 0; i < s.eps.numel(); ++i) s.eps.at(i) = draw.normal();
    s.drop_cond = draw_drop_flag(m.cfg.p_uncond, draw);
    return s;
}

// distinct target specs within the batch keep the in-batch negatives clean
std::vector<int> sample_triplet_batch(const std::vector<synth::CIRTriplet>& triplets, int count,
                                      RngStream& rng) {
    std::vector<int> order(triplets.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    for (std::size_t k = 0; k + 1 < order.size(); ++k) {
        const int j = static_cast<int>(k) + rng.uniform_int(static_cast<int>(order.size() - k));
        std::swap(order[k], order[j]);
    }
    std::vector<int> chosen;
    std::vector<int> seen_targets;
    for (int idx : order) {
        const int tgt = triplets[idx].target_id;
        bool dup = false;
        for (int t : seen_targets) dup = dup || t == tgt;
        if (dup) continue;
        chosen.push_back(idx);
        seen_targets.push_back(tgt);
        if (static_cast<int>(chosen.size()) == count) break;
    }
    if (static_cast<int>(chosen.size()) < count)
        throw std::runtime_error("not enough distinct-target triplets for one batch");
    return chosen;
}

} // namespace

std::vector<StepLog> run_phase(Model& m, Phase phase, const PhaseConfig& cfg,
                               const synth::DatasetManifest& data,
                               const std::vector<synth::CIRTriplet>* triplets, RunCursor& cursor,
                               int to_step, std::ostream* log, const std::string& abort_path) {
    if (cursor.phase != static_cast<int>(phase))
        throw std::invalid_argument("run_phase: cursor belongs to another phase");
    if (phase == Phase::p2 && (!triplets || triplets->empty()))
        throw std::invalid_argument("run_phase: phase 2 needs triplets");

    m.store.set_trainable_prefixes(trainable_prefixes(phase));
    const auto prefixes = trainable_prefixes(phase);
    const std::uint64_t frozen0 = frozen_hash(m.store, prefixes);

    RngStream batch_rng = RngStream::keyed(cfg.seed, std::string("batch.") + phase_name(phase));
    RngStream draw_rng = RngStream::keyed(cfg.seed, std::string("draw.") + phase_name(phase));
    batch_rng.set_counter(cursor.batch_counter);
    draw_rng.set_counter(cursor.draw_counter);

    Snapshot last_good = take_snapshot(m, cursor);
    std::vector<StepLog> logs;

    for (int step = cursor.step; step < to_step; ++step) {
        const double lr = cosine_warmup_lr(step, cfg.steps, cfg.base_lr, cfg.warmup_frac);

        m.store.zero_grads();
        Tape tape;
        m.store.begin_tape(&tape);
        loss::LossResult res;
        try {
        if (phase == Phase::p2) {
            const auto idx = sample_triplet_batch(*triplets, cfg.batch, batch_rng);
            std::vector<loss::TripletSample> batch;
            batch.reserve(idx.size());
            for (int i : idx) batch.push_back(make_triplet_sample(m, (*triplets)[i], draw_rng));
            res = loss::phase2_loss(&tape, m, batch, cfg.weights);
        } else {
            const auto ids = phase == Phase::p1a
                                 ? sample_contrastive_batch(data.train_ids, cfg.batch, batch_rng)
                                 : sample_distinct(data.train_ids, cfg.batch, batch_rng);
            std::vector<loss::PairSample> batch;
            batch.reserve(ids.size());
            for (int id : ids) batch.push_back(make_pair_sample(m, id, phase, draw_rng));
            res = phase == Phase::p1a ? loss::phase1a_loss(&tape, m, batch, cfg.weights)
                                      : loss::phase1b_loss(&tape, m, batch, cfg.weights);
        }
        } catch (const std::domain_error& e) {
            // degenerate numerics inside the forward pass (NaN-poisoned
            // activations) are treated exactly like a non-finite loss
            restore_snapshot(m, cursor, last_good);
            if (!abort_path.empty()) save_checkpoint(m, cursor, abort_path);
            throw std::runtime_error("numerical breakdown at phase " +
                                     std::string(phase_name(phase)) + " step " +
                                     std::to_string(step) + ": " + e.what());
        }

        if (!std::isfinite(res.report.total)) {
            restore_snapshot(m, cursor, last_good);
            if (!abort_path.empty()) save_checkpoint(m, cursor, abort_path);
            throw std::runtime_error("non-finite loss at phase " + std::string(phase_name(phase)) +
                                     " step " + std::to_string(step) + "; last good state restored");
        }

        backward(tape, res.total, m.store);
        zero_fill_missing_grads(m.store);
        clip_grad_norm(m.store, 1.0);
        adamw_step(m.store, cursor.opt, lr);

        cursor.step = step + 1;
        cursor.batch_counter = batch_rng.counter();
        cursor.draw_counter = draw_rng.counter();

        StepLog sl{step, lr, res.report};
        if (log) {
            ordered_json j = {{"phase", phase_name(phase)}, {"step", step}, {"lr", lr},
                              {"components", res.report.components}, {"total", res.report.total}};
            (*log) << j.dump() << "\n";
        }
        logs.push_back(std::move(sl));

        if ((step + 1) % cfg.eval_cadence == 0 || step + 1 == to_step) {
            if (frozen_hash(m.store, prefixes) != frozen0)
                throw std::logic_error("freeze audit failed at phase " +
                                       std::string(phase_name(phase)) + " step " + std::to_string(step));
            last_good = take_snapshot(m, cursor);
        }
    }
    return logs;
}

std::string train_phase1(Model& m, const PhaseConfig& cfg1a, const PhaseConfig& cfg1b,
                         const synth::DatasetManifest& data, const std::string& run_dir,
                         std::ostream* log) {
    fs::create_directories(run_dir);
    const std::string abort_path = (fs::path(run_dir) / "phase1.abort.ckpt").string();

    RunCursor cur;
    cur.phase = static_cast<int>(Phase::p1a);
    run_phase(m, Phase::p1a, cfg1a, data, nullptr, cur, cfg1a.steps, log, abort_path);

    RunCursor cur_b;
    cur_b.phase = static_cast<int>(Phase::p1b);
    run_phase(m, Phase::p1b, cfg1b, data, nullptr, cur_b, cfg1b.steps, log, abort_path);

    const std::string path = (fs::path(run_dir) / "phase1.ckpt").string();
    save_checkpoint(m, cur_b, path);
    return path;
}

std::string train_phase2(Model& m, const PhaseConfig& cfg, const synth::DatasetManifest& data,
                         const std::vector<synth::CIRTriplet>& triplets,
                         const std::string& phase1_ckpt, const std::string& run_dir,
                         std::ostream* log) {
    fs::create_directories(run_dir);
    load_checkpoint(m, phase1_ckpt);
    m.init_bank_q_t_from_q();

    RunCursor cur;
    cur.phase = static_cast<int>(Phase::p2);
    const std::string abort_path = (fs::path(run_dir) / "phase2.abort.ckpt").string();
    run_phase(m, Phase::p2, cfg, data, &triplets, cur, cfg.steps, log, abort_path);

    const std::string path = (fs::path(run_dir) / "phase2.ckpt").string();
    save_checkpoint(m, cur, path);
    return path;
}

} // namespace unifusion::train
