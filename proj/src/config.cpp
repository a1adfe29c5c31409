#include "unifusion/config.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>

namespace unifusion::cli {

using nlohmann::ordered_json;

namespace {

void require_keys(const ordered_json& j, const std::set<std::string>& known, const std::string& where) {
    for (const auto& [k, v] : j.items())
        if (!known.count(k))
            throw std::invalid_argument("unknown config key: " + where + "." + k);
}

template <typename T>
void take(const ordered_json& j, const char* key, T& dst) {
    if (j.contains(key)) dst = j.at(key).get<T>();
}

void parse_phase(const ordered_json& j, const std::string& where, train::PhaseConfig& p) {
    require_keys(j, {"steps", "batch", "base_lr", "warmup_frac", "eval_cadence"}, where);
    take(j, "steps", p.steps);
    take(j, "batch", p.batch);
    take(j, "base_lr", p.base_lr);
    take(j, "warmup_frac", p.warmup_frac);
    take(j, "eval_cadence", p.eval_cadence);
}

ordered_json phase_json(const train::PhaseConfig& p) {
    return {{"steps", p.steps}, {"batch", p.batch}, {"base_lr", p.base_lr},
            {"warmup_frac", p.warmup_frac}, {"eval_cadence", p.eval_cadence}};
}

void check(bool ok, const std::string& constraint) {
    if (!ok) throw std::invalid_argument("config violates: " + constraint);
}

} // namespace

RunConfig default_config() {
    RunConfig c;
    c.phase1a.steps = 20000;
    c.phase1b.steps = 12000;
    c.phase2.steps = 3000;
    return c;
}

RunConfig parse_config(const ordered_json& j) {
    RunConfig c = default_config();
    require_keys(j, {"model", "schedule", "phase1a", "phase1b", "phase2", "loss_weights", "data",
                     "data_dir", "run_dir", "seed"},
                 "root");
    if (j.contains("model")) {
        const auto& m = j.at("model");
        require_keys(m,
                     {"n_q", "d_model", "n_blocks", "n_heads", "d_img", "d_e", "d_itm", "image_size",
                      "patch", "text_max_len", "d_lm", "lm_blocks", "lm_heads", "lm_max_len",
                      "lora_rank", "lora_alpha", "d_cond", "lat_ch", "lat_hw", "eps_ch", "eps_heads"},
                     "model");
        take(m, "n_q", c.model.n_q);
        take(m, "d_model", c.model.d_model);
        take(m, "n_blocks", c.model.n_blocks);
        take(m, "n_heads", c.model.n_heads);
        take(m, "d_img", c.model.d_img);
        take(m, "d_e", c.model.d_e);
        take(m, "d_itm", c.model.d_itm);
        take(m, "image_size", c.model.image_size);
        take(m, "patch", c.model.patch);
        take(m, "text_max_len", c.model.text_max_len);
        take(m, "d_lm", c.model.d_lm);
        take(m, "lm_blocks", c.model.lm_blocks);
        take(m, "lm_heads", c.model.lm_heads);
        take(m, "lm_max_len", c.model.lm_max_len);
        take(m, "lora_rank", c.model.lora_rank);
        take(m, "lora_alpha", c.model.lora_alpha);
        take(m, "d_cond", c.model.d_cond);
        take(m, "lat_ch", c.model.lat_ch);
        take(m, "lat_hw", c.model.lat_hw);
        take(m, "eps_ch", c.model.eps_ch);
        take(m, "eps_heads", c.model.eps_heads);
    }
    if (j.contains("schedule")) {
        const auto& s = j.at("schedule");
        require_keys(s, {"T", "beta_1", "beta_T", "p_uncond", "guidance"}, "schedule");
        take(s, "T", c.model.T);
        take(s, "beta_1", c.model.beta_1);
        take(s, "beta_T", c.model.beta_T);
        take(s, "p_uncond", c.model.p_uncond);
        take(s, "guidance", c.model.guidance);
    }
    if (j.contains("phase1a")) parse_phase(j.at("phase1a"), "phase1a", c.phase1a);
    if (j.contains("phase1b")) parse_phase(j.at("phase1b"), "phase1b", c.phase1b);
    if (j.contains("phase2")) parse_phase(j.at("phase2"), "phase2", c.phase2);
    if (j.contains("loss_weights")) {
        const auto& w = j.at("loss_weights");
        require_keys(w, {"itc", "itm", "itg", "q2i", "cir_itc_img", "cir_itc_cap", "cir_itm"},
                     "loss_weights");
        take(w, "itc", c.weights.itc);
        take(w, "itm", c.weights.itm);
        take(w, "itg", c.weights.itg);
        take(w, "q2i", c.weights.q2i);
        take(w, "cir_itc_img", c.weights.cir_itc_img);
        take(w, "cir_itc_cap", c.weights.cir_itc_cap);
        take(w, "cir_itm", c.weights.cir_itm);
    }
    if (j.contains("data")) {
        const auto& d = j.at("data");
        require_keys(d, {"train_specs", "val_specs", "captions_per_spec", "cir_train", "cir_val"},
                     "data");
        take(d, "train_specs", c.data.train_specs);
        take(d, "val_specs", c.data.val_specs);
        take(d, "captions_per_spec", c.data.captions_per_spec);
        take(d, "cir_train", c.data.cir_train);
        take(d, "cir_val", c.data.cir_val);
    }
    take(j, "data_dir", c.data_dir);
    take(j, "run_dir", c.run_dir);
    take(j, "seed", c.seed);

    c.phase1a.seed = c.seed;
    c.phase1b.seed = c.seed;
    c.phase2.seed = c.seed;
    c.phase1a.weights = c.weights;
    c.phase1b.weights = c.weights;
    c.phase2.weights = c.weights;
    validate(c);
    return c;
}

RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config: " + path);
    ordered_json j;
    try {
        j = ordered_json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument("config parse error in " + path + ": " + e.what());
    }
    return parse_config(j);
}

ordered_json to_json(const RunConfig& c) {
    return ordered_json{
        {"model",
         {{"n_q", c.model.n_q}, {"d_model", c.model.d_model}, {"n_blocks", c.model.n_blocks},
          {"n_heads", c.model.n_heads}, {"d_img", c.model.d_img}, {"d_e", c.model.d_e},
          {"d_itm", c.model.d_itm}, {"image_size", c.model.image_size}, {"patch", c.model.patch},
          {"text_max_len", c.model.text_max_len}, {"d_lm", c.model.d_lm},
          {"lm_blocks", c.model.lm_blocks}, {"lm_heads", c.model.lm_heads},
          {"lm_max_len", c.model.lm_max_len}, {"lora_rank", c.model.lora_rank},
          {"lora_alpha", c.model.lora_alpha}, {"d_cond", c.model.d_cond}, {"lat_ch", c.model.lat_ch},
          {"lat_hw", c.model.lat_hw}, {"eps_ch", c.model.eps_ch}, {"eps_heads", c.model.eps_heads}}},
        {"schedule",
         {{"T", c.model.T}, {"beta_1", c.model.beta_1}, {"beta_T", c.model.beta_T},
          {"p_uncond", c.model.p_uncond}, {"guidance", c.model.guidance}}},
        {"phase1a", phase_json(c.phase1a)},
        {"phase1b", phase_json(c.phase1b)},
        {"phase2", phase_json(c.phase2)},
        {"loss_weights",
         {{"itc", c.weights.itc}, {"itm", c.weights.itm}, {"itg", c.weights.itg},
          {"q2i", c.weights.q2i}, {"cir_itc_img", c.weights.cir_itc_img},
          {"cir_itc_cap", c.weights.cir_itc_cap}, {"cir_itm", c.weights.cir_itm}}},
        {"data",
         {{"train_specs", c.data.train_specs}, {"val_specs", c.data.val_specs},
          {"captions_per_spec", c.data.captions_per_spec}, {"cir_train", c.data.cir_train},
          {"cir_val", c.data.cir_val}}},
        {"data_dir", c.data_dir},
        {"run_dir", c.run_dir},
        {"seed", c.seed},
    };
}

std::string resolved_run_dir(const RunConfig& c) {
    namespace fs = std::filesystem;
    const char* root = std::getenv("UNIFUSION_RUN_DIR");
    fs::path p(c.run_dir);
    if (root && *root && p.is_relative()) return (fs::path(root) / p).string();
    return c.run_dir;
}

void validate(const RunConfig& c) {
    const auto& m = c.model;
    check(m.n_q >= 1, "n_q >= 1");
    check(m.d_model >= 2, "d_model >= 2");
    check(m.n_blocks >= 1, "n_blocks >= 1");
    check(m.n_heads >= 1 && m.d_model % m.n_heads == 0, "n_heads divides d_model");
    check(m.d_img >= 2 && m.d_e >= 1 && m.d_itm >= 1, "embedding dims positive");
    check(m.patch >= 1 && m.image_size % m.patch == 0, "patch divides image_size");
    check(m.image_size == 4 * m.lat_hw, "latent grid is image_size / 4");
    check(m.lat_ch >= 3, "lat_ch >= 3 for an orthonormal channel map");
    check(m.lat_hw >= 4 && m.lat_hw % 4 == 0, "lat_hw is a multiple of 4");
    check(m.d_lm >= 2 && m.lm_blocks >= 0, "captioner dims");
    check(m.lm_heads >= 1 && m.d_lm % m.lm_heads == 0, "lm_heads divides d_lm");
    check(m.lm_max_len >= 8, "lm_max_len >= 8");
    check(m.lora_rank >= 1, "lora_rank >= 1");
    check(m.lora_alpha > 0, "lora_alpha > 0");
    check(m.d_cond >= 1 && m.eps_ch >= 2, "diffusion dims");
    check(m.eps_heads >= 1 && (2 * m.eps_ch) % m.eps_heads == 0, "eps_heads divides bottleneck width");
    check(m.T >= 1, "T >= 1");
    check(m.beta_1 > 0 && m.beta_1 <= m.beta_T && m.beta_T < 1, "0 < beta_1 <= beta_T < 1");
    check(m.p_uncond >= 0 && m.p_uncond < 1, "p_uncond in [0, 1)");
    for (const auto* p : {&c.phase1a, &c.phase1b, &c.phase2}) {
        check(p->steps >= 0, "steps >= 0");
        check(p->batch >= 2, "batch >= 2");
        check(p->base_lr > 0, "base_lr > 0");
        check(p->warmup_frac > 0 && p->warmup_frac < 1, "warmup_frac in (0, 1)");
        check(p->eval_cadence >= 1, "eval_cadence >= 1");
    }
    check(c.data.train_specs + c.data.val_specs <= synth::kNumSpecs, "train+val fits the spec universe");
    check(c.data.train_specs > 0 && c.data.val_specs > 0, "both splits non-empty");
}

} // namespace unifusion::cli
