#include "unifusion/cli.hpp"

#include "unifusion/config.hpp"
#include "unifusion/fdcheck.hpp"
#include "unifusion/model.hpp"
#include "unifusion/retrieval.hpp"
#include "unifusion/trainkit.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"

namespace unifusion::cli {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

struct Common {
    std::string config_path;
    std::uint64_t seed = 0;
    bool seed_set = false;
};

RunConfig resolve_config(const Common& c) {
    RunConfig cfg = c.config_path.empty() ? default_config() : load_config(c.config_path);
    if (c.seed_set) {
        cfg.seed = c.seed;
        cfg.phase1a.seed = c.seed;
        cfg.phase1b.seed = c.seed;
        cfg.phase2.seed = c.seed;
    }
    return cfg;
}

std::string data_dir_of(const RunConfig& cfg) {
    fs::path p(cfg.data_dir);
    if (p.is_relative()) return (fs::path(resolved_run_dir(cfg)) / p).string();
    return cfg.data_dir;
}

void echo_config(const RunConfig& cfg, const std::string& cmd) {
    const fs::path dir = resolved_run_dir(cfg);
    fs::create_directories(dir);
    std::ofstream out(dir / ("config." + cmd + ".json"));
    out << to_json(cfg).dump(2) << "\n";
}

synth::DatasetManifest need_dataset(const RunConfig& cfg) {
    const std::string dir = data_dir_of(cfg);
    if (!fs::exists(fs::path(dir) / "manifest.json"))
        throw std::runtime_error("no dataset under " + dir + "; run gen-data first");
    return synth::load_manifest(dir);
}

Model load_model(const RunConfig& cfg, const std::string& ckpt) {
    Model m(cfg.model, cfg.seed);
    if (!ckpt.empty()) train::load_checkpoint(m, ckpt);
    return m;
}

ordered_json recall_json(const ret::RecallTable& t) {
    ordered_json per = ordered_json::object();
    for (const auto& [cat, row] : t.per_category) {
        ordered_json r = ordered_json::object();
        for (const auto& [k, v] : row) r[k] = v;
        per[cat] = r;
    }
    ordered_json mean = ordered_json::object();
    for (const auto& [k, v] : t.mean) mean[k] = v;
    return {{"per_category", per}, {"mean", mean}};
}

synth::GarmentSpec parse_spec(const std::string& text) {
    std::vector<std::string> parts;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        std::size_t c = text.find(',', pos);
        if (c == std::string::npos) c = text.size();
        parts.push_back(text.substr(pos, c - pos));
        pos = c + 1;
    }
    if (parts.size() != 5)
        throw std::invalid_argument("--spec wants category,color,sleeve,pattern,length");
    synth::GarmentSpec s;
    auto find = [](const std::string& v, auto count, auto namer, const char* what) {
        for (int i = 0; i < count; ++i)
            if (v == namer(i)) return i;
        throw std::invalid_argument(std::string("unknown ") + what + ": " + v);
    };
    s.category = static_cast<synth::Category>(find(parts[0], synth::kNumCategories,
        [](int i) { return synth::name(static_cast<synth::Category>(i)); }, "category"));
    s.color = static_cast<synth::Color>(find(parts[1], synth::kNumColors,
        [](int i) { return synth::name(static_cast<synth::Color>(i)); }, "color"));
    s.sleeve = static_cast<synth::Sleeve>(find(parts[2], synth::kNumSleeves,
        [](int i) { return synth::name(static_cast<synth::Sleeve>(i)); }, "sleeve"));
    s.pattern = static_cast<synth::Pattern>(find(parts[3], synth::kNumPatterns,
        [](int i) { return synth::name(static_cast<synth::Pattern>(i)); }, "pattern"));
    s.length = parts[4] == "short" ? synth::Length::short_cut
               : parts[4] == "long" ? synth::Length::long_cut
                                    : throw std::invalid_argument("unknown length: " + parts[4]);
    return s;
}

synth::CaptionStyle parse_style(const std::string& s) {
    if (s == "brief") return synth::CaptionStyle::brief;
    if (s == "professional") return synth::CaptionStyle::professional;
    if (s == "detailed") return synth::CaptionStyle::detailed;
    throw std::invalid_argument("unknown style: " + s);
}

int cmd_gen_data(const Common& c) {
    RunConfig cfg = resolve_config(c);
    echo_config(cfg, "gen-data");
    const auto m = synth::gen_dataset(data_dir_of(cfg), cfg.data, cfg.seed);
    std::cout << "dataset written to " << m.dir << " (" << m.train_ids.size() << " train / "
              << m.val_ids.size() << " val specs, " << m.cir_train_count << " train triplets)\n";
    return 0;
}

int cmd_train_phase1(const Common& c) {
    RunConfig cfg = resolve_config(c);
    echo_config(cfg, "train-phase1");
    const auto data = need_dataset(cfg);
    Model m(cfg.model, cfg.seed);
    const fs::path dir = resolved_run_dir(cfg);
    std::ofstream log(dir / "phase1.log.jsonl");
    const std::string ckpt = train::train_phase1(m, cfg.phase1a, cfg.phase1b, data, dir.string(), &log);
    std::cout << "phase-1 checkpoint: " << ckpt << "\n";
    return 0;
}

int cmd_train_phase2(const Common& c, std::string init) {
    RunConfig cfg = resolve_config(c);
    echo_config(cfg, "train-phase2");
    const auto data = need_dataset(cfg);
    const auto triplets = synth::load_triplets((fs::path(data_dir_of(cfg)) / "cir_train.jsonl").string());
    const fs::path dir = resolved_run_dir(cfg);
    if (init.empty()) init = (dir / "phase1.ckpt").string();
    Model m(cfg.model, cfg.seed);
    std::ofstream log(dir / "phase2.log.jsonl");
    const std::string ckpt = train::train_phase2(m, cfg.phase2, data, triplets, init, dir.string(), &log);
    std::cout << "phase-2 checkpoint: " << ckpt << "\n";
    return 0;
}

int cmd_eval_cmr(const Common& c, std::string ckpt, int n, std::uint64_t eval_seed) {
    RunConfig cfg = resolve_config(c);
    echo_config(cfg, "eval-cmr");
    const auto data = need_dataset(cfg);
    const fs::path dir = resolved_run_dir(cfg);
    if (ckpt.empty()) ckpt = (dir / "phase1.ckpt").string();
    Model m = load_model(cfg, ckpt);
    const auto rep = ret::eval_cmr(m, data, n, eval_seed);
    ordered_json j = {{"protocol", {{"n", rep.n}, {"seed", rep.seed}}},
                      {"text_to_image", recall_json(rep.text_to_image)},
                      {"image_to_text", recall_json(rep.image_to_text)}};
    const fs::path out = dir / "cmr_report.json";
    std::ofstream(out) << j.dump(2) << "\n";
    std::cout << j.dump(2) << "\n";
    return 0;
}

int cmd_eval_cir(const Common& c, std::string ckpt, const std::string& variant, int n,
                 std::uint64_t eval_seed) {
    RunConfig cfg = resolve_config(c);
    echo_config(cfg, "eval-cir");
    need_dataset(cfg);
    const auto triplets = synth::load_triplets((fs::path(data_dir_of(cfg)) / "cir_val.jsonl").string());
    const fs::path dir = resolved_run_dir(cfg);
    if (ckpt.empty()) ckpt = (dir / "phase2.ckpt").string();
    Model m = load_model(cfg, ckpt);
    const auto rep = ret::eval_cir(m, triplets, ret::parse_variant(variant), n, eval_seed);
    ordered_json j = {{"protocol", {{"n", rep.n}, {"seed", rep.seed}}},
                      {"variant", rep.variant},
                      {"composed", recall_json(rep.composed)},
                      {"image_only_baseline", recall_json(rep.image_only_baseline)}};
    const fs::path out = dir / ("cir_report_" + rep.variant + ".json");
    std::ofstream(out) << j.dump(2) << "\n";
    std::cout << j.dump(2) << "\n";
    return 0;
}

int cmd_caption(const Common& c, const std::string& ckpt, const std::string& image_path,
                const std::string& style) {
    RunConfig cfg = resolve_config(c);
    Model m = load_model(cfg, ckpt);
    const synth::ImageF img = synth::to_float(synth::read_ppm(image_path));
    Tensor patches = m.encoder.patch_encode(img);
    auto out = m.encoder.forward(nullptr, &patches, nullptr, enc::Bank::q, enc::MaskMode::Unimodal);
    Tensor soft = m.encoder.adapt_text(nullptr, out.z_query);
    auto gen = m.captioner.generate(soft, parse_style(style), 16);
    std::cout << gen.text << "\n";
    if (gen.truncated) std::cerr << "note: caption truncated at max length\n";
    return 0;
}

int cmd_generate(const Common& c, const std::string& ckpt, const std::string& spec_text,
                 const std::string& ref_image, const std::string& mod_text, int steps,
                 double guidance, std::uint64_t sample_seed, std::string out_name) {
    RunConfig cfg = resolve_config(c);
    echo_config(cfg, "generate");
    Model m = load_model(cfg, ckpt);
    const fs::path dir = resolved_run_dir(cfg);

    Tensor z_query;
    std::string source;
    if (!spec_text.empty()) {
        const auto spec = parse_spec(spec_text);
        Tensor patches = m.encoder.patch_encode(synth::to_float(synth::render(spec, 0)));
        z_query = m.encoder.forward(nullptr, &patches, nullptr, enc::Bank::q, enc::MaskMode::Unimodal).z_query;
        source = "spec:" + spec_text;
    } else if (!ref_image.empty() && !mod_text.empty()) {
        const synth::ImageF ref = synth::to_float(synth::read_ppm(ref_image));
        const auto tokens = m.captioner.vocab().tokenize(mod_text);
        Tensor patches = m.encoder.patch_encode(ref);
        z_query = m.encoder.forward(nullptr, &patches, &tokens, enc::Bank::q_r,
                                    enc::MaskMode::Bidirectional).z_query;
        source = "composed:" + ref_image;
    } else {
        throw std::invalid_argument("generate needs --spec or both --ref-image and --text");
    }
    diff::Condition cond = m.encoder.adapt_image(nullptr, z_query);

    diff::SamplerOptions opt;
    opt.guidance = guidance;
    opt.n_steps = steps;
    RngStream rng = RngStream::keyed(sample_seed, "ddim_sample");
    const diff::Latent z = diff::ddim_sample(m.epsnet, m.schedule, cond, opt, rng);
    const synth::ImageF img = m.codec.decode(z);
    synth::RenderedImage bytes;
    bytes.pixels.resize(img.rgb.size());
    for (std::size_t i = 0; i < img.rgb.size(); ++i)
        bytes.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(img.rgb[i], 0.0, 1.0) * 255.0));
    if (out_name.empty()) out_name = "sample.ppm";
    const fs::path out_path = dir / out_name;
    synth::write_ppm(out_path.string(), bytes);
    ordered_json side = {{"seed", sample_seed}, {"guidance_scale", guidance}, {"n_steps", steps},
                         {"condition_source", source}};
    std::ofstream(out_path.string() + ".json") << side.dump(2) << "\n";
    std::cout << "sample written to " << out_path.string() << "\n";
    return 0;
}

int cmd_gradcheck(const Common& c) {
    RunConfig cfg = resolve_config(c);
    Model m(cfg.model, cfg.seed == 0 ? 1 : cfg.seed);
    m.store.set_trainable_prefixes({"qformer", "queries", "proj", "itm", "temp", "adapter", "lora",
                                    "epsnet", "lm"});

    auto pair_of = [&](int spec_id, std::uint64_t seed) {
        loss::PairSample s;
        const auto spec = synth::GarmentSpec::from_id(spec_id);
        s.image = synth::to_float(synth::render(spec, seed));
        s.style = synth::CaptionStyle::professional;
        s.caption_tokens = m.captioner.vocab().tokenize(synth::describe(spec, s.style));
        s.t = 1 + static_cast<int>(seed % m.cfg.T);
        RngStream rng(seed);
        s.eps = Tensor::zeros({m.cfg.lat_ch, m.cfg.lat_tokens()});
        for (int i = 0; i < s.eps.numel(); ++i) s.eps.at(i) = rng.normal();
        return s;
    };
    auto triplet_of = [&](int ref_id, std::uint64_t seed) {
        loss::TripletSample s;
        RngStream rng(seed);
        const auto ref = synth::GarmentSpec::from_id(ref_id);
        const auto trip = synth::make_modification(ref, rng);
        const auto target = synth::GarmentSpec::from_id(trip.target_id);
        s.ref_image = synth::to_float(synth::render(ref, seed));
        s.mod_tokens = m.captioner.vocab().tokenize(trip.text);
        s.target_image = synth::to_float(synth::render(target, seed + 1));
        s.style = synth::CaptionStyle::professional;
        s.target_caption_tokens = m.captioner.vocab().tokenize(synth::describe(target, s.style));
        s.t = 1 + static_cast<int>(seed % m.cfg.T);
        s.eps = Tensor::zeros({m.cfg.lat_ch, m.cfg.lat_tokens()});
        for (int i = 0; i < s.eps.numel(); ++i) s.eps.at(i) = rng.normal();
        return s;
    };
    std::vector<loss::PairSample> pairs = {pair_of(17, 3), pair_of(301, 4)};
    std::vector<loss::TripletSample> trips = {triplet_of(22, 5), triplet_of(260, 6)};

    RngStream pick(1234);
    auto p1 = fd::max_rel_error_params(
        m.store, [&](Tape* tp) { return loss::phase1_loss(tp, m, pairs).total; }, 1e-5, 4, &pick);
    auto p2 = fd::max_rel_error_params(
        m.store, [&](Tape* tp) { return loss::phase2_loss(tp, m, trips).total; }, 1e-5, 4, &pick);

    const double worst = std::max(p1.max_rel_err, p2.max_rel_err);
    std::cout << "phase-1 loss: max rel err " << p1.max_rel_err << " (" << p1.coords_checked
              << " coords, worst " << p1.worst_param << ")\n";
    std::cout << "phase-2 loss: max rel err " << p2.max_rel_err << " (" << p2.coords_checked
              << " coords, worst " << p2.worst_param << ")\n";
    std::cout << "max relative error: " << worst << "\n";
    return worst < 1e-4 ? 0 : 1;
}

} // namespace

int dispatch(const std::vector<std::string>& args) {
    CLI::App app{"desk-scale multimodal fashion retrieval and generation"};
    app.require_subcommand(1);

    Common common;
    auto add_common = [&common](CLI::App* sub, bool config_required) {
        auto* copt = sub->add_option("--config", common.config_path, "run configuration file");
        if (config_required) copt->required();
        sub->add_option("--seed", common.seed, "override the config seed")
            ->each([&common](const std::string&) { common.seed_set = true; });
    };

    auto* gen_data = app.add_subcommand("gen-data", "write the synthetic dataset");
    add_common(gen_data, false);

    auto* tp1 = app.add_subcommand("train-phase1", "cross-modal pre-training (1a + 1b)");
    add_common(tp1, true);

    auto* tp2 = app.add_subcommand("train-phase2", "composed fine-tuning");
    add_common(tp2, true);
    std::string init_ckpt;
    tp2->add_option("--init", init_ckpt, "phase-1 checkpoint (default <run_dir>/phase1.ckpt)");

    auto* ecmr = app.add_subcommand("eval-cmr", "cross-modal retrieval evaluation");
    add_common(ecmr, true);
    std::string cmr_ckpt;
    int cmr_n = 100;
    std::uint64_t cmr_seed = 7;
    ecmr->add_option("--ckpt", cmr_ckpt, "checkpoint (default <run_dir>/phase1.ckpt)");
    ecmr->add_option("--n", cmr_n, "protocol size");
    ecmr->add_option("--eval-seed", cmr_seed, "protocol sampling seed");

    auto* ecir = app.add_subcommand("eval-cir", "composed retrieval evaluation");
    add_common(ecir, true);
    std::string cir_ckpt, cir_variant = "fused";
    int cir_n = 100;
    std::uint64_t cir_seed = 7;
    ecir->add_option("--ckpt", cir_ckpt, "checkpoint (default <run_dir>/phase2.ckpt)");
    ecir->add_option("--variant", cir_variant, "img|cap|fused");
    ecir->add_option("--n", cir_n, "protocol size");
    ecir->add_option("--eval-seed", cir_seed, "protocol sampling seed");

    auto* cap = app.add_subcommand("caption", "caption an image");
    add_common(cap, false);
    std::string cap_ckpt, cap_image, cap_style = "professional";
    cap->add_option("--ckpt", cap_ckpt, "checkpoint")->required();
    cap->add_option("--image", cap_image, "ppm image path")->required();
    cap->add_option("--style", cap_style, "brief|professional|detailed");

    auto* gen = app.add_subcommand("generate", "sample an image from a spec or a composed query");
    add_common(gen, false);
    std::string gen_ckpt, gen_spec, gen_ref, gen_text, gen_out;
    int gen_steps = 50;
    double gen_guidance = 2.0;
    std::uint64_t gen_seed = 3;
    gen->add_option("--ckpt", gen_ckpt, "checkpoint")->required();
    gen->add_option("--spec", gen_spec, "category,color,sleeve,pattern,length");
    gen->add_option("--ref-image", gen_ref, "reference ppm for a composed query");
    gen->add_option("--text", gen_text, "modification text for a composed query");
    gen->add_option("--steps", gen_steps, "ddim steps");
    gen->add_option("--guidance", gen_guidance, "guidance scale");
    gen->add_option("--sample-seed", gen_seed, "initial-noise seed");
    gen->add_option("--out", gen_out, "output file name under the run dir");

    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
    add_common(gc, false);

    std::vector<std::string> argv = args;
    std::vector<const char*> cargs;
    cargs.push_back("unifusion");
    for (const auto& a : argv) cargs.push_back(a.c_str());

    try {
        app.parse(static_cast<int>(cargs.size()), cargs.data());
    } catch (const CLI::CallForHelp& e) {
        std::cout << app.help() << "\n";
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n" << app.help() << "\n";
        return 2;
    }

    try {
        if (gen_data->parsed()) return cmd_gen_data(common);
        if (tp1->parsed()) return cmd_train_phase1(common);
        if (tp2->parsed()) return cmd_train_phase2(common, init_ckpt);
        if (ecmr->parsed()) return cmd_eval_cmr(common, cmr_ckpt, cmr_n, cmr_seed);
        if (ecir->parsed()) return cmd_eval_cir(common, cir_ckpt, cir_variant, cir_n, cir_seed);
        if (cap->parsed()) return cmd_caption(common, cap_ckpt, cap_image, cap_style);
        if (gen->parsed())
            return cmd_generate(common, gen_ckpt, gen_spec, gen_ref, gen_text, gen_steps,
                                gen_guidance, gen_seed, gen_out);
        if (gc->parsed()) return cmd_gradcheck(common);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}

} // namespace unifusion::cli
