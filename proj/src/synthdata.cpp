#include "unifusion/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <stdexcept>

#include "json.hpp"

namespace unifusion::synth {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

constexpr const char* kGrammarVersion = "garment-grammar-1";
constexpr int kGrid = kImageSize / kBlock; // 8x8 block grid
constexpr double kRejectRmse = 0.25;       // in [0,1] float space

const std::array<std::uint8_t, 3> kBackground = {110, 110, 110};

std::uint8_t shade(std::uint8_t base) {
    // pattern overlay: lighten dark garments, darken light ones
    return base < 128 ? static_cast<std::uint8_t>(base + 80) : static_cast<std::uint8_t>(base - 80);
}

// Garment occupancy on the block grid, patterns not applied.
// Row 0 is reserved for the shirt collar; torso spans rows 1..n.
bool garment_block(const GarmentSpec& s, int brow, int bcol) {
    const bool long_cut = s.length == Length::long_cut;
    switch (s.category) {
    case Category::dress: {
        if (brow >= 1 && brow <= 3 && bcol >= 2 && bcol <= 5) return true; // torso
        const int hem = long_cut ? 7 : 5;
        if (brow >= 4 && brow <= hem && bcol >= 1 && bcol <= 6) return true; // skirt
        break;
    }
    case Category::shirt: {
        if (brow == 0 && (bcol == 2 || bcol == 5)) return true; // collar tips
        const int hem = long_cut ? 5 : 4;
        if (brow >= 1 && brow <= hem && bcol >= 2 && bcol <= 5) return true;
        break;
    }
    case Category::toptee: {
        const int hem = long_cut ? 4 : 3;
        if (brow >= 1 && brow <= hem && bcol >= 2 && bcol <= 5) return true;
        break;
    }
    }
    // sleeves hang from row 1 on both sides
    if (s.sleeve == Sleeve::short_sleeve && brow == 1 && (bcol == 1 || bcol == 6)) return true;
    if (s.sleeve == Sleeve::long_sleeve && brow >= 1 && brow <= 3 && (bcol == 1 || bcol == 6)) return true;
    return false;
}

bool pattern_block(const GarmentSpec& s, int brow, int bcol) {
    switch (s.pattern) {
    case Pattern::solid: return false;
    case Pattern::striped: return brow % 2 == 1;              // 4px bands
    case Pattern::dotted: return brow % 2 == 0 && bcol % 2 == 0; // dots on an 8px grid
    }
    return false;
}

const std::vector<ImageF>& templates() {
    static std::vector<ImageF> cache;
    static std::once_flag flag;
    std::call_once(flag, [] {
        cache.reserve(kNumSpecs);
        for (int id = 0; id < kNumSpecs; ++id)
            cache.push_back(to_float(render(GarmentSpec::from_id(id), 0)));
    });
    return cache;
}

std::string caption_brief(const GarmentSpec& s) {
    return std::string(name(s.color)) + " " + name(s.category);
}

std::string caption_professional(const GarmentSpec& s) {
    return std::string("a ") + name(s.length) + " " + name(s.color) + " " + name(s.pattern) + " " +
           name(s.category) + " with " + name(s.sleeve) + " sleeves";
}

std::string caption_detailed(const GarmentSpec& s) {
    return std::string("this ") + name(s.category) + " is " + name(s.color) +
           " in color featuring " + name(s.pattern) + " pattern and " + name(s.sleeve) +
           " sleeves in " + name(s.length) + " length";
}

} // namespace

int GarmentSpec::id() const {
    int v = static_cast<int>(category);
    v = v * kNumColors + static_cast<int>(color);
    v = v * kNumSleeves + static_cast<int>(sleeve);
    v = v * kNumPatterns + static_cast<int>(pattern);
    v = v * kNumLengths + static_cast<int>(length);
    return v;
}

GarmentSpec GarmentSpec::from_id(int id) {
    if (id < 0 || id >= kNumSpecs) throw std::out_of_range("spec id outside [0, 432): " + std::to_string(id));
    GarmentSpec s;
    s.length = static_cast<Length>(id % kNumLengths);
    id /= kNumLengths;
    s.pattern = static_cast<Pattern>(id % kNumPatterns);
    id /= kNumPatterns;
    s.sleeve = static_cast<Sleeve>(id % kNumSleeves);
    id /= kNumSleeves;
    s.color = static_cast<Color>(id % kNumColors);
    id /= kNumColors;
    s.category = static_cast<Category>(id);
    return s;
}

const char* name(Category c) {
    switch (c) {
    case Category::dress: return "dress";
    case Category::shirt: return "shirt";
    case Category::toptee: return "toptee";
    }
    return "?";
}

const char* name(Color c) {
    switch (c) {
    case Color::red: return "red";
    case Color::blue: return "blue";
    case Color::green: return "green";
    case Color::yellow: return "yellow";
    case Color::black: return "black";
    case Color::white: return "white";
    case Color::purple: return "purple";
    case Color::orange: return "orange";
    }
    return "?";
}

const char* name(Sleeve s) {
    switch (s) {
    case Sleeve::sleeveless: return "sleeveless";
    case Sleeve::short_sleeve: return "short";
    case Sleeve::long_sleeve: return "long";
    }
    return "?";
}

const char* name(Pattern p) {
    switch (p) {
    case Pattern::solid: return "solid";
    case Pattern::striped: return "striped";
    case Pattern::dotted: return "dotted";
    }
    return "?";
}

const char* name(Length l) {
    return l == Length::short_cut ? "short" : "long";
}

const char* name(CaptionStyle s) {
    switch (s) {
    case CaptionStyle::brief: return "brief";
    case CaptionStyle::professional: return "professional";
    case CaptionStyle::detailed: return "detailed";
    }
    return "?";
}

std::array<std::uint8_t, 3> palette(Color c) {
    switch (c) {
    case Color::red: return {220, 30, 30};
    case Color::blue: return {30, 60, 220};
    case Color::green: return {30, 180, 60};
    case Color::yellow: return {235, 220, 40};
    case Color::black: return {25, 25, 25};
    case Color::white: return {245, 245, 245};
    case Color::purple: return {150, 40, 200};
    case Color::orange: return {240, 140, 30};
    }
    return {0, 0, 0};
}

ImageF to_float(const RenderedImage& img) {
    ImageF f;
    f.rgb.resize(img.pixels.size());
    for (std::size_t i = 0; i < img.pixels.size(); ++i) f.rgb[i] = img.pixels[i] / 255.0;
    return f;
}

RenderedImage render(const GarmentSpec& spec, std::uint64_t texture_seed) {
    RenderedImage img;
    img.pixels.assign(kImageSize * kImageSize * 3, 0);
    const auto base = palette(spec.color);
    const std::array<std::uint8_t, 3> overlay = {shade(base[0]), shade(base[1]), shade(base[2])};
    RngStream noise = RngStream::keyed(texture_seed, "texture");
    for (int y = 0; y < kImageSize; ++y) {
        for (int x = 0; x < kImageSize; ++x) {
            const int brow = y / kBlock, bcol = x / kBlock;
            std::uint8_t* px = img.pixels.data() + (y * kImageSize + x) * 3;
            if (garment_block(spec, brow, bcol)) {
                const auto& c = pattern_block(spec, brow, bcol) ? overlay : base;
                px[0] = c[0];
                px[1] = c[1];
                px[2] = c[2];
            } else {
                for (int ch = 0; ch < 3; ++ch) {
                    int v = kBackground[ch];
                    if (texture_seed != 0) v += noise.uniform_int(7) - 3;
                    px[ch] = static_cast<std::uint8_t>(std::clamp(v, 0, 255));
                }
            }
        }
    }
    return img;
}

std::optional<GarmentSpec> attribute_decode(const ImageF& img) {
    if (img.rgb.size() != static_cast<std::size_t>(kImageSize * kImageSize * 3))
        throw std::invalid_argument("attribute_decode: wrong image size");
    const auto& temps = templates();
    int best = -1;
    double best_sse = 0.0;
    for (int id = 0; id < kNumSpecs; ++id) {
        double sse = 0.0;
        const auto& t = temps[id].rgb;
        for (std::size_t i = 0; i < t.size(); ++i) {
            const double d = img.rgb[i] - t[i];
            sse += d * d;
        }
        if (best < 0 || sse < best_sse) {
            best = id;
            best_sse = sse;
        }
    }
    const double rmse = std::sqrt(best_sse / (kImageSize * kImageSize * 3));
    if (rmse > kRejectRmse) return std::nullopt;
    return GarmentSpec::from_id(best);
}

std::optional<GarmentSpec> attribute_decode(const RenderedImage& img) {
    return attribute_decode(to_float(img));
}

std::string describe(const GarmentSpec& spec, CaptionStyle style) {
    switch (style) {
    case CaptionStyle::brief: return caption_brief(spec);
    case CaptionStyle::professional: return caption_professional(spec);
    case CaptionStyle::detailed: return caption_detailed(spec);
    }
    throw std::invalid_argument("describe: unknown style");
}

const std::vector<std::string>& grammar_words() {
    static const std::vector<std::string> words = {
        // specials
        "[pad]", "[bos]", "[eos]", "[img]", "[/img]", "[user]", "[assistant]",
        // attribute values
        "red", "blue", "green", "yellow", "black", "white", "purple", "orange",
        "dress", "shirt", "toptee",
        "sleeveless", "short", "long",
        "solid", "striped", "dotted",
        // caption and modification glue
        "a", "with", "sleeves", "and", "pattern", "this", "is", "in", "color",
        "featuring", "length", "instead", "of", "has",
        // instruction glue
        "write", "detailed", "professional", "description", "for", "the", "cloth",
        "describe", "style", "design", "other", "key", "points",
    };
    return words;
}

CIRTriplet make_modification(const GarmentSpec& ref, RngStream& rng) {
    // attributes eligible for change: color, sleeve, pattern, length
    const int k = rng.uniform() < 0.5 ? 1 : 2;
    std::array<int, 4> attrs = {0, 1, 2, 3};
    // draw k distinct attribute indices
    std::vector<int> chosen;
    while (static_cast<int>(chosen.size()) < k) {
        const int a = attrs[rng.uniform_int(4)];
        if (std::find(chosen.begin(), chosen.end(), a) == chosen.end()) chosen.push_back(a);
    }
    std::sort(chosen.begin(), chosen.end()); // clause order fixed: color, sleeve, pattern, length

    GarmentSpec target = ref;
    std::string text;
    std::vector<std::string> changed;
    for (int a : chosen) {
        std::string clause;
        switch (a) {
        case 0: {
            int nv = rng.uniform_int(kNumColors - 1);
            if (nv >= static_cast<int>(ref.color)) ++nv;
            target.color = static_cast<Color>(nv);
            clause = std::string("is ") + name(target.color) + " instead of " + name(ref.color);
            changed.push_back("color");
            break;
        }
        case 1: {
            int nv = rng.uniform_int(kNumSleeves - 1);
            if (nv >= static_cast<int>(ref.sleeve)) ++nv;
            target.sleeve = static_cast<Sleeve>(nv);
            clause = std::string("has ") + name(target.sleeve) + " sleeves";
            changed.push_back("sleeve");
            break;
        }
        case 2: {
            int nv = rng.uniform_int(kNumPatterns - 1);
            if (nv >= static_cast<int>(ref.pattern)) ++nv;
            target.pattern = static_cast<Pattern>(nv);
            clause = std::string("has ") + name(target.pattern) + " pattern";
            changed.push_back("pattern");
            break;
        }
        case 3: {
            target.length = ref.length == Length::short_cut ? Length::long_cut : Length::short_cut;
            clause = std::string("is ") + name(target.length) + " in length";
            changed.push_back("length");
            break;
        }
        }
        if (!text.empty()) text += " and ";
        text += clause;
    }
    return CIRTriplet{ref.id(), text, target.id(), changed};
}

void write_ppm(const std::string& path, const RenderedImage& img) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "P6\n" << kImageSize << " " << kImageSize << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()),
              static_cast<std::streamsize>(img.pixels.size()));
}

RenderedImage read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path);
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    in >> magic >> w >> h >> maxval;
    if (magic != "P6" || w != kImageSize || h != kImageSize || maxval != 255)
        throw std::runtime_error("unsupported ppm: " + path);
    in.get(); // single whitespace after maxval
    RenderedImage img;
    img.pixels.resize(static_cast<std::size_t>(w) * h * 3);
    in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (!in) throw std::runtime_error("short ppm: " + path);
    return img;
}

DatasetManifest gen_dataset(const std::string& dir, const DatasetConfig& cfg, std::uint64_t seed) {
    if (cfg.train_specs <= 0 || cfg.val_specs <= 0 || cfg.train_specs + cfg.val_specs > kNumSpecs)
        throw std::invalid_argument("gen_dataset: train+val must fit in " + std::to_string(kNumSpecs) + " specs");
    if (cfg.captions_per_spec != 3)
        throw std::invalid_argument("gen_dataset: captions_per_spec is fixed at 3 (one per style)");

    fs::create_directories(fs::path(dir) / "images");

    // split
    std::vector<int> ids(kNumSpecs);
    for (int i = 0; i < kNumSpecs; ++i) ids[i] = i;
    RngStream split_rng = RngStream::keyed(seed, "split");
    for (int i = kNumSpecs - 1; i > 0; --i)
        std::swap(ids[i], ids[split_rng.uniform_int(i + 1)]);
    DatasetManifest m;
    m.seed = seed;
    m.grammar_version = kGrammarVersion;
    m.dir = dir;
    m.train_ids.assign(ids.begin(), ids.begin() + cfg.train_specs);
    m.val_ids.assign(ids.begin() + cfg.train_specs, ids.begin() + cfg.train_specs + cfg.val_specs);
    std::sort(m.train_ids.begin(), m.train_ids.end());
    std::sort(m.val_ids.begin(), m.val_ids.end());

    // images: canonical noiseless render per spec
    for (int id = 0; id < kNumSpecs; ++id) {
        char nm[32];
        std::snprintf(nm, sizeof(nm), "spec_%03d.ppm", id);
        write_ppm((fs::path(dir) / "images" / nm).string(), render(GarmentSpec::from_id(id), 0));
    }

    // captions
    {
        std::ofstream out(fs::path(dir) / "captions.jsonl");
        for (int id = 0; id < kNumSpecs; ++id) {
            for (int s = 0; s < 3; ++s) {
                const auto style = static_cast<CaptionStyle>(s);
                ordered_json j = {{"spec_id", id}, {"style", name(style)},
                                  {"text", describe(GarmentSpec::from_id(id), style)}};
                out << j.dump() << "\n";
                ++m.caption_count;
            }
        }
    }

    // CIR triplets
    auto write_triplets = [&](const std::string& file, const std::vector<int>& pool, int count,
                              const char* stream_name) {
        RngStream rng = RngStream::keyed(seed, stream_name);
        std::ofstream out(fs::path(dir) / file);
        for (int i = 0; i < count; ++i) {
            const int ref_id = pool[rng.uniform_int(static_cast<int>(pool.size()))];
            const CIRTriplet t = make_modification(GarmentSpec::from_id(ref_id), rng);
            ordered_json j = {{"ref_id", t.ref_id}, {"text", t.text}, {"target_id", t.target_id},
                              {"changed", t.changed}};
            out << j.dump() << "\n";
        }
        return count;
    };
    m.cir_train_count = write_triplets("cir_train.jsonl", m.train_ids, cfg.cir_train, "cir_train");
    m.cir_val_count = write_triplets("cir_val.jsonl", m.val_ids, cfg.cir_val, "cir_val");

    // vocabulary
    {
        std::ofstream out(fs::path(dir) / "vocab.txt");
        for (const auto& w : grammar_words()) out << w << "\n";
    }

    // manifest
    {
        ordered_json j = {
            {"seed", m.seed},
            {"grammar_version", m.grammar_version},
            {"train_ids", m.train_ids},
            {"val_ids", m.val_ids},
            {"caption_count", m.caption_count},
            {"cir_train_count", m.cir_train_count},
            {"cir_val_count", m.cir_val_count},
        };
        std::ofstream out(fs::path(dir) / "manifest.json");
        out << j.dump(2) << "\n";
    }
    return m;
}

DatasetManifest load_manifest(const std::string& dir) {
    std::ifstream in(fs::path(dir) / "manifest.json");
    if (!in) throw std::runtime_error("no manifest in " + dir);
    ordered_json j = ordered_json::parse(in);
    DatasetManifest m;
    m.seed = j.at("seed").get<std::uint64_t>();
    m.grammar_version = j.at("grammar_version").get<std::string>();
    m.train_ids = j.at("train_ids").get<std::vector<int>>();
    m.val_ids = j.at("val_ids").get<std::vector<int>>();
    m.caption_count = j.at("caption_count").get<int>();
    m.cir_train_count = j.at("cir_train_count").get<int>();
    m.cir_val_count = j.at("cir_val_count").get<int>();
    m.dir = dir;
    return m;
}

std::vector<CIRTriplet> load_triplets(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("no triplet file: " + path);
    std::vector<CIRTriplet> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        ordered_json j = ordered_json::parse(line);
        CIRTriplet t;
        t.ref_id = j.at("ref_id").get<int>();
        t.text = j.at("text").get<std::string>();
        t.target_id = j.at("target_id").get<int>();
        t.changed = j.at("changed").get<std::vector<std::string>>();
        out.push_back(std::move(t));
    }
    return out;
}

} // namespace unifusion::synth
