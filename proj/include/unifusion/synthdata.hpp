#pragma once

#include "unifusion/rng.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace unifusion::synth {

enum class Category : int { dress = 0, shirt = 1, toptee = 2 };
enum class Color : int { red = 0, blue, green, yellow, black, white, purple, orange };
enum class Sleeve : int { sleeveless = 0, short_sleeve, long_sleeve };
enum class Pattern : int { solid = 0, striped, dotted };
enum class Length : int { short_cut = 0, long_cut };

constexpr int kNumCategories = 3;
constexpr int kNumColors = 8;
constexpr int kNumSleeves = 3;
constexpr int kNumPatterns = 3;
constexpr int kNumLengths = 2;
constexpr int kNumSpecs = kNumCategories * kNumColors * kNumSleeves * kNumPatterns * kNumLengths; // 432

constexpr int kImageSize = 32;
constexpr int kBlock = 4; // all attribute geometry is aligned to 4x4 blocks

struct GarmentSpec {
    Category category = Category::dress;
    Color color = Color::red;
    Sleeve sleeve = Sleeve::sleeveless;
    Pattern pattern = Pattern::solid;
    Length length = Length::short_cut;

    int id() const; // category-major, [0, 432); per-category ranges are contiguous
    static GarmentSpec from_id(int id);
    bool operator==(const GarmentSpec&) const = default;
};

const char* name(Category c);
const char* name(Color c);
const char* name(Sleeve s);
const char* name(Pattern p);
const char* name(Length l);
std::array<std::uint8_t, 3> palette(Color c);

// 32x32 RGB bytes, row-major.
struct RenderedImage {
    std::vector<std::uint8_t> pixels; // kImageSize*kImageSize*3
};

// Same image in [0,1] doubles; the working currency of encoder and codec.
struct ImageF {
    std::vector<double> rgb; // kImageSize*kImageSize*3
};

ImageF to_float(const RenderedImage& img);

// Deterministic renderer. Texture seed 0 is the canonical noiseless render;
// other seeds add +-3 byte noise to background pixels only, so attribute
// pixels are always exact.
RenderedImage render(const GarmentSpec& spec, std::uint64_t texture_seed);

// Nearest-template classification against the 432 noiseless renders.
// Distances above the rejection threshold yield nullopt, never a throw.
std::optional<GarmentSpec> attribute_decode(const ImageF& img);
std::optional<GarmentSpec> attribute_decode(const RenderedImage& img);

enum class CaptionStyle : int { brief = 0, professional, detailed };
const char* name(CaptionStyle s);

std::string describe(const GarmentSpec& spec, CaptionStyle style);

// Closed word list of the caption grammar, specials first. Token index =
// position in this list; the vocabulary file is this list, one per line.
const std::vector<std::string>& grammar_words();

struct CIRTriplet {
    int ref_id = 0;
    std::string text; // clause per changed attribute, joined with " and "
    int target_id = 0;
    std::vector<std::string> changed; // attribute names
};

CIRTriplet make_modification(const GarmentSpec& ref, RngStream& rng);

struct DatasetConfig {
    int train_specs = 300;
    int val_specs = 132;
    int captions_per_spec = 3; // the three styles
    int cir_train = 2000;
    int cir_val = 400;
};

struct DatasetManifest {
    std::uint64_t seed = 0;
    std::string grammar_version;
    std::vector<int> train_ids;
    std::vector<int> val_ids;
    int caption_count = 0;
    int cir_train_count = 0;
    int cir_val_count = 0;
    std::string dir;
};

// Writes images (PPM), captions (JSONL), CIR triplets (JSONL), the
// vocabulary file and the manifest; byte-reproducible from the seed.
DatasetManifest gen_dataset(const std::string& dir, const DatasetConfig& cfg, std::uint64_t seed);

DatasetManifest load_manifest(const std::string& dir);
std::vector<CIRTriplet> load_triplets(const std::string& path);

void write_ppm(const std::string& path, const RenderedImage& img);
RenderedImage read_ppm(const std::string& path);

} // namespace unifusion::synth
