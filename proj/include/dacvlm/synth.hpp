#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dacvlm/patch_embed.hpp"
#include "dacvlm/rng.hpp"

namespace dacvlm {

// Procedural scenes: up to four solid shapes on a 4x4 grid, white canvas.
// Every supervised target is exactly computable from the scene.

enum class ShapeKind : int { circle = 0, square = 1, triangle = 2 };
constexpr int kNumShapes = 3;
constexpr int kNumColors = 8;
constexpr int kGridSize = 4;
constexpr int kMaxObjects = 4;

const char* shape_name(ShapeKind s);
const char* color_name(int color);
ShapeKind shape_from_name(const std::string& name);
int color_from_name(const std::string& name);
const double* color_rgb(int color);  // 3 components in [0,1]

struct SceneObject {
    ShapeKind shape;
    int color;  // palette index
    int r, c;   // grid cell
};

struct Scene {
    std::vector<SceneObject> objects;

    void validate() const;  // cell uniqueness, bounds, object cap
    bool empty() const { return objects.empty(); }
    // Objects ordered row-major; captions and answers use this order.
    std::vector<SceneObject> row_major() const;
};

Scene random_scene(Rng& rng, int max_objects = kMaxObjects, int min_objects = 1);

// Deterministic rasterization; dims must be multiples of 32.
ImageInput render(const Scene& scene, std::int64_t h, std::int64_t w);

// Canonical caption, bijective with the scene ("a red circle at row one
// column two , ..." / "an empty canvas").
std::string caption_of(const Scene& scene);
Scene parse_caption(const std::string& caption);

// Templated question with an exact answer; throws on an empty scene.
std::pair<std::string, std::string> qa_of(const Scene& scene, std::uint64_t seed);

// True arithmetic sentence, e.g. "two plus three equals five".
std::string text_only_sentence(std::uint64_t seed);
const std::string& number_word(int n);  // 0..20

enum class SampleKind { caption, qa, instruction, text_only, web };
std::string sample_kind_to_string(SampleKind k);
SampleKind sample_kind_from_string(const std::string& s);

struct Sample {
    SampleKind kind = SampleKind::caption;
    Scene scene;             // empty for text_only
    std::string image_path;  // relative to the corpus dir; empty for text_only
    std::int64_t canvas_h = 0, canvas_w = 0;
    std::string prompt;  // question / instruction; empty for caption and text_only
    std::string target;  // caption / answer / sentence
};

struct Corpus {
    std::vector<Sample> samples;
};

struct CorpusOptions {
    std::int64_t n = 1000;
    std::uint64_t seed = 0;
    std::int64_t canvas = 256;  // square canvas, multiple of 32
    int max_objects = kMaxObjects;
    std::string kind = "all";  // or caption|qa|instruction|text_only|web
};

Corpus generate_corpus(const CorpusOptions& opt);

// corpus.jsonl plus an images/ sibling directory of PPM files.
void write_corpus(const Corpus& corpus, const std::string& dir);
Corpus read_corpus(const std::string& dir);

}  // namespace dacvlm
