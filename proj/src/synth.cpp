#include "dacvlm/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "dacvlm/errors.hpp"

namespace dacvlm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const char* kShapeNames[] = {"circle", "square", "triangle"};
const char* kColorNames[] = {"red", "green", "blue", "yellow",
                             "purple", "orange", "black", "gray"};
const double kPalette[kNumColors][3] = {
    {1.0, 0.0, 0.0}, {0.0, 0.7, 0.0}, {0.0, 0.0, 1.0}, {1.0, 0.9, 0.0},
    {0.6, 0.0, 0.8}, {1.0, 0.55, 0.0}, {0.0, 0.0, 0.0}, {0.5, 0.5, 0.5},
};

const std::string kNumberWords[] = {
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
    "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen",
    "eighteen", "nineteen", "twenty"};

int number_from_word(const std::string& w) {
    for (int i = 0; i <= 20; ++i) {
        if (kNumberWords[i] == w) return i;
    }
    throw ConfigError("not a number word: '" + w + "'");
}

}  // namespace

const char* shape_name(ShapeKind s) { return kShapeNames[static_cast<int>(s)]; }
const char* color_name(int color) { return kColorNames[color]; }
const double* color_rgb(int color) { return kPalette[color]; }

ShapeKind shape_from_name(const std::string& name) {
    for (int i = 0; i < kNumShapes; ++i) {
        if (name == kShapeNames[i]) return static_cast<ShapeKind>(i);
    }
    throw ConfigError("unknown shape '" + name + "'");
}

int color_from_name(const std::string& name) {
    for (int i = 0; i < kNumColors; ++i) {
        if (name == kColorNames[i]) return i;
    }
    throw ConfigError("unknown color '" + name + "'");
}

const std::string& number_word(int n) {
    if (n < 0 || n > 20) throw ConfigError("number word out of range: " + std::to_string(n));
    return kNumberWords[n];
}

void Scene::validate() const {
    if (objects.size() > kMaxObjects) {
        throw ConfigError("scene: at most " + std::to_string(kMaxObjects) + " objects");
    }
    std::vector<int> cells;
    for (const auto& o : objects) {
        if (o.r < 0 || o.r >= kGridSize || o.c < 0 || o.c >= kGridSize) {
            throw ConfigError("scene: cell out of the 4x4 grid");
        }
        if (o.color < 0 || o.color >= kNumColors) {
            throw ConfigError("scene: color index out of palette");
        }
        const int cell = o.r * kGridSize + o.c;
        if (std::find(cells.begin(), cells.end(), cell) != cells.end()) {
            throw ConfigError("scene: two objects share cell (" + std::to_string(o.r) + "," +
                              std::to_string(o.c) + ")");
        }
        cells.push_back(cell);
    }
}

std::vector<SceneObject> Scene::row_major() const {
    std::vector<SceneObject> sorted = objects;
    std::sort(sorted.begin(), sorted.end(), [](const SceneObject& a, const SceneObject& b) {
        return a.r != b.r ? a.r < b.r : a.c < b.c;
    });
    return sorted;
}

Scene random_scene(Rng& rng, int max_objects, int min_objects) {
    Scene scene;
    const int n = min_objects +
                  static_cast<int>(rng.uniform_int(
                      static_cast<std::uint64_t>(max_objects - min_objects + 1)));
    std::vector<int> cells(kGridSize * kGridSize);
    for (int i = 0; i < kGridSize * kGridSize; ++i) cells[i] = i;
    for (int i = 0; i < n; ++i) {
        // Draw a free cell without replacement.
        const std::size_t pick = rng.uniform_int(cells.size() - static_cast<std::size_t>(i));
        std::swap(cells[pick], cells[cells.size() - 1 - static_cast<std::size_t>(i)]);
        const int cell = cells[cells.size() - 1 - static_cast<std::size_t>(i)];
        SceneObject o;
        o.shape = static_cast<ShapeKind>(rng.uniform_int(kNumShapes));
        o.color = static_cast<int>(rng.uniform_int(kNumColors));
        o.r = cell / kGridSize;
        o.c = cell % kGridSize;
        scene.objects.push_back(o);
    }
    return scene;
}

ImageInput render(const Scene& scene, std::int64_t h, std::int64_t w) {
    if (h % 32 != 0 || w % 32 != 0) {
        throw DimensionError("render: canvas dims must be multiples of 32");
    }
    scene.validate();
    ImageInput img = ImageInput::white(h, w);
    const double ch = static_cast<double>(h) / kGridSize;
    const double cw = static_cast<double>(w) / kGridSize;
    for (const auto& o : scene.objects) {
        const double cy = (o.r + 0.5) * ch;
        const double cx = (o.c + 0.5) * cw;
        const double half = 0.38 * std::min(ch, cw);
        const double* rgb = kPalette[o.color];
        const std::int64_t y0 = static_cast<std::int64_t>(std::floor(cy - half));
        const std::int64_t y1 = static_cast<std::int64_t>(std::ceil(cy + half));
        const std::int64_t x0 = static_cast<std::int64_t>(std::floor(cx - half));
        const std::int64_t x1 = static_cast<std::int64_t>(std::ceil(cx + half));
        for (std::int64_t y = std::max<std::int64_t>(0, y0); y <= std::min(h - 1, y1); ++y) {
            for (std::int64_t x = std::max<std::int64_t>(0, x0); x <= std::min(w - 1, x1);
                 ++x) {
                const double dy = (static_cast<double>(y) + 0.5) - cy;
                const double dx = (static_cast<double>(x) + 0.5) - cx;
                bool inside = false;
                switch (o.shape) {
                    case ShapeKind::circle:
                        inside = dy * dy + dx * dx <= half * half;
                        break;
                    case ShapeKind::square:
                        inside = std::fabs(dy) <= half && std::fabs(dx) <= half;
                        break;
                    case ShapeKind::triangle: {
                        // Apex at the top, base at the bottom of the box.
                        const double t = (dy + half) / (2.0 * half);  // 0 apex .. 1 base
                        inside = dy >= -half && dy <= half && std::fabs(dx) <= t * half;
                        break;
                    }
                }
                if (inside) {
                    for (int cidx = 0; cidx < 3; ++cidx) {
                        img.pixels[static_cast<std::size_t>(cidx * h * w + y * w + x)] =
                            rgb[cidx];
                    }
                }
            }
        }
    }
    return img;
}

std::string caption_of(const Scene& scene) {
    scene.validate();
    if (scene.empty()) return "an empty canvas";
    std::ostringstream os;
    bool first = true;
    for (const auto& o : scene.row_major()) {
        if (!first) os << " , ";
        first = false;
        os << "a " << color_name(o.color) << " " << shape_name(o.shape) << " at row "
           << number_word(o.r + 1) << " column " << number_word(o.c + 1);
    }
    return os.str();
}

Scene parse_caption(const std::string& caption) {
    Scene scene;
    if (caption == "an empty canvas") return scene;
    std::istringstream in(caption);
    std::vector<std::string> words;
    std::string w;
    while (in >> w) words.push_back(w);
    // Grammar: a COLOR SHAPE at row NUM column NUM ( , ... )*
    std::size_t i = 0;
    while (i < words.size()) {
        if (words[i] == ",") {
            ++i;
            continue;
        }
        if (i + 7 > words.size() || words[i] != "a" || words[i + 3] != "at" ||
            words[i + 4] != "row" || words[i + 6] != "column") {
            throw ConfigError("parse_caption: malformed caption '" + caption + "'");
        }
        SceneObject o;
        o.color = color_from_name(words[i + 1]);
        o.shape = shape_from_name(words[i + 2]);
        o.r = number_from_word(words[i + 5]) - 1;
        if (i + 7 >= words.size()) {
            throw ConfigError("parse_caption: truncated caption");
        }
        o.c = number_from_word(words[i + 7]) - 1;
        scene.objects.push_back(o);
        i += 8;
    }
    scene.validate();
    return scene;
}

std::pair<std::string, std::string> qa_of(const Scene& scene, std::uint64_t seed) {
    scene.validate();
    if (scene.empty()) {
        throw ConfigError("qa_of: cannot generate a question for an empty scene");
    }
    Rng rng(seed ^ 0xABCD1234FEED5678ULL);
    const auto objs = scene.row_major();

    // Shapes occurring exactly once are unambiguous query targets.
    int shape_counts[kNumShapes] = {0, 0, 0};
    for (const auto& o : objs) shape_counts[static_cast<int>(o.shape)]++;
    std::vector<ShapeKind> unique_shapes;
    for (int s = 0; s < kNumShapes; ++s) {
        if (shape_counts[s] == 1) unique_shapes.push_back(static_cast<ShapeKind>(s));
    }

    for (int attempt = 0; attempt < 8; ++attempt) {
        const std::uint64_t kind = rng.uniform_int(3);
        if (kind == 0 && !unique_shapes.empty()) {
            const ShapeKind s = unique_shapes[rng.uniform_int(unique_shapes.size())];
            for (const auto& o : objs) {
                if (o.shape == s) {
                    return {std::string("what color is the ") + shape_name(s) + " ?",
                            color_name(o.color)};
                }
            }
        } else if (kind == 1) {
            // Count question; half the draws are unconstrained so absent
            // colors (answer "zero") stay well represented.
            int color;
            if (rng.uniform_int(2) == 0) {
                color = static_cast<int>(rng.uniform_int(kNumColors));
            } else {
                color = objs[rng.uniform_int(objs.size())].color;
            }
            int count = 0;
            for (const auto& o : objs) {
                if (o.color == color) ++count;
            }
            return {std::string("how many ") + color_name(color) + " shapes are there ?",
                    number_word(count)};
        } else if (kind == 2 && unique_shapes.size() >= 2) {
            const std::size_t a = rng.uniform_int(unique_shapes.size());
            std::size_t b = rng.uniform_int(unique_shapes.size() - 1);
            if (b >= a) ++b;
            const SceneObject *oa = nullptr, *ob = nullptr;
            for (const auto& o : objs) {
                if (o.shape == unique_shapes[a]) oa = &o;
                if (o.shape == unique_shapes[b]) ob = &o;
            }
            return {std::string("is the ") + color_name(oa->color) + " " +
                        shape_name(oa->shape) + " left of the " + color_name(ob->color) +
                        " " + shape_name(ob->shape) + " ?",
                    oa->c < ob->c ? "yes" : "no"};
        }
    }
    // Count questions are always well-posed.
    const int color = objs[0].color;
    int count = 0;
    for (const auto& o : objs) {
        if (o.color == color) ++count;
    }
    return {std::string("how many ") + color_name(color) + " shapes are there ?",
            number_word(count)};
}

std::string text_only_sentence(std::uint64_t seed) {
    Rng rng(seed ^ 0x5511AA77CC33EE00ULL);
    const std::uint64_t op = rng.uniform_int(3);
    int a, b, result;
    std::string opw;
    if (op == 0) {
        a = static_cast<int>(rng.uniform_int(11));
        b = static_cast<int>(rng.uniform_int(11));
        result = a + b;
        opw = "plus";
    } else if (op == 1) {
        a = static_cast<int>(rng.uniform_int(11));
        b = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(a) + 1));
        result = a - b;
        opw = "minus";
    } else {
        a = static_cast<int>(rng.uniform_int(5));
        b = static_cast<int>(rng.uniform_int(5));
        result = a * b;
        opw = "times";
    }
    return number_word(a) + " " + opw + " " + number_word(b) + " equals " +
           number_word(result);
}

std::string sample_kind_to_string(SampleKind k) {
    switch (k) {
        case SampleKind::caption: return "caption";
        case SampleKind::qa: return "qa";
        case SampleKind::instruction: return "instruction";
        case SampleKind::text_only: return "text_only";
        case SampleKind::web: return "web";
    }
    throw ConfigError("invalid sample kind");
}

SampleKind sample_kind_from_string(const std::string& s) {
    if (s == "caption") return SampleKind::caption;
    if (s == "qa") return SampleKind::qa;
    if (s == "instruction") return SampleKind::instruction;
    if (s == "text_only") return SampleKind::text_only;
    if (s == "web") return SampleKind::web;
    throw ConfigError("unknown sample kind '" + s + "'");
}

namespace {

// Web-style stand-in: terser, unsorted caption text over the same scene.
std::string web_caption_of(const Scene& scene, Rng& rng) {
    if (scene.empty()) return "empty canvas";
    std::vector<SceneObject> objs = scene.objects;
    for (std::size_t i = objs.size(); i > 1; --i) {
        std::swap(objs[i - 1], objs[rng.uniform_int(i)]);
    }
    std::ostringstream os;
    bool first = true;
    for (const auto& o : objs) {
        if (!first) os << " and ";
        first = false;
        os << color_name(o.color) << " " << shape_name(o.shape) << " row "
           << number_word(o.r + 1) << " column " << number_word(o.c + 1);
    }
    return os.str();
}

Sample make_sample(SampleKind kind, std::uint64_t seed, const CorpusOptions& opt,
                   std::int64_t index) {
    Rng rng(seed);
    Sample s;
    s.kind = kind;
    if (kind == SampleKind::text_only) {
        s.target = text_only_sentence(rng.next_u64());
        return s;
    }
    s.scene = random_scene(rng, opt.max_objects);
    s.canvas_h = opt.canvas;
    s.canvas_w = opt.canvas;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "images/%08lld.ppm", static_cast<long long>(index));
    s.image_path = buf;
    switch (kind) {
        case SampleKind::caption:
            s.target = caption_of(s.scene);
            break;
        case SampleKind::web:
            s.target = web_caption_of(s.scene, rng);
            break;
        case SampleKind::qa: {
            auto [q, a] = qa_of(s.scene, rng.next_u64());
            s.prompt = q;
            s.target = a;
            break;
        }
        case SampleKind::instruction: {
            if (rng.uniform_int(2) == 0) {
                s.prompt = "please describe the image";
                s.target = caption_of(s.scene);
            } else {
                auto [q, a] = qa_of(s.scene, rng.next_u64());
                s.prompt = "answer the question : " + q;
                s.target = a;
            }
            break;
        }
        default:
            break;
    }
    return s;
}

}  // namespace

Corpus generate_corpus(const CorpusOptions& opt) {
    if (opt.n < 0) throw ConfigError("generate_corpus: n must be >= 0");
    if (opt.canvas % 32 != 0 || opt.canvas < 32) {
        throw ConfigError("generate_corpus: canvas must be a positive multiple of 32");
    }
    Rng master(opt.seed);
    Corpus corpus;
    corpus.samples.reserve(static_cast<std::size_t>(opt.n));
    for (std::int64_t i = 0; i < opt.n; ++i) {
        Rng rng = master.fork(static_cast<std::uint64_t>(i));
        SampleKind kind;
        if (opt.kind == "all") {
            const double u = rng.uniform();
            if (u < 0.35) {
                kind = SampleKind::caption;
            } else if (u < 0.65) {
                kind = SampleKind::qa;
            } else if (u < 0.80) {
                kind = SampleKind::instruction;
            } else if (u < 0.92) {
                kind = SampleKind::text_only;
            } else {
                kind = SampleKind::web;
            }
        } else {
            kind = sample_kind_from_string(opt.kind);
        }
        corpus.samples.push_back(make_sample(kind, rng.next_u64(), opt, i));
    }
    return corpus;
}

void write_corpus(const Corpus& corpus, const std::string& dir) {
    std::error_code ec;
    fs::create_directories(fs::path(dir) / "images", ec);
    if (ec) throw IoError("write_corpus: cannot create " + dir + ": " + ec.message());
    std::ofstream out(fs::path(dir) / "corpus.jsonl");
    if (!out) throw IoError("write_corpus: cannot open corpus.jsonl under " + dir);
    for (const auto& s : corpus.samples) {
        json j;
        j["kind"] = sample_kind_to_string(s.kind);
        j["prompt"] = s.prompt;
        j["target"] = s.target;
        if (s.kind != SampleKind::text_only) {
            j["image"] = s.image_path;
            j["canvas"] = {s.canvas_h, s.canvas_w};
            json objs = json::array();
            for (const auto& o : s.scene.objects) {
                objs.push_back({{"shape", shape_name(o.shape)},
                                {"color", color_name(o.color)},
                                {"r", o.r},
                                {"c", o.c}});
            }
            j["scene"] = objs;
            save_ppm(render(s.scene, s.canvas_h, s.canvas_w),
                     (fs::path(dir) / s.image_path).string());
        }
        out << j.dump() << "\n";
    }
    if (!out) throw IoError("write_corpus: short write under " + dir);
}

Corpus read_corpus(const std::string& dir) {
    std::ifstream in(fs::path(dir) / "corpus.jsonl");
    if (!in) throw IoError("read_corpus: cannot open corpus.jsonl under " + dir);
    Corpus corpus;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw IoError(std::string("read_corpus: bad JSONL line: ") + e.what());
        }
        Sample s;
        s.kind = sample_kind_from_string(j.at("kind").get<std::string>());
        s.prompt = j.value("prompt", "");
        s.target = j.at("target").get<std::string>();
        if (s.kind != SampleKind::text_only) {
            s.image_path = j.at("image").get<std::string>();
            s.canvas_h = j.at("canvas")[0].get<std::int64_t>();
            s.canvas_w = j.at("canvas")[1].get<std::int64_t>();
            for (const auto& jo : j.at("scene")) {
                SceneObject o;
                o.shape = shape_from_name(jo.at("shape").get<std::string>());
                o.color = color_from_name(jo.at("color").get<std::string>());
                o.r = jo.at("r").get<int>();
                o.c = jo.at("c").get<int>();
                s.scene.objects.push_back(o);
            }
        }
        corpus.samples.push_back(std::move(s));
    }
    return corpus;
}

}  // namespace dacvlm
