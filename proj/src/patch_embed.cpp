#include "dacvlm/patch_embed.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "dacvlm/tokenizer.hpp"

namespace dacvlm {

namespace {

constexpr std::int64_t kPatchPixels = 32;  // 16 * 2, the combined conv stride

std::int64_t round_to_grid(double v) {
    std::int64_t cells = static_cast<std::int64_t>(std::llround(v / 32.0));
    return std::max<std::int64_t>(1, cells) * 32;
}

}  // namespace

ImageInput ImageInput::white(std::int64_t h, std::int64_t w) {
    ImageInput img;
    img.h = h;
    img.w = w;
    img.pixels.assign(static_cast<std::size_t>(3 * h * w), 1.0);
    return img;
}

ImageInput load_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load_ppm: cannot open " + path);
    std::string magic;
    in >> magic;
    if (magic != "P6") throw IoError("load_ppm: " + path + " is not a binary PPM (P6)");
    auto next_int = [&in, &path]() {
        // Skip whitespace and '#' comment lines.
        int c = in.get();
        while (c != EOF && (std::isspace(c) || c == '#')) {
            if (c == '#') {
                while (c != EOF && c != '\n') c = in.get();
            }
            c = in.get();
        }
        std::int64_t v = 0;
        bool any = false;
        while (c != EOF && std::isdigit(c)) {
            v = v * 10 + (c - '0');
            any = true;
            c = in.get();
        }
        if (!any) throw IoError("load_ppm: malformed header in " + path);
        return v;
    };
    const std::int64_t w = next_int();
    const std::int64_t h = next_int();
    const std::int64_t maxval = next_int();
    if (maxval != 255) throw IoError("load_ppm: only maxval 255 supported");
    std::vector<unsigned char> raw(static_cast<std::size_t>(3 * h * w));
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (in.gcount() != static_cast<std::streamsize>(raw.size())) {
        throw IoError("load_ppm: truncated pixel data in " + path);
    }
    ImageInput img;
    img.h = h;
    img.w = w;
    img.pixels.resize(static_cast<std::size_t>(3 * h * w));
    for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) {
                img.pixels[static_cast<std::size_t>(c * h * w + y * w + x)] =
                    raw[static_cast<std::size_t>((y * w + x) * 3 + c)] / 255.0;
            }
        }
    }
    return img;
}

void save_ppm(const ImageInput& img, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("save_ppm: cannot open " + path + " for writing");
    out << "P6\n" << img.w << " " << img.h << "\n255\n";
    std::vector<unsigned char> raw(static_cast<std::size_t>(3 * img.h * img.w));
    for (std::int64_t y = 0; y < img.h; ++y) {
        for (std::int64_t x = 0; x < img.w; ++x) {
            for (int c = 0; c < 3; ++c) {
                double v = img.pixels[static_cast<std::size_t>(c * img.h * img.w + y * img.w + x)];
                v = std::clamp(v, 0.0, 1.0);
                raw[static_cast<std::size_t>((y * img.w + x) * 3 + c)] =
                    static_cast<unsigned char>(std::lround(v * 255.0));
            }
        }
    }
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!out) throw IoError("save_ppm: short write to " + path);
}

ResolutionMode resolution_mode_from_string(const std::string& name) {
    if (name == "AnyRatio_maxL") return ResolutionMode::AnyRatioMaxL;
    if (name == "AnyRatio_LD") return ResolutionMode::AnyRatioLD;
    if (name == "AnyRatio_HD") return ResolutionMode::AnyRatioHD;
    if (name == "AnyResolution") return ResolutionMode::AnyResolution;
    throw ConfigError("unknown resolution mode '" + name + "'");
}

std::pair<std::int64_t, std::int64_t> resolve_resolution(std::int64_t h, std::int64_t w,
                                                         ResolutionMode mode,
                                                         const ResolutionLimits& limits) {
    h = std::max<std::int64_t>(h, kPatchPixels);
    w = std::max<std::int64_t>(w, kPatchPixels);
    double scale = 1.0;
    std::int64_t area_cap = 0;
    switch (mode) {
        case ResolutionMode::AnyRatioMaxL:
            scale = static_cast<double>(limits.max_edge) / static_cast<double>(std::max(h, w));
            break;
        case ResolutionMode::AnyRatioLD:
            area_cap = limits.ld_area;
            break;
        case ResolutionMode::AnyRatioHD:
            area_cap = limits.hd_area;
            break;
        case ResolutionMode::AnyResolution:
            area_cap = limits.max_pixels;
            break;
    }
    if (area_cap > 0 && h * w > area_cap) {
        scale = std::sqrt(static_cast<double>(area_cap) / static_cast<double>(h * w));
    }
    std::int64_t rh = round_to_grid(scale * static_cast<double>(h));
    std::int64_t rw = round_to_grid(scale * static_cast<double>(w));
    // Rounding may overshoot the cap by a fraction of one grid cell; trim.
    if (area_cap > 0) {
        while (rh * rw > area_cap) {
            if (rh >= rw && rh > kPatchPixels) {
                rh -= kPatchPixels;
            } else if (rw > kPatchPixels) {
                rw -= kPatchPixels;
            } else {
                break;
            }
        }
    }
    return {rh, rw};
}

ImageInput resize_bilinear(const ImageInput& img, std::int64_t h, std::int64_t w) {
    if (img.h == h && img.w == w) return img;
    ImageInput out;
    out.h = h;
    out.w = w;
    out.pixels.resize(static_cast<std::size_t>(3 * h * w));
    const double sy = static_cast<double>(img.h) / static_cast<double>(h);
    const double sx = static_cast<double>(img.w) / static_cast<double>(w);
    for (int c = 0; c < 3; ++c) {
        const double* src = img.pixels.data() + c * img.h * img.w;
        double* dst = out.pixels.data() + c * h * w;
        for (std::int64_t y = 0; y < h; ++y) {
            const double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
            const std::int64_t y0 = std::clamp<std::int64_t>(
                static_cast<std::int64_t>(std::floor(fy)), 0, img.h - 1);
            const std::int64_t y1 = std::min(y0 + 1, img.h - 1);
            const double wy = std::clamp(fy - static_cast<double>(y0), 0.0, 1.0);
            for (std::int64_t x = 0; x < w; ++x) {
                const double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
                const std::int64_t x0 = std::clamp<std::int64_t>(
                    static_cast<std::int64_t>(std::floor(fx)), 0, img.w - 1);
                const std::int64_t x1 = std::min(x0 + 1, img.w - 1);
                const double wx = std::clamp(fx - static_cast<double>(x0), 0.0, 1.0);
                const double top = src[y0 * img.w + x0] * (1 - wx) + src[y0 * img.w + x1] * wx;
                const double bot = src[y1 * img.w + x0] * (1 - wx) + src[y1 * img.w + x1] * wx;
                dst[y * w + x] = top * (1 - wy) + bot * wy;
            }
        }
    }
    return out;
}

PatchEmbedParams PatchEmbedParams::init(std::int64_t d1, std::int64_t d, Rng& rng) {
    PatchEmbedParams p;
    const double s1 = 1.0 / std::sqrt(3.0 * 16 * 16);
    const double s2 = 1.0 / std::sqrt(static_cast<double>(d1) * 2 * 2);
    p.conv1 = Tensor::randn({d1, 3, 16, 16}, rng, s1, true);
    p.conv2 = Tensor::randn({d, d1, 2, 2}, rng, s2, true);
    p.cls = Tensor::randn({d}, rng, 0.02, true);
    p.spl = Tensor::randn({d}, rng, 0.02, true);
    return p;
}

std::int64_t TokenSequence::vision_count() const {
    std::int64_t n = 0;
    for (const auto& e : entries) {
        if (e.tag == Modality::vision) ++n;
    }
    return n;
}

std::vector<Modality> TokenSequence::modality_ids() const {
    std::vector<Modality> ids;
    ids.reserve(entries.size());
    for (const auto& e : entries) ids.push_back(e.tag);
    return ids;
}

std::pair<std::int64_t, std::int64_t> TokenSequence::decode_layout() const {
    std::int64_t spl_count = 0;
    std::int64_t first_run = 0;
    bool counting = false;
    bool done_first = false;
    for (const auto& e : entries) {
        if (e.role == VisRole::cls) {
            counting = true;
            continue;
        }
        if (e.role == VisRole::patch && counting && !done_first) ++first_run;
        if (e.role == VisRole::spl) {
            ++spl_count;
            done_first = true;
        }
    }
    return {spl_count, first_run};
}

TokenSequence embed_image(const ImageInput& img, const PatchEmbedParams& params) {
    if (img.h % kPatchPixels != 0 || img.w % kPatchPixels != 0) {
        throw DimensionError("embed_image: dims " + std::to_string(img.h) + "x" +
                             std::to_string(img.w) + " are not multiples of 32; run " +
                             "resolve_resolution first");
    }
    auto x = Tensor::from_data({3, img.h, img.w}, img.pixels);
    auto f1 = gelu(conv2d(x, params.conv1, 16));
    auto f2 = conv2d(f1, params.conv2, 2);  // [d, h', w']
    const std::int64_t gh = f2->shape[1];
    const std::int64_t gw = f2->shape[2];
    auto patches = chw_to_hwc(f2);  // [h'*w', d]

    std::vector<TensorPtr> parts;
    parts.reserve(static_cast<std::size_t>(1 + 2 * gh));
    parts.push_back(params.cls);
    TokenSequence seq;
    seq.grid_h = gh;
    seq.grid_w = gw;
    seq.entries.push_back({Modality::vision, VisRole::cls, -1, true});
    for (std::int64_t r = 0; r < gh; ++r) {
        std::vector<std::int64_t> rows(static_cast<std::size_t>(gw));
        for (std::int64_t c = 0; c < gw; ++c) rows[static_cast<std::size_t>(c)] = r * gw + c;
        parts.push_back(row_gather(patches, rows));
        for (std::int64_t c = 0; c < gw; ++c) {
            seq.entries.push_back({Modality::vision, VisRole::patch, -1, true});
        }
        parts.push_back(params.spl);
        seq.entries.push_back({Modality::vision, VisRole::spl, -1, true});
    }
    seq.vision_embeds = concat_rows(parts);
    return seq;
}

TokenSequence concat_multimodal(const TokenSequence& img_seq,
                                const std::vector<std::int64_t>& text_ids,
                                std::int64_t context_limit,
                                const std::vector<std::uint8_t>* text_loss_mask) {
    const std::int64_t total =
        img_seq.length() + static_cast<std::int64_t>(text_ids.size());
    if (total > context_limit) {
        throw DimensionError("concat_multimodal: sequence length " + std::to_string(total) +
                             " exceeds context limit " + std::to_string(context_limit));
    }
    if (text_loss_mask &&
        text_loss_mask->size() != text_ids.size()) {
        throw DimensionError("concat_multimodal: loss mask length mismatch");
    }
    TokenSequence out = img_seq;
    for (std::size_t i = 0; i < text_ids.size(); ++i) {
        const std::int64_t id = text_ids[i];
        bool in_loss = id != Tokenizer::pad_id;
        if (text_loss_mask) in_loss = (*text_loss_mask)[i] != 0;
        out.entries.push_back({Modality::text, VisRole::none, id, !in_loss});
    }
    return out;
}

}  // namespace dacvlm
