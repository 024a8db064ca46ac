#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dacvlm/tensor.hpp"

namespace dacvlm {

enum class Modality : int { vision = 0, text = 1 };

// Planar RGB image, channels-first, values in [0,1].
struct ImageInput {
    std::int64_t h = 0;
    std::int64_t w = 0;
    std::vector<double> pixels;  // [3, h, w]

    static ImageInput white(std::int64_t h, std::int64_t w);
};

ImageInput load_ppm(const std::string& path);
void save_ppm(const ImageInput& img, const std::string& path);

enum class ResolutionMode { AnyRatioMaxL, AnyRatioLD, AnyRatioHD, AnyResolution };

ResolutionMode resolution_mode_from_string(const std::string& name);

struct ResolutionLimits {
    std::int64_t max_edge = 800;             // AnyRatio_maxL
    std::int64_t ld_area = 800 * 800;        // AnyRatio_LD
    std::int64_t hd_area = 1600 * 1600;      // AnyRatio_HD
    std::int64_t max_pixels = 1600 * 1600;   // AnyResolution ceiling (2500 patch tokens)
};

// Maps source dims onto multiples of 32 under the selected policy. Always
// succeeds; idempotent on its own output.
std::pair<std::int64_t, std::int64_t> resolve_resolution(std::int64_t h, std::int64_t w,
                                                         ResolutionMode mode,
                                                         const ResolutionLimits& limits = {});

ImageInput resize_bilinear(const ImageInput& img, std::int64_t h, std::int64_t w);

// Eq-1 style two-conv tokenizer: stride-16 conv, GELU, stride-2 conv, plus
// learnable image-start and row-break embeddings.
struct PatchEmbedParams {
    TensorPtr conv1;  // [d1, 3, 16, 16]
    TensorPtr conv2;  // [d, d1, 2, 2]
    TensorPtr cls;    // [d]
    TensorPtr spl;    // [d]

    std::int64_t hidden_dim() const { return conv1->shape[0]; }
    std::int64_t out_dim() const { return conv2->shape[0]; }

    static PatchEmbedParams init(std::int64_t d1, std::int64_t d, Rng& rng);
};

enum class VisRole : std::uint8_t { none = 0, cls, patch, spl };

struct TokenEntry {
    Modality tag = Modality::text;
    VisRole role = VisRole::none;
    std::int64_t text_id = -1;   // valid for text positions
    bool loss_masked = true;     // true: excluded from the CE loss
};

// Interleaved multimodal sequence. Vision positions index rows of
// vision_embeds in order of appearance.
struct TokenSequence {
    std::vector<TokenEntry> entries;
    TensorPtr vision_embeds;  // [n_vision, d]; null for pure text
    std::int64_t grid_h = 0;
    std::int64_t grid_w = 0;

    std::int64_t length() const { return static_cast<std::int64_t>(entries.size()); }
    std::int64_t vision_count() const;
    std::vector<Modality> modality_ids() const;

    // Recovers (grid_h, grid_w) from the CLS/patch/SPL layout alone.
    std::pair<std::int64_t, std::int64_t> decode_layout() const;
};

// [CLS] p p .. p [SPL] p .. p [SPL] ... ; dims must be multiples of 32.
TokenSequence embed_image(const ImageInput& img, const PatchEmbedParams& params);

// Image segment first, then text; text positions carry the CE loss except
// padding. Throws on context overflow.
TokenSequence concat_multimodal(const TokenSequence& img_seq,
                                const std::vector<std::int64_t>& text_ids,
                                std::int64_t context_limit,
                                const std::vector<std::uint8_t>* text_loss_mask = nullptr);

}  // namespace dacvlm
