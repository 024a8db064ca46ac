#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "dacvlm/block.hpp"
#include "dacvlm/patch_embed.hpp"
#include "dacvlm/tensor.hpp"

namespace dacvlm {

struct ModelConfig {
    std::int64_t layers = 4;
    std::int64_t d = 128;
    std::int64_t d_ff = 512;
    std::int64_t n_heads = 4;
    std::int64_t vocab = 512;
    std::int64_t context = 1024;
    VariantKind variant = VariantKind::dense;
    std::int64_t patch_hidden = 64;  // conv1 output channels (d1)
    double ln_eps = 1e-5;

    void validate() const;
    std::string to_json_string() const;
    static ModelConfig from_json_string(const std::string& s);
};

struct Provenance {
    std::string stage = "init";
    std::int64_t step = 0;
    std::uint64_t seed = 0;
    double heldout_ppl = std::numeric_limits<double>::quiet_NaN();
};

// Decoder-only VLM: patch embedding front end, L modality-routed blocks,
// shared final norm, output head weight-tied to the word embedding.
struct Model {
    ModelConfig config;
    PatchEmbedParams patch;
    TensorPtr word_embed;  // [V, d]; also the output head
    std::vector<BlockParams> blocks;
    TensorPtr final_ln_gain, final_ln_bias;
    Provenance provenance;

    static Model init(const ModelConfig& cfg, std::uint64_t seed);

    // Unique parameters under hierarchical names ("layers.3.attn.wq.v").
    std::vector<std::pair<std::string, TensorPtr>> named_params() const;

    // {patch_embed, vision_layers, text_layers, word_embed}
    static std::string group_of(const std::string& name);

    // Logits [n, V]; optionally fills per-layer KV caches for decoding.
    TensorPtr forward(const TokenSequence& seq,
                      std::vector<LayerKVCache>* capture = nullptr) const;

    // Greedy argmax continuation; stops at EOS or max_new tokens. The cached
    // and recompute paths produce identical tokens.
    std::vector<std::int64_t> generate(const TokenSequence& seq, std::int64_t max_new,
                                       bool use_cache = true) const;

    std::int64_t param_total() const;
};

// Text branch keeps the base weights; decoupled vision branches start as
// copies of them, the patch embedding is freshly initialized.
Model init_vlm_from_base(const Model& base, VariantKind variant,
                         std::uint64_t patch_seed = 17);

// Checkpoint file: u64-LE manifest length, UTF-8 JSON manifest, then raw
// little-endian f64 payloads concatenated in manifest order.
void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);
Model load_checkpoint(const std::string& path, VariantKind expected_variant);

}  // namespace dacvlm
