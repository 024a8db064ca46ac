#include "dacvlm/model.hpp"

#include <algorithm>
#include <json.hpp>

#include "dacvlm/tokenizer.hpp"

namespace dacvlm {

using nlohmann::json;

void ModelConfig::validate() const {
    if (layers <= 0 || d <= 0 || d_ff <= 0 || n_heads <= 0 || vocab <= 0 || context <= 0 ||
        patch_hidden <= 0) {
        throw ConfigError("model config: all dimensions must be positive");
    }
    if (d % n_heads != 0) {
        throw ConfigError("model config: d=" + std::to_string(d) +
                          " not divisible by n_heads=" + std::to_string(n_heads));
    }
    if (ln_eps <= 0.0) {
        throw ConfigError("model config: ln_eps must be positive");
    }
}

std::string ModelConfig::to_json_string() const {
    json j;
    j["layers"] = layers;
    j["d"] = d;
    j["d_ff"] = d_ff;
    j["n_heads"] = n_heads;
    j["vocab"] = vocab;
    j["context"] = context;
    j["variant"] = variant_to_string(variant);
    j["patch_hidden"] = patch_hidden;
    j["ln_eps"] = ln_eps;
    return j.dump();
}

ModelConfig ModelConfig::from_json_string(const std::string& s) {
    json j;
    try {
        j = json::parse(s);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("model config: invalid JSON: ") + e.what());
    }
    ModelConfig cfg;
    try {
        cfg.layers = j.at("layers").get<std::int64_t>();
        cfg.d = j.at("d").get<std::int64_t>();
        cfg.d_ff = j.at("d_ff").get<std::int64_t>();
        cfg.n_heads = j.at("n_heads").get<std::int64_t>();
        cfg.vocab = j.at("vocab").get<std::int64_t>();
        cfg.context = j.at("context").get<std::int64_t>();
        cfg.variant = variant_from_string(j.at("variant").get<std::string>());
        cfg.patch_hidden = j.at("patch_hidden").get<std::int64_t>();
        cfg.ln_eps = j.at("ln_eps").get<double>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("model config: missing field: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

Model Model::init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    Model m;
    m.config = cfg;
    m.provenance.seed = seed;
    m.patch = PatchEmbedParams::init(cfg.patch_hidden, cfg.d, rng);
    m.word_embed = Tensor::randn({cfg.vocab, cfg.d}, rng, 0.02, true);
    m.blocks.reserve(static_cast<std::size_t>(cfg.layers));
    for (std::int64_t l = 0; l < cfg.layers; ++l) {
        auto bp = build_variant(cfg.variant, cfg.d, cfg.d_ff, cfg.n_heads, rng.next_u64());
        bp.ln_eps = cfg.ln_eps;
        m.blocks.push_back(std::move(bp));
    }
    m.final_ln_gain = Tensor::full({cfg.d}, 1.0, true);
    m.final_ln_bias = Tensor::zeros({cfg.d}, true);
    return m;
}

std::vector<std::pair<std::string, TensorPtr>> Model::named_params() const {
    std::vector<std::pair<std::string, TensorPtr>> out;
    out.emplace_back("patch_embed.conv1", patch.conv1);
    out.emplace_back("patch_embed.conv2", patch.conv2);
    out.emplace_back("patch_embed.cls", patch.cls);
    out.emplace_back("patch_embed.spl", patch.spl);
    out.emplace_back("word_embed", word_embed);
    for (std::size_t l = 0; l < blocks.size(); ++l) {
        for (auto& [suffix, t] : blocks[l].named_tensors()) {
            out.emplace_back("layers." + std::to_string(l) + "." + suffix, t);
        }
    }
    out.emplace_back("final_ln.gain", final_ln_gain);
    out.emplace_back("final_ln.bias", final_ln_bias);
    return out;
}

std::string Model::group_of(const std::string& name) {
    if (name.rfind("patch_embed.", 0) == 0) return "patch_embed";
    if (name == "word_embed") return "word_embed";
    auto ends_with = [&](const char* s) {
        const std::size_t n = std::string(s).size();
        return name.size() >= n && name.compare(name.size() - n, n, s) == 0;
    };
    if (ends_with(".v") || ends_with(".delta")) return "vision_layers";
    return "text_layers";
}

std::int64_t Model::param_total() const {
    std::int64_t total = 0;
    for (auto& [name, t] : named_params()) total += t->size();
    return total;
}

TensorPtr Model::forward(const TokenSequence& seq, std::vector<LayerKVCache>* capture) const {
    const std::int64_t n = seq.length();
    if (n == 0) throw DimensionError("forward: empty sequence");
    if (n > config.context) {
        throw DimensionError("forward: length " + std::to_string(n) + " exceeds context " +
                             std::to_string(config.context));
    }
    std::vector<std::int64_t> vis_pos, text_pos, text_ids;
    for (std::int64_t i = 0; i < n; ++i) {
        const auto& e = seq.entries[static_cast<std::size_t>(i)];
        if (e.tag == Modality::vision) {
            vis_pos.push_back(i);
        } else {
            text_pos.push_back(i);
            text_ids.push_back(e.text_id);
        }
    }
    std::vector<TensorPtr> groups;
    std::vector<std::vector<std::int64_t>> rows;
    if (!vis_pos.empty()) {
        if (!seq.vision_embeds ||
            seq.vision_embeds->shape[0] != static_cast<std::int64_t>(vis_pos.size())) {
            throw DimensionError("forward: vision embeddings do not match vision positions");
        }
        groups.push_back(seq.vision_embeds);
        rows.push_back(vis_pos);
    }
    if (!text_pos.empty()) {
        groups.push_back(embedding_rows(word_embed, text_ids));
        rows.push_back(text_pos);
    }
    auto x = row_scatter_merge(groups, rows, n);

    const auto ids = seq.modality_ids();
    if (capture) capture->assign(static_cast<std::size_t>(config.layers), LayerKVCache{});
    for (std::size_t l = 0; l < blocks.size(); ++l) {
        x = block_forward(x, ids, blocks[l], capture ? &(*capture)[l] : nullptr);
    }
    auto normed = layer_norm(x, final_ln_gain, final_ln_bias, config.ln_eps);
    return matmul_nt(normed, word_embed);
}

namespace {

std::int64_t argmax_row(const double* row, std::int64_t v) {
    std::int64_t best = 0;
    for (std::int64_t j = 1; j < v; ++j) {
        if (row[j] > row[best]) best = j;
    }
    return best;
}

}  // namespace

std::vector<std::int64_t> Model::generate(const TokenSequence& seq, std::int64_t max_new,
                                          bool use_cache) const {
    if (max_new < 1) throw UsageError("generate: max_new must be >= 1");
    NoGradGuard ng;
    std::vector<std::int64_t> out;

    if (use_cache) {
        std::vector<LayerKVCache> caches;
        auto logits = forward(seq, &caches);
        const std::int64_t v = config.vocab;
        std::int64_t tok = argmax_row(logits->data.data() + (seq.length() - 1) * v, v);
        std::int64_t pos = seq.length();
        out.push_back(tok);
        while (tok != Tokenizer::eos_id &&
               static_cast<std::int64_t>(out.size()) < max_new) {
            if (pos + 1 > config.context) {
                throw DimensionError("generate: context overflow at position " +
                                     std::to_string(pos));
            }
            auto x = embedding_rows(word_embed, {tok});
            for (std::size_t l = 0; l < blocks.size(); ++l) {
                x = block_decode_row(x, Modality::text, pos, blocks[l], caches[l]);
            }
            auto normed = layer_norm(x, final_ln_gain, final_ln_bias, config.ln_eps);
            auto row = matmul_nt(normed, word_embed);
            tok = argmax_row(row->data.data(), v);
            out.push_back(tok);
            ++pos;
        }
        return out;
    }

    // Recompute path: full forward over the growing sequence each step.
    TokenSequence cur = seq;
    while (static_cast<std::int64_t>(out.size()) < max_new) {
        if (cur.length() + 1 > config.context) {
            throw DimensionError("generate: context overflow at position " +
                                 std::to_string(cur.length()));
        }
        auto logits = forward(cur);
        const std::int64_t v = config.vocab;
        const std::int64_t tok =
            argmax_row(logits->data.data() + (cur.length() - 1) * v, v);
        out.push_back(tok);
        if (tok == Tokenizer::eos_id) break;
        cur.entries.push_back({Modality::text, VisRole::none, tok, true});
    }
    return out;
}

Model init_vlm_from_base(const Model& base, VariantKind variant, std::uint64_t patch_seed) {
    if (base.config.variant != VariantKind::dense) {
        throw ConfigError("init_vlm_from_base: base model must be the dense variant");
    }
    ModelConfig cfg = base.config;
    cfg.variant = variant;
    Model m = Model::init(cfg, patch_seed);
    m.provenance.stage = "vlm_init[" + base.provenance.stage + "]";

    m.word_embed->data = base.word_embed->data;
    m.final_ln_gain->data = base.final_ln_gain->data;
    m.final_ln_bias->data = base.final_ln_bias->data;
    for (std::size_t l = 0; l < m.blocks.size(); ++l) {
        const auto& src = base.blocks[l];
        auto& dst = m.blocks[l];
        auto copy_both = [](TensorPtr dst2[2], const TensorPtr src2[2]) {
            dst2[0]->data = src2[0]->data;
            if (dst2[1] != dst2[0]) dst2[1]->data = src2[0]->data;
        };
        copy_both(dst.wq, src.wq);
        copy_both(dst.wk, src.wk);
        copy_both(dst.wv, src.wv);
        copy_both(dst.wo, src.wo);
        copy_both(dst.ln1_gain, src.ln1_gain);
        copy_both(dst.ln1_bias, src.ln1_bias);
        copy_both(dst.ln2_gain, src.ln2_gain);
        copy_both(dst.ln2_bias, src.ln2_bias);
        copy_both(dst.ffn_w1, src.ffn_w1);
        copy_both(dst.ffn_w2, src.ffn_w2);
        // rep deltas stay zero: forward equals the base until trained.
    }
    return m;
}

}  // namespace dacvlm
