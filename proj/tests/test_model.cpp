#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "dacvlm/model.hpp"
#include "dacvlm/synth.hpp"
#include "dacvlm/tokenizer.hpp"

using namespace dacvlm;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config(VariantKind variant = VariantKind::dense) {
    ModelConfig cfg;
    cfg.layers = 2;
    cfg.d = 16;
    cfg.d_ff = 32;
    cfg.n_heads = 2;
    cfg.patch_hidden = 4;
    cfg.variant = variant;
    return cfg;
}

TokenSequence mixed_sequence(const Model& model, std::uint64_t seed, std::int64_t canvas,
                             std::int64_t text_len) {
    Rng rng(seed);
    const Scene scene = random_scene(rng);
    auto img_seq = embed_image(render(scene, canvas, canvas), model.patch);
    std::vector<std::int64_t> ids;
    ids.push_back(Tokenizer::bos_id);
    for (std::int64_t i = 1; i < text_len; ++i) {
        ids.push_back(3 + static_cast<std::int64_t>(rng.uniform_int(60)));
    }
    return concat_multimodal(img_seq, ids, model.config.context);
}

double max_abs_diff(const TensorPtr& a, const TensorPtr& b) {
    REQUIRE(a->data.size() == b->data.size());
    double m = 0.0;
    for (std::size_t i = 0; i < a->data.size(); ++i) {
        m = std::max(m, std::fabs(a->data[i] - b->data[i]));
    }
    return m;
}

}  // namespace

TEST_CASE("forward logits have shape n x V for a 651+20 mixed sequence") {
    const Model model = Model::init(tiny_config(), 1);
    auto img_seq = embed_image(ImageInput::white(800, 800), model.patch);
    std::vector<std::int64_t> text(20, 4);
    auto seq = concat_multimodal(img_seq, text, 1024);
    NoGradGuard ng;
    auto logits = model.forward(seq);
    CHECK(logits->shape == std::vector<std::int64_t>{671, 512});
}

TEST_CASE("forward is deterministic") {
    const Model model = Model::init(tiny_config(), 2);
    auto seq = mixed_sequence(model, 3, 64, 6);
    NoGradGuard ng;
    auto a = model.forward(seq);
    auto b = model.forward(seq);
    CHECK(a->data == b->data);
}

TEST_CASE("forward rejects out-of-vocabulary ids and overlong input") {
    const Model model = Model::init(tiny_config(), 4);
    auto seq = concat_multimodal(TokenSequence{}, {600}, 1024);
    NoGradGuard ng;
    CHECK_THROWS_AS(model.forward(seq), DimensionError);
    std::vector<std::int64_t> too_long(1025, 4);
    CHECK_THROWS_AS(concat_multimodal(TokenSequence{}, too_long, 1024), DimensionError);
}

TEST_CASE("init_vlm_from_base: every sparse variant matches the dense base to 1e-9") {
    const Model base = Model::init(tiny_config(), 11);
    for (VariantKind v : {VariantKind::rep, VariantKind::moe_ffn, VariantKind::ln_only,
                          VariantKind::dac}) {
        Model vlm = init_vlm_from_base(base, v, 17);
        // Same patch embedding so the vision inputs agree.
        vlm.patch.conv1->data = base.patch.conv1->data;
        vlm.patch.conv2->data = base.patch.conv2->data;
        vlm.patch.cls->data = base.patch.cls->data;
        vlm.patch.spl->data = base.patch.spl->data;
        NoGradGuard ng;
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
            auto seq_base = mixed_sequence(base, 100 + seed, 64, 8);
            auto seq_vlm = mixed_sequence(vlm, 100 + seed, 64, 8);
            CHECK(max_abs_diff(base.forward(seq_base), vlm.forward(seq_vlm)) <= 1e-9);
        }
    }
}

TEST_CASE("text-branch tensors are bitwise equal to the base after init") {
    const Model base = Model::init(tiny_config(), 21);
    const Model vlm = init_vlm_from_base(base, VariantKind::dac, 5);
    std::map<std::string, TensorPtr> base_map;
    for (const auto& [name, t] : base.named_params()) base_map[name] = t;
    for (const auto& [name, t] : vlm.named_params()) {
        if (name.size() > 2 && name.compare(name.size() - 2, 2, ".t") == 0) {
            const auto it = base_map.find(name.substr(0, name.size() - 2));
            REQUIRE(it != base_map.end());
            CHECK(t->data == it->second->data);
        }
    }
    CHECK(vlm.word_embed->data == base.word_embed->data);
}

TEST_CASE("branches equal at init diverge after one vision-gradient step") {
    const Model base = Model::init(tiny_config(), 22);
    Model vlm = init_vlm_from_base(base, VariantKind::dac, 6);
    auto& blk = vlm.blocks[0];
    CHECK(blk.wq[0]->data == blk.wq[1]->data);

    auto seq = mixed_sequence(vlm, 7, 64, 6);
    std::vector<std::int64_t> targets(seq.length(), 4);
    std::vector<std::uint8_t> mask(seq.length(), 0);
    mask[static_cast<std::size_t>(seq.length() - 2)] = 1;
    auto loss = cross_entropy(vlm.forward(seq), targets, mask);
    backward(loss);
    // Vision positions exist, so the vision branch took gradient; apply it.
    double vgrad = 0.0;
    for (double g : blk.wq[0]->grad) vgrad += std::fabs(g);
    CHECK(vgrad > 0.0);
    for (std::size_t i = 0; i < blk.wq[0]->data.size(); ++i) {
        blk.wq[0]->data[i] -= 0.1 * blk.wq[0]->grad[i];
    }
    CHECK(blk.wq[0]->data != blk.wq[1]->data);
}

TEST_CASE("group_of maps names to parameter groups") {
    CHECK(Model::group_of("patch_embed.conv1") == "patch_embed");
    CHECK(Model::group_of("word_embed") == "word_embed");
    CHECK(Model::group_of("layers.3.attn.wq.v") == "vision_layers");
    CHECK(Model::group_of("layers.0.ffn.w1.delta") == "vision_layers");
    CHECK(Model::group_of("layers.3.attn.wq.t") == "text_layers");
    CHECK(Model::group_of("layers.1.ffn.w2") == "text_layers");
    CHECK(Model::group_of("final_ln.gain") == "text_layers");
}

TEST_CASE("weight tying: word embedding accumulates gradient from both uses") {
    Model model = Model::init(tiny_config(), 31);
    auto seq = concat_multimodal(TokenSequence{}, {Tokenizer::bos_id, 4, 5}, 1024);
    std::vector<std::int64_t> targets = {4, 5, Tokenizer::eos_id};
    std::vector<std::uint8_t> mask = {1, 1, 1};
    auto loss = cross_entropy(model.forward(seq), targets, mask);
    backward(loss);
    // Both the embedding rows (4, 5) and head columns receive gradient.
    double total = 0.0;
    for (double g : model.word_embed->grad) total += std::fabs(g);
    CHECK(total > 0.0);
}

TEST_CASE("greedy generate: deterministic and cached == uncached") {
    const Model model = Model::init(tiny_config(), 41);
    auto seq = mixed_sequence(model, 42, 64, 4);
    const auto a = model.generate(seq, 12, true);
    const auto b = model.generate(seq, 12, true);
    const auto c = model.generate(seq, 12, false);
    CHECK(a == b);
    CHECK(a == c);
    CHECK(!a.empty());
    CHECK(a.size() <= 12);
}

TEST_CASE("generate validates max_new and context") {
    const Model model = Model::init(tiny_config(), 43);
    auto seq = concat_multimodal(TokenSequence{}, {4}, 1024);
    CHECK_THROWS_AS(model.generate(seq, 0), UsageError);
}

TEST_CASE("checkpoint round-trip is bitwise lossless") {
    const Model model = Model::init(tiny_config(VariantKind::dac), 51);
    const std::string path = (fs::temp_directory_path() / "dacvlm_ckpt_test.ckpt").string();
    save_checkpoint(model, path);
    const Model back = load_checkpoint(path);
    const auto a = model.named_params();
    const auto b = back.named_params();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].first == b[i].first);
        CHECK(a[i].second->data == b[i].second->data);
    }
    // Same forward, bitwise.
    auto seq = mixed_sequence(model, 52, 64, 5);
    NoGradGuard ng;
    CHECK(model.forward(seq)->data == back.forward(seq)->data);
    fs::remove(path);
}

TEST_CASE("truncated checkpoint payload raises an integrity error") {
    const Model model = Model::init(tiny_config(), 53);
    const std::string path = (fs::temp_directory_path() / "dacvlm_ckpt_trunc.ckpt").string();
    save_checkpoint(model, path);
    const auto size = fs::file_size(path);
    fs::resize_file(path, size - 64);
    CHECK_THROWS_AS(load_checkpoint(path), IoError);
    fs::remove(path);
}

TEST_CASE("variant-checked load rejects a kind mismatch") {
    const Model dense = Model::init(tiny_config(), 54);
    const std::string path = (fs::temp_directory_path() / "dacvlm_ckpt_kind.ckpt").string();
    save_checkpoint(dense, path);
    CHECK_THROWS_AS(load_checkpoint(path, VariantKind::dac), ConfigError);
    // The supported route into a dac config is init_vlm_from_base.
    const Model base = load_checkpoint(path, VariantKind::dense);
    const Model vlm = init_vlm_from_base(base, VariantKind::dac);
    CHECK(vlm.config.variant == VariantKind::dac);
    fs::remove(path);
}

TEST_CASE("model config JSON round-trip and validation") {
    ModelConfig cfg = tiny_config(VariantKind::moe_ffn);
    const ModelConfig back = ModelConfig::from_json_string(cfg.to_json_string());
    CHECK(back.d == cfg.d);
    CHECK(back.variant == cfg.variant);
    cfg.d = 15;  // not divisible by n_heads
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    CHECK_THROWS_AS(ModelConfig::from_json_string("{"), ConfigError);
    CHECK_THROWS_AS(ModelConfig::from_json_string("{}"), ConfigError);
}

TEST_CASE("init_vlm_from_base requires a dense base") {
    const Model dac = Model::init(tiny_config(VariantKind::dac), 61);
    CHECK_THROWS_AS(init_vlm_from_base(dac, VariantKind::dac), ConfigError);
}
