#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "dacvlm/patch_embed.hpp"
#include "dacvlm/rng.hpp"

using namespace dacvlm;

namespace {

PatchEmbedParams small_params(std::uint64_t seed, std::int64_t d1 = 4, std::int64_t d = 8) {
    Rng rng(seed);
    return PatchEmbedParams::init(d1, d, rng);
}

std::int64_t patch_count(const TokenSequence& seq) {
    std::int64_t n = 0;
    for (const auto& e : seq.entries) {
        if (e.role == VisRole::patch) ++n;
    }
    return n;
}

}  // namespace

TEST_CASE("resolution: 800x800 under AnyRatio_LD is unchanged") {
    CHECK(resolve_resolution(800, 800, ResolutionMode::AnyRatioLD) ==
          std::pair<std::int64_t, std::int64_t>{800, 800});
}

TEST_CASE("resolution: 1600x1600 under AnyRatio_HD is unchanged") {
    CHECK(resolve_resolution(1600, 1600, ResolutionMode::AnyRatioHD) ==
          std::pair<std::int64_t, std::int64_t>{1600, 1600});
}

TEST_CASE("resolution: 512x256 under AnyRatio_maxL scales longest edge to 800") {
    CHECK(resolve_resolution(512, 256, ResolutionMode::AnyRatioMaxL) ==
          std::pair<std::int64_t, std::int64_t>{800, 416});
}

TEST_CASE("resolution outputs are 32-multiples, idempotent, ratio-preserving") {
    Rng rng(4);
    for (int i = 0; i < 200; ++i) {
        const std::int64_t h = 32 + static_cast<std::int64_t>(rng.uniform_int(3000));
        const std::int64_t w = 32 + static_cast<std::int64_t>(rng.uniform_int(3000));
        for (auto mode : {ResolutionMode::AnyRatioMaxL, ResolutionMode::AnyRatioLD,
                          ResolutionMode::AnyRatioHD, ResolutionMode::AnyResolution}) {
            const auto [rh, rw] = resolve_resolution(h, w, mode);
            CHECK(rh % 32 == 0);
            CHECK(rw % 32 == 0);
            CHECK(rh * rw <= ResolutionLimits{}.max_pixels);
            CHECK(resolve_resolution(rh, rw, mode) ==
                  std::pair<std::int64_t, std::int64_t>{rh, rw});
            // Aspect ratio preserved within one grid cell of each edge.
            const double scale_h = static_cast<double>(rh) / static_cast<double>(h);
            const double scale_w = static_cast<double>(rw) / static_cast<double>(w);
            const double tol_h = 32.0 / static_cast<double>(h);
            const double tol_w = 32.0 / static_cast<double>(w);
            CHECK(std::fabs(scale_h - scale_w) <= tol_h + tol_w);
        }
    }
}

TEST_CASE("embed_image: 800x800 gives 625 patch tokens in a 651-long sequence") {
    const auto p = small_params(1);
    const auto seq = embed_image(ImageInput::white(800, 800), p);
    CHECK(patch_count(seq) == 625);
    CHECK(seq.length() == 651);
    CHECK(seq.grid_h == 25);
    CHECK(seq.grid_w == 25);
}

TEST_CASE("embed_image: 1600x1600 gives 2500 patch tokens") {
    const auto p = small_params(1);
    const auto seq = embed_image(ImageInput::white(1600, 1600), p);
    CHECK(patch_count(seq) == 2500);
    CHECK(seq.length() == 2500 + 50 + 1);
}

TEST_CASE("embed_image: 32x64 gives [CLS, p, p, SPL]") {
    const auto p = small_params(2);
    const auto seq = embed_image(ImageInput::white(32, 64), p);
    REQUIRE(seq.length() == 4);
    CHECK(seq.entries[0].role == VisRole::cls);
    CHECK(seq.entries[1].role == VisRole::patch);
    CHECK(seq.entries[2].role == VisRole::patch);
    CHECK(seq.entries[3].role == VisRole::spl);
    for (const auto& e : seq.entries) {
        CHECK(e.tag == Modality::vision);
        CHECK(e.loss_masked);
    }
}

TEST_CASE("embed_image rejects non-multiple-of-32 dims") {
    const auto p = small_params(3);
    CHECK_THROWS_AS(embed_image(ImageInput::white(33, 64), p), DimensionError);
}

TEST_CASE("layout decodes back to the grid dims") {
    const auto p = small_params(5);
    for (auto [h, w] : {std::pair<std::int64_t, std::int64_t>{32, 64},
                        {96, 32},
                        {128, 128},
                        {64, 160}}) {
        const auto seq = embed_image(ImageInput::white(h, w), p);
        CHECK(seq.decode_layout() ==
              std::pair<std::int64_t, std::int64_t>{h / 32, w / 32});
        CHECK(patch_count(seq) == (h / 32) * (w / 32));
    }
}

TEST_CASE("embed_image separates single-pixel perturbations") {
    const auto p = small_params(7);
    ImageInput a = ImageInput::white(64, 64);
    for (int trial = 0; trial < 10; ++trial) {
        Rng rng(100 + trial);
        ImageInput b = a;
        const std::size_t idx = rng.uniform_int(b.pixels.size());
        b.pixels[idx] = 0.25;
        const auto sa = embed_image(a, p);
        const auto sb = embed_image(b, p);
        double max_diff = 0.0;
        for (std::size_t i = 0; i < sa.vision_embeds->data.size(); ++i) {
            max_diff = std::max(max_diff, std::fabs(sa.vision_embeds->data[i] -
                                                    sb.vision_embeds->data[i]));
        }
        CHECK(max_diff > 0.0);
    }
}

TEST_CASE("concat_multimodal: empty image yields a pure text sequence") {
    const auto seq = concat_multimodal(TokenSequence{}, {5, 6, 7}, 100);
    REQUIRE(seq.length() == 3);
    for (const auto& e : seq.entries) {
        CHECK(e.tag == Modality::text);
        CHECK(!e.loss_masked);
    }
}

TEST_CASE("concat_multimodal: 651 image tokens + 20 text ids") {
    const auto p = small_params(9);
    const auto img = embed_image(ImageInput::white(800, 800), p);
    std::vector<std::int64_t> text(20, 4);
    const auto seq = concat_multimodal(img, text, 1024);
    REQUIRE(seq.length() == 671);
    for (std::int64_t i = 0; i < 651; ++i) {
        CHECK(seq.entries[static_cast<std::size_t>(i)].tag == Modality::vision);
    }
    for (std::int64_t i = 651; i < 671; ++i) {
        CHECK(seq.entries[static_cast<std::size_t>(i)].tag == Modality::text);
    }
}

TEST_CASE("concat_multimodal: context overflow throws") {
    const auto p = small_params(10);
    const auto img = embed_image(ImageInput::white(800, 800), p);
    CHECK_THROWS_AS(concat_multimodal(img, {}, 512), DimensionError);
}

TEST_CASE("concat_multimodal masks padding from the loss by default") {
    const auto seq = concat_multimodal(TokenSequence{}, {4, 0, 5}, 100);
    CHECK(!seq.entries[0].loss_masked);
    CHECK(seq.entries[1].loss_masked);  // <pad>
    CHECK(!seq.entries[2].loss_masked);
}

TEST_CASE("ppm round-trip preserves quantized pixels") {
    namespace fs = std::filesystem;
    ImageInput img = ImageInput::white(32, 64);
    Rng rng(21);
    for (double& v : img.pixels) v = rng.uniform();
    const std::string path = (fs::temp_directory_path() / "dacvlm_ppm_test.ppm").string();
    save_ppm(img, path);
    const ImageInput back = load_ppm(path);
    REQUIRE(back.h == img.h);
    REQUIRE(back.w == img.w);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
        CHECK(std::fabs(back.pixels[i] - img.pixels[i]) <= 0.5 / 255.0 + 1e-12);
    }
    // Second trip is lossless: values are already on the 8-bit lattice.
    save_ppm(back, path);
    CHECK(load_ppm(path).pixels == back.pixels);
    fs::remove(path);
}

TEST_CASE("load_ppm reports truncation") {
    namespace fs = std::filesystem;
    const std::string path = (fs::temp_directory_path() / "dacvlm_ppm_trunc.ppm").string();
    {
        std::ofstream out(path, std::ios::binary);
        out << "P6\n4 4\n255\n";
        out << "abc";  // far fewer than 48 bytes
    }
    CHECK_THROWS_AS(load_ppm(path), IoError);
    fs::remove(path);
}
