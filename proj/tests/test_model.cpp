#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "dmjd/grad_check.hpp"
#include "dmjd/model.hpp"
#include "dmjd/objective.hpp"
#include "dmjd/targets.hpp"

using namespace dmjd;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.image_size = 8;
    cfg.patch_size = 4;
    cfg.channels = 3;
    cfg.encoder_dim = 8;
    cfg.encoder_depth = 1;
    cfg.encoder_heads = 2;
    cfg.decoder_dim = 8;
    cfg.decoder_depth = 1;
    cfg.projector_hidden = 8;
    cfg.target_dim = 48;
    return cfg;
}

template <typename T>
Image<T> random_image(std::size_t size, std::size_t c, Rng& rng) {
    Image<T> img{size, size, c, std::vector<T>(size * size * c)};
    for (auto& v : img.data) v = static_cast<T>(rng.next_double());
    return img;
}

MaskVector make_mask(std::vector<std::uint8_t> bits) {
    MaskVector m;
    m.n_tokens = bits.size();
    m.bits = std::move(bits);
    m.corruption_rate = static_cast<double>(m.masked_count()) / static_cast<double>(m.n_tokens);
    return m;
}

}  // namespace

TEST_CASE("patchify token counts") {
    Rng rng(1);
    auto img = random_image<float>(32, 3, rng);
    REQUIRE(patchify(img, 8).tokens.extent(0) == 16);
    REQUIRE(patchify(img, 32).tokens.extent(0) == 1);
    REQUIRE(patchify(img, 8).tokens.extent(1) == 192);
}

TEST_CASE("unpatchify inverts patchify bitwise") {
    Rng rng(2);
    auto img = random_image<float>(32, 3, rng);
    auto p = patchify(img, 8);
    auto back = unpatchify(p.tokens, 8, 3);
    REQUIRE(back.data.size() == img.data.size());
    REQUIRE(std::memcmp(back.data.data(), img.data.data(), img.data.size() * sizeof(float)) == 0);
}

TEST_CASE("patchify rejects non-divisible sizes") {
    Rng rng(3);
    auto img = random_image<float>(30, 3, rng);
    REQUIRE_THROWS_AS(patchify(img, 8), shape_error);
}

TEST_CASE("parameter count matches the closed-form formula") {
    Rng rng(4);
    std::vector<ModelConfig> configs;
    configs.push_back(tiny_config());
    configs.push_back(ModelConfig{});  // micro default
    ModelConfig no_vdb = tiny_config();
    no_vdb.vdb_enabled = false;
    configs.push_back(no_vdb);
    ModelConfig deep = tiny_config();
    deep.decoder_depth = 8;
    deep.vdb_target_dim = 20;
    configs.push_back(deep);
    for (const auto& cfg : configs) {
        Model<float> model(cfg, rng);
        REQUIRE(model.params().total_params() == Model<float>::param_count_formula(cfg));
    }
}

TEST_CASE("projector hidden width follows the config") {
    Rng rng(5);
    ModelConfig cfg = tiny_config();
    cfg.projector_hidden = 512;
    Model<float> model(cfg, rng);
    auto* fc2 = model.params().find("vdb.proj.fc2.w");
    REQUIRE(fc2 != nullptr);
    REQUIRE(fc2->tensor.shape() == Shape{512, 512});
}

TEST_CASE("visible count equals N minus the masked count") {
    Rng rng(6);
    ModelConfig cfg;  // micro: 16 tokens
    Model<float> model(cfg, rng);
    auto img = random_image<float>(32, 3, rng);
    auto tokens = patchify(img, 8).tokens;
    Rng mask_rng(7);
    auto mask = sample_mask(16, MaskPattern{}, 0.75, mask_rng);
    auto z = model.encode_visible(tokens, mask);
    REQUIRE(z.extent(0) == 16 - 12);
    REQUIRE(z.extent(1) == cfg.encoder_dim);
}

TEST_CASE("masked patches never influence encoder output or projections") {
    Rng rng(8);
    ModelConfig cfg;
    Model<float> model(cfg, rng);
    auto img = random_image<float>(32, 3, rng);
    Rng mask_rng(9);
    auto mask = sample_mask(16, MaskPattern{}, 0.75, mask_rng);

    auto perturbed = img;
    for (std::size_t i : mask.masked_indices()) {
        const std::size_t pr = i / 4, pc = i % 4;
        for (std::size_t y = 0; y < 8; ++y)
            for (std::size_t x = 0; x < 8; ++x)
                for (std::size_t ch = 0; ch < 3; ++ch)
                    perturbed.at(pr * 8 + y, pc * 8 + x, ch) += 13.5f;
    }

    auto z_a = model.encode_visible(patchify(img, 8).tokens, mask);
    auto z_b = model.encode_visible(patchify(perturbed, 8).tokens, mask);
    REQUIRE(std::memcmp(z_a.values().data(), z_b.values().data(),
                        z_a.numel() * sizeof(float)) == 0);

    auto p_a = model.project_visible(z_a);
    auto p_b = model.project_visible(z_b);
    REQUIRE(std::memcmp(p_a.values().data(), p_b.values().data(),
                        p_a.numel() * sizeof(float)) == 0);
}

TEST_CASE("encoder is permutation-equivariant over visible rows") {
    Rng rng(10);
    ModelConfig cfg;
    Model<float> model(cfg, rng);
    auto img = random_image<float>(32, 3, rng);
    auto tokens = patchify(img, 8).tokens;
    const std::vector<std::size_t> ascending{0, 2, 5, 7, 11};
    const std::vector<std::size_t> shuffled{7, 0, 11, 5, 2};

    auto z_a = model.encode_rows(gather_rows(tokens, ascending),
                                 gather_rows(model.encoder_positions(), ascending));
    auto z_b = model.encode_rows(gather_rows(tokens, shuffled),
                                 gather_rows(model.encoder_positions(), shuffled));
    const std::size_t d = cfg.encoder_dim;
    for (std::size_t r = 0; r < shuffled.size(); ++r) {
        const auto it = std::find(ascending.begin(), ascending.end(), shuffled[r]);
        const std::size_t ra = static_cast<std::size_t>(it - ascending.begin());
        for (std::size_t j = 0; j < d; ++j) {
            REQUIRE(z_b.values()[r * d + j] ==
                    Catch::Approx(z_a.values()[ra * d + j]).margin(1e-5));
        }
    }
}

TEST_CASE("encoder rejects an all-masked view") {
    Rng rng(11);
    ModelConfig cfg;
    Model<float> model(cfg, rng);
    auto tokens = patchify(random_image<float>(32, 3, rng), 8).tokens;
    auto mask = make_mask(std::vector<std::uint8_t>(16, 1));
    REQUIRE_THROWS_AS(model.encode_visible(tokens, mask), contract_error);
}

TEST_CASE("decoder output covers all tokens at target dimension") {
    Rng rng(12);
    ModelConfig cfg;
    Model<float> model(cfg, rng);
    auto tokens = patchify(random_image<float>(32, 3, rng), 8).tokens;
    Rng mask_rng(13);
    auto mask = sample_mask(16, MaskPattern{}, 0.75, mask_rng);
    auto pred = model.decode_masked(model.encode_visible(tokens, mask), mask);
    REQUIRE(pred.shape() == Shape{16, cfg.target_dim});
}

TEST_CASE("all masked slots share the mask token before positions") {
    Rng rng(14);
    ModelConfig cfg;
    Model<float> model(cfg, rng);
    auto tokens = patchify(random_image<float>(32, 3, rng), 8).tokens;
    Rng mask_rng(15);
    auto mask = sample_mask(16, MaskPattern{}, 0.75, mask_rng);
    auto input = model.decoder_input(model.encode_visible(tokens, mask), mask);
    const auto masked = mask.masked_indices();
    const std::size_t d = cfg.decoder_dim;
    const float* first = input.values().data() + masked[0] * d;
    for (std::size_t i : masked) {
        REQUIRE(std::memcmp(input.values().data() + i * d, first, d * sizeof(float)) == 0);
    }
}

TEST_CASE("projection output aligns with the vdb target dimension") {
    Rng rng(16);
    ModelConfig cfg = tiny_config();
    cfg.vdb_target_dim = 20;
    Model<float> model(cfg, rng);
    auto tokens = patchify(random_image<float>(8, 3, rng), 4).tokens;
    auto mask = make_mask({1, 0, 0, 1});
    auto z = model.encode_visible(tokens, mask);
    auto proj = model.project_visible(z);
    REQUIRE(proj.shape() == Shape{2, 20});
}

TEST_CASE("decoder gradients pass the finite-difference check") {
    Rng rng(17);
    Model<double> model(tiny_config(), rng);
    auto img = random_image<double>(8, 3, rng);
    auto tokens = patchify(img, 4).tokens;
    auto mask = make_mask({1, 0, 1, 0});
    auto target = pixel_target(img, 4, NormMode::per_patch_standardize);

    auto loss_fn = [&] {
        auto z = model.encode_visible(tokens, mask);
        return mim_loss(model.decode_masked(z, mask), target, mask);
    };
    auto results = grad_check_params(model.params(), loss_fn, 1e-3);
    for (const auto& r : results) {
        INFO(r.name << " rel err " << r.report.max_rel_err);
        if (r.name.rfind("vdb.", 0) == 0) continue;  // branch not in this loss
        REQUIRE(r.report.max_rel_err < 1e-3);
    }
}

TEST_CASE("projector and predictor gradients pass the finite-difference check") {
    Rng rng(18);
    Model<double> model(tiny_config(), rng);
    auto img = random_image<double>(8, 3, rng);
    auto tokens = patchify(img, 4).tokens;
    auto mask = make_mask({1, 0, 0, 1});
    auto target = hog_target(img, 4, HogParams{4, 1});
    ModelConfig cfg = tiny_config();
    cfg.target_dim = target.dim;  // align vdb output with the hog dimension
    Rng rng2(18);
    Model<double> m2(cfg, rng2);

    auto loss_fn = [&] {
        auto z = m2.encode_visible(tokens, mask);
        return visible_distill_loss(m2.project_visible(z), target, mask, NormMode::layer_norm, 2.0);
    };
    auto results = grad_check_params(m2.params(), loss_fn, 1e-3);
    for (const auto& r : results) {
        INFO(r.name << " rel err " << r.report.max_rel_err);
        if (r.name.rfind("dec.", 0) == 0) continue;  // branch not in this loss
        REQUIRE(r.report.max_rel_err < 1e-3);
    }
}

TEST_CASE("fresh model activations keep sane magnitudes") {
    Rng rng(19);
    ModelConfig cfg;
    Model<float> model(cfg, rng);
    auto tokens = patchify(random_image<float>(32, 3, rng), 8).tokens;
    Rng mask_rng(20);
    auto mask = sample_mask(16, MaskPattern{}, 0.6, mask_rng);

    std::vector<double> rms_values;
    ActivationObserver<float> observer = [&](const std::string&, const Tensor<float>& t) {
        double sq = 0.0;
        for (float v : t.values()) sq += static_cast<double>(v) * v;
        rms_values.push_back(std::sqrt(sq / static_cast<double>(t.numel())));
    };
    auto z = model.encode_visible(tokens, mask, observer);
    auto pred = model.decode_masked(z, mask, observer);
    for (float v : pred.values()) REQUIRE(std::isfinite(v));
    REQUIRE_FALSE(rms_values.empty());
    for (double rms : rms_values) {
        REQUIRE(rms > 1e-3);
        REQUIRE(rms < 1e3);
    }
}

TEST_CASE("checkpoints round-trip bitwise") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "dmjd_model_test";
    fs::create_directories(dir);
    const std::string path = (dir / "model.dmjc").string();
    const std::string path2 = (dir / "model2.dmjc").string();

    Rng rng(21);
    ModelConfig cfg = tiny_config();
    Model<float> model(cfg, rng);
    save_checkpoint(model, path);
    auto loaded = load_checkpoint<float>(path);
    REQUIRE(loaded.config().encoder_dim == cfg.encoder_dim);
    const auto& a = model.params().entries();
    const auto& b = loaded.params().entries();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        REQUIRE(a[i].name == b[i].name);
        REQUIRE(std::memcmp(a[i].tensor.values().data(), b[i].tensor.values().data(),
                            a[i].tensor.numel() * sizeof(float)) == 0);
    }
    save_checkpoint(loaded, path2);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    REQUIRE(s1 == s2);

    SECTION("bad magic is a format error") {
        std::ofstream os(path, std::ios::binary);
        os << "WHAT";
        os.close();
        REQUIRE_THROWS_AS(load_checkpoint<float>(path), format_error);
    }
    SECTION("truncation is a format error") {
        fs::resize_file(path2, fs::file_size(path2) / 2);
        REQUIRE_THROWS_AS(load_checkpoint<float>(path2), format_error);
    }
    fs::remove_all(dir);
}
