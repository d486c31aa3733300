#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>

#include "dmjd/rng.hpp"
#include "dmjd/targets.hpp"

using namespace dmjd;

namespace {

Image<double> random_image(std::size_t h, std::size_t w, std::size_t c, Rng& rng, double lo = 0.0,
                           double hi = 1.0) {
    Image<double> img{h, w, c, std::vector<double>(h * w * c)};
    for (auto& v : img.data) v = rng.uniform(lo, hi);
    return img;
}

// Independent per-pixel brute-force HOG: per-patch loops, nearest-center
// triangular voting over all bins, explicit border clamping.
std::vector<double> hog_ref(const Image<double>& img, std::size_t p, std::size_t bins,
                            std::size_t cells) {
    const std::size_t gh = img.h / p, gw = img.w / p;
    const std::size_t dim = cells * cells * bins * img.c;
    std::vector<double> out(gh * gw * dim, 0.0);
    const double width = 180.0 / static_cast<double>(bins);
    for (std::size_t pr = 0; pr < gh; ++pr) {
        for (std::size_t pc = 0; pc < gw; ++pc) {
            double* row = out.data() + (pr * gw + pc) * dim;
            for (std::size_t yy = 0; yy < p; ++yy) {
                for (std::size_t xx = 0; xx < p; ++xx) {
                    const std::size_t y = pr * p + yy, x = pc * p + xx;
                    const std::size_t cell = (yy / (p / cells)) * cells + xx / (p / cells);
                    for (std::size_t ch = 0; ch < img.c; ++ch) {
                        const std::size_t xp = x + 1 < img.w ? x + 1 : img.w - 1;
                        const std::size_t xm = x > 0 ? x - 1 : 0;
                        const std::size_t yp = y + 1 < img.h ? y + 1 : img.h - 1;
                        const std::size_t ym = y > 0 ? y - 1 : 0;
                        const double gx = img.at(y, xp, ch) - img.at(y, xm, ch);
                        const double gy = img.at(yp, x, ch) - img.at(ym, x, ch);
                        const double mag = std::hypot(gx, gy);
                        if (mag == 0.0) continue;
                        double theta = std::atan2(gy, gx) * 180.0 / std::numbers::pi;
                        while (theta < 0.0) theta += 180.0;
                        while (theta >= 180.0) theta -= 180.0;
                        for (std::size_t b = 0; b < bins; ++b) {
                            const double center = (static_cast<double>(b) + 0.5) * width;
                            double d = std::fabs(theta - center);
                            d = std::min(d, 180.0 - d);
                            const double weight = std::max(0.0, 1.0 - d / width);
                            row[(ch * cells * cells + cell) * bins + b] += mag * weight;
                        }
                    }
                }
            }
            double sq = 0.0;
            for (std::size_t j = 0; j < dim; ++j) sq += row[j] * row[j];
            const double inv = 1.0 / std::sqrt(sq + 1e-6);
            for (std::size_t j = 0; j < dim; ++j) row[j] *= inv;
        }
    }
    return out;
}

}  // namespace

TEST_CASE("pixel targets of a constant image standardize to zero") {
    Image<double> img{8, 8, 3, std::vector<double>(8 * 8 * 3, 0.42)};
    auto t = pixel_target(img, 4, NormMode::per_patch_standardize);
    REQUIRE(t.n_tokens == 4);
    REQUIRE(t.dim == 48);
    for (double v : t.values) REQUIRE(v == Catch::Approx(0.0).margin(1e-9));
}

TEST_CASE("pixel targets standardize a two-level patch to +-1") {
    Image<double> img{2, 2, 1, {0.0, 1.0, 0.0, 1.0}};
    auto t = pixel_target(img, 2, NormMode::per_patch_standardize);
    REQUIRE(t.values[0] == Catch::Approx(-1.0).margin(1e-4));
    REQUIRE(t.values[1] == Catch::Approx(1.0).margin(1e-4));
    REQUIRE(t.values[2] == Catch::Approx(-1.0).margin(1e-4));
    REQUIRE(t.values[3] == Catch::Approx(1.0).margin(1e-4));
}

TEST_CASE("standardized pixel targets have zero mean and unit variance") {
    Rng rng(31);
    auto img = random_image(16, 16, 3, rng, -2.0, 2.0);
    auto t = pixel_target(img, 8, NormMode::per_patch_standardize);
    for (std::size_t r = 0; r < t.n_tokens; ++r) {
        double mu = 0.0, var = 0.0;
        for (std::size_t j = 0; j < t.dim; ++j) mu += t.values[r * t.dim + j];
        mu /= static_cast<double>(t.dim);
        for (std::size_t j = 0; j < t.dim; ++j) {
            const double c = t.values[r * t.dim + j] - mu;
            var += c * c;
        }
        var /= static_cast<double>(t.dim);
        REQUIRE(std::fabs(mu) < 1e-5);
        REQUIRE(std::fabs(var - 1.0) < 1e-5);
    }
}

TEST_CASE("pixel targets reject non-divisible dimensions") {
    Image<double> img{10, 10, 1, std::vector<double>(100, 0.0)};
    REQUIRE_THROWS_AS(pixel_target(img, 4, NormMode::none), shape_error);
}

TEST_CASE("hog of a constant image is all zero") {
    Image<double> img{16, 16, 3, std::vector<double>(16 * 16 * 3, 0.7)};
    auto t = hog_target(img, 8);
    for (double v : t.values) REQUIRE(v == 0.0);
}

TEST_CASE("hog of a vertical step edge concentrates on the horizontal orientation") {
    Image<double> img{8, 8, 1, std::vector<double>(64, 0.0)};
    for (std::size_t y = 0; y < 8; ++y)
        for (std::size_t x = 4; x < 8; ++x) img.at(y, x, 0) = 1.0;
    HogParams hp;
    hp.bins = 9;
    hp.cells_per_side = 1;
    auto t = hog_target(img, 8, hp);
    // theta = 0 sits exactly between the centers of bin 0 and bin 8;
    // the bilinear split puts all mass there, nothing anywhere else
    double straddle = t.values[0] + t.values[8], rest = 0.0;
    for (std::size_t b = 1; b < 8; ++b) rest += t.values[b];
    REQUIRE(straddle > 0.0);
    REQUIRE(rest == 0.0);
    REQUIRE(t.values[0] == Catch::Approx(t.values[8]).margin(1e-12));
}

TEST_CASE("hog matches the per-pixel brute-force oracle") {
    Rng rng(32);
    for (int trial = 0; trial < 25; ++trial) {
        auto img = random_image(32, 32, 3, rng);
        HogParams hp;
        auto t = hog_target(img, 8, hp);
        auto ref = hog_ref(img, 8, hp.bins, hp.cells_per_side);
        REQUIRE(t.values.size() == ref.size());
        for (std::size_t i = 0; i < ref.size(); ++i) {
            REQUIRE(t.values[i] == Catch::Approx(ref[i]).margin(1e-5));
        }
    }
}

TEST_CASE("hog of a 90-degree rotation shifts orientation bins by half") {
    Rng rng(33);
    auto img = random_image(32, 32, 2, rng);
    Image<double> rot{32, 32, 2, std::vector<double>(img.data.size())};
    for (std::size_t y = 0; y < 32; ++y)
        for (std::size_t x = 0; x < 32; ++x)
            for (std::size_t ch = 0; ch < 2; ++ch) rot.at(y, x, ch) = img.at(x, 31 - y, ch);

    HogParams hp;
    hp.bins = 6;  // even bin count makes the 90-degree shift an integer
    hp.cells_per_side = 1;
    auto base = hog_target(img, 8, hp);
    auto turned = hog_target(rot, 8, hp);
    const std::size_t g = 4, dim = base.dim;
    for (std::size_t r = 0; r < g; ++r) {
        for (std::size_t c = 0; c < g; ++c) {
            const double* rrow = turned.values.data() + (r * g + c) * dim;
            const double* orow = base.values.data() + (c * g + (g - 1 - r)) * dim;
            for (std::size_t ch = 0; ch < 2; ++ch) {
                for (std::size_t b = 0; b < hp.bins; ++b) {
                    const double rotated = rrow[ch * hp.bins + (b + hp.bins / 2) % hp.bins];
                    REQUIRE(rotated == Catch::Approx(orow[ch * hp.bins + b]).margin(1e-9));
                }
            }
        }
    }
}

TEST_CASE("hog is exactly invariant to a constant pixel offset") {
    Rng rng(34);
    Image<double> img{16, 16, 1, std::vector<double>(256)};
    // dyadic values keep the +constant exact in floating point
    for (auto& v : img.data) v = static_cast<double>(rng.below(256)) / 256.0;
    Image<double> shifted = img;
    for (auto& v : shifted.data) v += 0.25;
    auto a = hog_target(img, 8);
    auto b = hog_target(shifted, 8);
    REQUIRE(a.values == b.values);
}

TEST_CASE("hog descriptors are non-negative") {
    Rng rng(35);
    auto img = random_image(16, 16, 3, rng);
    auto t = hog_target(img, 8);
    for (double v : t.values) REQUIRE(v >= 0.0);
}

TEST_CASE("normalize_target modes") {
    SECTION("none is the identity") {
        TargetTensor<double> t{2, 2, {1.0, 2.0, 3.0, 4.0}, TargetKind::pixel};
        auto out = normalize_target(t, NormMode::none);
        REQUIRE(out.values == t.values);
    }
    SECTION("l2 maps the 3-4-5 triangle") {
        TargetTensor<double> t{1, 2, {3.0, 4.0}, TargetKind::pixel};
        auto out = normalize_target(t, NormMode::l2);
        REQUIRE(out.values[0] == Catch::Approx(0.6).margin(1e-12));
        REQUIRE(out.values[1] == Catch::Approx(0.8).margin(1e-12));
    }
    SECTION("layer_norm standardizes rows") {
        Rng rng(36);
        TargetTensor<double> t{4, 16, std::vector<double>(64), TargetKind::pixel};
        for (auto& v : t.values) v = rng.uniform(-3.0, 3.0);
        auto out = normalize_target(t, NormMode::layer_norm);
        for (std::size_t r = 0; r < 4; ++r) {
            double mu = 0.0, var = 0.0;
            for (std::size_t j = 0; j < 16; ++j) mu += out.values[r * 16 + j];
            mu /= 16.0;
            for (std::size_t j = 0; j < 16; ++j) {
                const double c = out.values[r * 16 + j] - mu;
                var += c * c;
            }
            var /= 16.0;
            REQUIRE(std::fabs(mu) < 1e-6);
            REQUIRE(std::fabs(var - 1.0) < 1e-5);
        }
    }
    SECTION("layer_norm is idempotent") {
        Rng rng(37);
        TargetTensor<double> t{3, 8, std::vector<double>(24), TargetKind::hog};
        for (auto& v : t.values) v = rng.uniform(0.0, 5.0);
        auto once = normalize_target(t, NormMode::layer_norm);
        auto twice = normalize_target(once, NormMode::layer_norm);
        for (std::size_t i = 0; i < once.values.size(); ++i) {
            REQUIRE(twice.values[i] == Catch::Approx(once.values[i]).margin(1e-6));
        }
    }
}

TEST_CASE("external targets round-trip bitwise and reject malformed files") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "dmjd_targets_test";
    fs::create_directories(dir);
    const std::string path = (dir / "emb.dmjt").string();

    Rng rng(38);
    std::vector<TargetTensor<float>> targets;
    for (int i = 0; i < 3; ++i) {
        TargetTensor<float> t{4, 5, std::vector<float>(20), TargetKind::external};
        for (auto& v : t.values) v = static_cast<float>(rng.uniform(-1.0, 1.0));
        targets.push_back(std::move(t));
    }
    external_target_save(path, targets);

    SECTION("round trip is exact") {
        auto loaded = external_target_load<float>(path, 4, 5);
        REQUIRE(loaded.size() == 3);
        for (std::size_t i = 0; i < 3; ++i) REQUIRE(loaded[i].values == targets[i].values);
        REQUIRE(loaded[0].kind == TargetKind::external);
    }
    SECTION("shape mismatch names expected vs found") {
        try {
            external_target_load<float>(path, 4, 7);
            FAIL("expected format_error");
        } catch (const format_error& e) {
            const std::string msg = e.what();
            REQUIRE(msg.find("D=7") != std::string::npos);
            REQUIRE(msg.find("D=5") != std::string::npos);
        }
    }
    SECTION("truncated file names the missing row") {
        const auto full = fs::file_size(path);
        fs::resize_file(path, full - 24);
        try {
            external_target_load<float>(path, 4, 5);
            FAIL("expected format_error");
        } catch (const format_error& e) {
            const std::string msg = e.what();
            REQUIRE(msg.find("truncated") != std::string::npos);
            REQUIRE(msg.find("row") != std::string::npos);
        }
    }
    SECTION("bad magic") {
        std::ofstream os(path, std::ios::binary);
        os << "NOPE";
        os.close();
        REQUIRE_THROWS_AS(external_target_load<float>(path, 4, 5), format_error);
    }
    fs::remove_all(dir);
}

TEST_CASE("all target kinds stay finite on arbitrary finite images") {
    Rng rng(39);
    for (int trial = 0; trial < 10; ++trial) {
        auto img = random_image(16, 16, 3, rng, -100.0, 100.0);
        for (double v : pixel_target(img, 8, NormMode::per_patch_standardize).values)
            REQUIRE(std::isfinite(v));
        for (double v : hog_target(img, 8).values) REQUIRE(std::isfinite(v));
    }
}
