#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "dmjd/objective.hpp"
#include "dmjd/rng.hpp"
#include "oracles.hpp"

using namespace dmjd;

namespace {

TargetTensor<double> random_target(std::size_t n, std::size_t d, Rng& rng) {
    TargetTensor<double> t{n, d, std::vector<double>(n * d), TargetKind::pixel};
    for (auto& v : t.values) v = rng.uniform(-1.0, 1.0);
    return t;
}

Tensor<double> random_pred(std::size_t n, std::size_t d, Rng& rng, bool rg = true) {
    std::vector<double> v(n * d);
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    return Tensor<double>::from({n, d}, std::move(v), rg);
}

MaskVector make_mask(std::vector<std::uint8_t> bits) {
    MaskVector m;
    m.n_tokens = bits.size();
    m.bits = std::move(bits);
    m.corruption_rate = static_cast<double>(m.masked_count()) / static_cast<double>(m.n_tokens);
    return m;
}

// Scalar double-loop MSE over masked tokens.
double mim_ref(const Tensor<double>& pred, const TargetTensor<double>& t, const MaskVector& m) {
    double acc = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < m.n_tokens; ++i) {
        if (!m.bits[i]) continue;
        for (std::size_t j = 0; j < t.dim; ++j) {
            const double d = pred.values()[i * t.dim + j] - t.values[i * t.dim + j];
            acc += d * d;
            ++count;
        }
    }
    return acc / static_cast<double>(count);
}

}  // namespace

TEST_CASE("mim_loss is zero for perfect reconstruction on masked slots") {
    Rng rng(1);
    auto target = random_target(4, 3, rng);
    std::vector<double> pred_vals(target.values);
    // corrupt only the visible rows; loss must ignore them
    for (std::size_t j = 0; j < 3; ++j) pred_vals[0 * 3 + j] += 5.0;
    auto pred = Tensor<double>::from({4, 3}, std::move(pred_vals));
    auto mask = make_mask({0, 1, 1, 1});
    REQUIRE(mim_loss(pred, target, mask).item() == 0.0);
}

TEST_CASE("mim_loss gradient is exactly zero at unmasked slots") {
    Rng rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        auto target = random_target(6, 4, rng);
        auto pred = random_pred(6, 4, rng);
        auto mask = make_mask({1, 0, 1, 0, 0, 1});
        Tape<double> tape;
        backward(mim_loss(pred, target, mask));
        auto g = pred.grad();
        for (std::size_t i = 0; i < 6; ++i) {
            for (std::size_t j = 0; j < 4; ++j) {
                if (mask.bits[i]) continue;
                REQUIRE(g[i * 4 + j] == 0.0);
            }
        }
    }
}

TEST_CASE("mim_loss matches the scalar double-loop oracle") {
    Rng rng(3);
    auto target = random_target(4, 3, rng);
    auto pred = random_pred(4, 3, rng, false);
    auto mask = make_mask({1, 0, 1, 1});
    const double got = mim_loss(pred, target, mask).item();
    REQUIRE(got == Catch::Approx(mim_ref(pred, target, mask)).margin(1e-7));
}

TEST_CASE("mim_loss rejects an empty mask") {
    Rng rng(4);
    auto target = random_target(4, 3, rng);
    auto pred = random_pred(4, 3, rng, false);
    auto mask = make_mask({0, 0, 0, 0});
    REQUIRE_THROWS_AS(mim_loss(pred, target, mask), contract_error);
}

TEST_CASE("visible_distill_loss is zero when projections equal normalized targets") {
    Rng rng(5);
    auto target = random_target(4, 3, rng);
    auto mask = make_mask({1, 0, 0, 1});
    auto normalized = normalize_target(target, NormMode::layer_norm);
    std::vector<double> proj_vals;
    for (std::size_t i : mask.visible_indices())
        for (std::size_t j = 0; j < 3; ++j) proj_vals.push_back(normalized.values[i * 3 + j]);
    auto proj = Tensor<double>::from({2, 3}, std::move(proj_vals));
    REQUIRE(visible_distill_loss(proj, target, mask, NormMode::layer_norm, 2.0).item() == 0.0);
}

TEST_CASE("smooth-L1 evaluates the paper's scalar anchor points") {
    // residual D = 2 with beta = 2 sits at the knee: 0.5 * 4 / 2 = 1
    auto mask = make_mask({0});
    TargetTensor<double> t{1, 1, {0.0}, TargetKind::pixel};
    auto p2 = Tensor<double>::from({1, 1}, {2.0});
    REQUIRE(visible_distill_loss(p2, t, mask, NormMode::none, 2.0).item() ==
            Catch::Approx(1.0).margin(1e-12));
    auto p4 = Tensor<double>::from({1, 1}, {4.0});
    REQUIRE(visible_distill_loss(p4, t, mask, NormMode::none, 2.0).item() ==
            Catch::Approx(3.0).margin(1e-12));
}

TEST_CASE("smooth-L1 is C1 at the knee") {
    const double beta = 2.0;
    auto mask = make_mask({0});
    TargetTensor<double> t{1, 1, {0.0}, TargetKind::pixel};
    auto value_at = [&](double x) {
        auto p = Tensor<double>::from({1, 1}, {x});
        return visible_distill_loss(p, t, mask, NormMode::none, beta).item();
    };
    // value continuity across |D| = beta
    REQUIRE(std::fabs(value_at(beta - 1e-6) - value_at(beta + 1e-6)) < 1e-5);
    REQUIRE(value_at(beta) == Catch::Approx(beta / 2.0).margin(1e-12));
    // first-derivative continuity: central differences on both sides of the knee
    const double h = 1e-6;
    const double d_left = (value_at(beta - h) - value_at(beta - 3 * h)) / (2 * h);
    const double d_right = (value_at(beta + 3 * h) - value_at(beta + h)) / (2 * h);
    REQUIRE(std::fabs(d_left - 1.0) < 1e-6);
    REQUIRE(std::fabs(d_right - 1.0) < 1e-6);
    // and the analytic gradient agrees with finite differences across the boundary
    auto grad_at = [&](double x) {
        auto p = Tensor<double>::from({1, 1}, {x}, true);
        Tape<double> tape;
        backward(visible_distill_loss(p, t, mask, NormMode::none, beta));
        return p.grad()[0];
    };
    REQUIRE(std::fabs(grad_at(beta - 1e-6) - grad_at(beta + 1e-6)) < 1e-6);
    REQUIRE(grad_at(beta) == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("visible_distill_loss rejects an all-masked view") {
    Rng rng(6);
    auto target = random_target(3, 2, rng);
    auto proj = random_pred(0, 2, rng, false);
    auto mask = make_mask({1, 1, 1});
    REQUIRE_THROWS_AS(visible_distill_loss(proj, target, mask, NormMode::none, 2.0),
                      contract_error);
}

TEST_CASE("total_loss combines per the joint objective") {
    auto vis = Tensor<double>::scalar(0.3);
    auto mim = Tensor<double>::scalar(0.5);
    REQUIRE(total_loss(vis, mim, 1.0).item() == Catch::Approx(0.8).margin(1e-12));
    REQUIRE(total_loss(vis, mim, 0.0).item() == Catch::Approx(0.3).margin(1e-12));
    auto zero = Tensor<double>::scalar(0.0);
    REQUIRE(total_loss(vis, zero, 1.0).item() == Catch::Approx(0.3).margin(1e-12));
}

TEST_CASE("total_loss is exactly linear in lambda") {
    Rng rng(7);
    for (int t = 0; t < 100; ++t) {
        const double lv = rng.uniform(0.0, 2.0), lm = rng.uniform(0.0, 2.0);
        const double l1 = rng.uniform(0.0, 4.0), l2 = rng.uniform(0.0, 4.0);
        const double a = total_loss(Tensor<double>::scalar(lv), Tensor<double>::scalar(lm), l1).item();
        const double b = total_loss(Tensor<double>::scalar(lv), Tensor<double>::scalar(lm), l2).item();
        // slope in lambda is l_mim exactly
        if (l1 != l2) {
            REQUIRE((a - b) == Catch::Approx((l1 - l2) * lm).margin(1e-15));
        }
    }
}

TEST_CASE("losses are non-negative and vanish only at zero residual") {
    Rng rng(8);
    for (int t = 0; t < 30; ++t) {
        auto target = random_target(5, 4, rng);
        auto pred = random_pred(5, 4, rng, false);
        auto mask = make_mask({1, 0, 1, 0, 1});
        const double lm = mim_loss(pred, target, mask).item();
        REQUIRE(lm >= 0.0);
        std::vector<double> proj_vals(2 * 4);
        for (auto& v : proj_vals) v = rng.uniform(-1.0, 1.0);
        auto proj = Tensor<double>::from({2, 4}, std::move(proj_vals));
        const double lv = visible_distill_loss(proj, target, mask, NormMode::none, 2.0).item();
        REQUIRE(lv >= 0.0);
    }
}

TEST_CASE("loss config validation") {
    LossConfig<double> ok;
    REQUIRE_NOTHROW(ok.validate());
    LossConfig<double> bad_lambda;
    bad_lambda.lambda = -0.1;
    REQUIRE_THROWS_AS(bad_lambda.validate(), config_error);
    LossConfig<double> bad_beta;
    bad_beta.beta = 0.0;
    REQUIRE_THROWS_AS(bad_beta.validate(), config_error);
}
