#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dmjd/image.hpp"
#include "dmjd/masking.hpp"
#include "dmjd/model.hpp"
#include "dmjd/objective.hpp"
#include "dmjd/optimizer.hpp"
#include "dmjd/targets.hpp"

namespace dmjd {

struct TrainConfig {
    double base_lr = 1.5e-4;
    std::size_t batch_size = 1024;
    std::size_t k_views = 2;
    double m_corr = 0.6;
    double m_pred = 0.95;
    PatternKind pattern = PatternKind::block;
    std::size_t min_block_tokens = 4;
    double block_aspect_min = 0.3;
    double block_aspect_max = 10.0 / 3.0;
    double weight_decay = 0.05;
    std::size_t epochs = 800;
    std::size_t warmup_epochs = 20;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double adam_eps = 1e-8;
    double min_lr = 0.0;
    double lambda = 1.0;
    double huber_beta = 2.0;
    NormMode vdb_norm = NormMode::layer_norm;
    bool vdb_stop_grad = false;
    bool hflip = true;
    std::uint64_t seed = 0;

    // Single-view training degenerates to m_pred = m_corr.
    double effective_m_pred() const { return k_views == 1 ? m_corr : m_pred; }

    std::vector<std::string> validate(std::size_t n_tokens) const {
        std::vector<std::string> problems;
        if (batch_size == 0 || k_views == 0) problems.push_back("batch_size and k_views must be positive");
        if (k_views > 0 && batch_size % k_views != 0)
            problems.push_back("batch_size must be divisible by k_views");
        if (!(base_lr > 0.0)) problems.push_back("base_lr must be positive");
        if (epochs == 0) problems.push_back("epochs must be positive");
        if (warmup_epochs > epochs) problems.push_back("warmup_epochs cannot exceed epochs");
        if (!(m_corr > 0.0) || m_corr >= 1.0)
            problems.push_back("training needs m_corr in (0,1): the encoder requires visible tokens");
        if (lambda < 0.0) problems.push_back("lambda must be >= 0");
        if (!(huber_beta > 0.0)) problems.push_back("huber_beta must be positive");
        if (weight_decay < 0.0) problems.push_back("weight_decay must be >= 0");
        if (min_lr < 0.0) problems.push_back("min_lr must be >= 0");
        try {
            plan_view_quotas(n_tokens, m_corr, k_views, effective_m_pred());
        } catch (const error& e) {
            problems.push_back(e.what());
        }
        return problems;
    }

    MaskPattern mask_pattern(std::size_t grid_h, std::size_t grid_w) const {
        MaskPattern p;
        p.kind = pattern;
        p.grid_h = grid_h;
        p.grid_w = grid_w;
        p.min_block_tokens = min_block_tokens;
        p.aspect_min = block_aspect_min;
        p.aspect_max = block_aspect_max;
        return p;
    }
};

// Adaptive learning-rate scale: eta = eta_base * (b_u * m_pred/m_corr) / 256
// with b_u = b/K unique images per batch. With K = 1 and m_pred = m_corr this
// is exactly the linear rule eta_base * b / 256.
inline double scaled_lr(double eta_base, std::size_t batch_size, std::size_t k_views, double m_pred,
                        double m_corr) {
    if (k_views == 0 || batch_size == 0) throw config_error("scaled_lr: batch_size and k_views must be positive");
    if (batch_size % k_views != 0)
        throw config_error("scaled_lr: batch_size " + std::to_string(batch_size) +
                           " not divisible by k_views " + std::to_string(k_views));
    if (!(eta_base > 0.0) || !(m_corr > 0.0) || m_pred < m_corr)
        throw config_error("scaled_lr: need eta_base > 0 and m_pred >= m_corr > 0");
    const double b_u = static_cast<double>(batch_size / k_views);
    return eta_base * (b_u * (m_pred / m_corr)) / 256.0;
}

inline std::size_t effective_epochs(std::size_t k_views, std::size_t epochs) {
    return k_views * epochs;
}

// Linear warmup from 0 to the scaled peak over warmup_epochs, then half-cosine
// decay to min_lr over the remaining epochs.
inline double lr_at_step(const TrainConfig& cfg, std::size_t step, std::size_t steps_per_epoch) {
    if (steps_per_epoch == 0) throw config_error("lr_at_step: steps_per_epoch must be positive");
    const double peak =
        scaled_lr(cfg.base_lr, cfg.batch_size, cfg.k_views, cfg.effective_m_pred(), cfg.m_corr);
    const double warmup_steps = static_cast<double>(cfg.warmup_epochs * steps_per_epoch);
    const double total_steps = static_cast<double>(cfg.epochs * steps_per_epoch);
    const double s = static_cast<double>(step);
    if (s < warmup_steps) return peak * s / warmup_steps;
    if (total_steps <= warmup_steps) return peak;
    const double progress = std::min(1.0, (s - warmup_steps) / (total_steps - warmup_steps));
    return cfg.min_lr + (peak - cfg.min_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// Target extractor configuration, fixed for a run.
template <typename T>
struct TargetPipeline {
    TargetKind kind = TargetKind::pixel;
    NormMode pixel_norm = NormMode::per_patch_standardize;
    HogParams hog;
    const std::vector<TargetTensor<T>>* external = nullptr;

    std::size_t dim(const ModelConfig& cfg) const {
        switch (kind) {
            case TargetKind::pixel:
                return cfg.token_dim();
            case TargetKind::hog:
                return hog.cells_per_side * hog.cells_per_side * hog.bins * cfg.channels;
            default:
                if (!external || external->empty())
                    throw config_error("TargetPipeline: external targets not loaded");
                return (*external)[0].dim;
        }
    }

    bool same_extractor(const TargetPipeline& o) const {
        if (kind != o.kind) return false;
        switch (kind) {
            case TargetKind::pixel: return pixel_norm == o.pixel_norm;
            case TargetKind::hog:
                return hog.bins == o.hog.bins && hog.cells_per_side == o.hog.cells_per_side;
            default: return external == o.external;
        }
    }

    TargetTensor<T> make(const Image<T>& img, std::size_t patch, std::size_t image_index) const {
        switch (kind) {
            case TargetKind::pixel:
                return pixel_target(img, patch, pixel_norm);
            case TargetKind::hog:
                return hog_target(img, patch, hog);
            default:
                if (!external || image_index >= external->size())
                    throw contract_error("TargetPipeline: external target index out of range");
                return (*external)[image_index];
        }
    }
};

struct EpochStats {
    std::size_t epoch = 0;
    std::size_t ete = 0;
    std::size_t steps = 0;
    double lr = 0.0;
    double loss_mim = 0.0;
    double loss_vis = 0.0;
    double loss_total = 0.0;
    double m_pred_realized = 0.0;
    double wall_s = 0.0;
};

struct RunStats {
    std::vector<EpochStats> epochs;
};

// One DMJD training loop: per-image K-view disjoint sampling, dual-branch
// losses averaged over views then images, AdamW with the warmup + cosine
// schedule on the adaptive scaled learning rate.
template <typename T>
class Trainer {
public:
    Trainer(Model<T>& model, TrainConfig cfg, TargetPipeline<T> mpb,
            std::optional<TargetPipeline<T>> vdb)
        : model_(model),
          cfg_(cfg),
          mpb_(std::move(mpb)),
          vdb_(std::move(vdb)),
          opt_(model.params(), AdamWConfig{cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay}),
          rng_(cfg.seed) {
        const auto& mc = model.config();
        auto problems = cfg_.validate(mc.n_tokens());
        if (mpb_.dim(mc) != mc.target_dim)
            problems.push_back("mpb target dim " + std::to_string(mpb_.dim(mc)) +
                               " does not match model target_dim " + std::to_string(mc.target_dim));
        if (vdb_ && !mc.vdb_enabled) problems.push_back("vdb targets configured but model has no VDB");
        if (!vdb_ && mc.vdb_enabled) problems.push_back("model has a VDB but no vdb targets configured");
        if (vdb_ && vdb_->dim(mc) != mc.vdb_dim())
            problems.push_back("vdb target dim " + std::to_string(vdb_->dim(mc)) +
                               " does not match model vdb dim " + std::to_string(mc.vdb_dim()));
        if (!problems.empty()) {
            std::string msg = "Trainer config invalid:";
            for (const auto& p : problems) msg += "\n  - " + p;
            throw config_error(msg);
        }
        plan_ = plan_view_quotas(mc.n_tokens(), cfg_.m_corr, cfg_.k_views, cfg_.effective_m_pred(),
                                 cfg_.mask_pattern(mc.grid(), mc.grid()));
    }

    const DisjointViewPlan& plan() const { return plan_; }
    std::size_t global_step() const { return global_step_; }

    std::size_t steps_per_epoch(std::size_t n_train) const {
        const std::size_t bu = cfg_.batch_size / cfg_.k_views;
        return (n_train + bu - 1) / bu;
    }

    // Test/telemetry hooks.
    std::function<void(std::size_t, const std::vector<MaskVector>&)> on_views;
    std::function<void(const ParamSet<T>&)> on_grads;
    std::function<void(std::size_t, double)> on_step_loss;

    EpochStats train_epoch(const std::vector<Image<T>>& images,
                           std::span<const std::size_t> train_indices, std::size_t epoch_index) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto& mc = model_.config();
        const std::size_t bu = cfg_.batch_size / cfg_.k_views;
        const std::size_t spe = steps_per_epoch(train_indices.size());

        std::vector<std::size_t> order(train_indices.begin(), train_indices.end());
        rng_.shuffle(order);

        EpochStats stats;
        stats.epoch = epoch_index;
        stats.ete = effective_epochs(cfg_.k_views, epoch_index + 1);
        double sum_lm = 0.0, sum_lv = 0.0, sum_lt = 0.0, sum_mpred = 0.0;
        std::size_t view_count = 0, image_count = 0;
        double last_lr = 0.0;

        for (std::size_t start = 0; start < order.size(); start += bu) {
            const std::size_t end = std::min(order.size(), start + bu);
            Tape<T> tape;
            std::vector<Tensor<T>> image_losses;
            image_losses.reserve(end - start);
            for (std::size_t bi = start; bi < end; ++bi) {
                const std::size_t idx = order[bi];
                const bool flip = cfg_.hflip && rng_.below(2) == 1;
                const Image<T> img = flip ? images[idx].hflip() : images[idx];
                const Tensor<T> tokens = patchify(img, mc.patch_size).tokens;
                const TargetTensor<T> mpb_target = mpb_.make(img, mc.patch_size, idx);
                std::optional<TargetTensor<T>> vdb_target;
                if (vdb_) {
                    vdb_target = vdb_->same_extractor(mpb_) ? mpb_target
                                                            : vdb_->make(img, mc.patch_size, idx);
                }

                CumulativeMask cum = CumulativeMask::empty(mc.n_tokens());
                std::vector<MaskVector> views;
                std::vector<Tensor<T>> view_losses;
                views.reserve(cfg_.k_views);
                for (std::size_t k = 0; k < cfg_.k_views; ++k) {
                    MaskVector mask = sample_disjoint_view(plan_, k, cum, rng_);
                    cum = accumulate(std::move(cum), mask);
                    Tensor<T> z = model_.encode_visible(tokens, mask);
                    Tensor<T> pred = model_.decode_masked(z, mask);
                    Tensor<T> lm = mim_loss(pred, mpb_target, mask);
                    Tensor<T> lt;
                    if (vdb_target) {
                        Tensor<T> zin = cfg_.vdb_stop_grad ? detach(z) : z;
                        Tensor<T> lv = visible_distill_loss(model_.project_visible(zin), *vdb_target,
                                                            mask, cfg_.vdb_norm,
                                                            static_cast<T>(cfg_.huber_beta));
                        lt = total_loss(lv, lm, static_cast<T>(cfg_.lambda));
                        sum_lv += static_cast<double>(lv.item());
                    } else {
                        lt = scale(lm, static_cast<T>(cfg_.lambda));
                    }
                    sum_lm += static_cast<double>(lm.item());
                    sum_lt += static_cast<double>(lt.item());
                    ++view_count;
                    view_losses.push_back(lt);
                    views.push_back(std::move(mask));
                }
                sum_mpred += prediction_rate(views);
                ++image_count;
                if (on_views) on_views(idx, views);

                Tensor<T> image_loss = view_losses[0];
                for (std::size_t k = 1; k < view_losses.size(); ++k)
                    image_loss = add(image_loss, view_losses[k]);
                image_losses.push_back(scale(image_loss, T(1) / static_cast<T>(cfg_.k_views)));
            }
            Tensor<T> batch_loss = image_losses[0];
            for (std::size_t i = 1; i < image_losses.size(); ++i)
                batch_loss = add(batch_loss, image_losses[i]);
            batch_loss = scale(batch_loss, T(1) / static_cast<T>(image_losses.size()));
            backward(batch_loss);
            if (on_grads) on_grads(model_.params());
            last_lr = lr_at_step(cfg_, global_step_, spe);
            opt_.step(model_.params(), last_lr);
            model_.params().zero_grads();
            if (on_step_loss) on_step_loss(global_step_, static_cast<double>(batch_loss.item()));
            ++global_step_;
            ++stats.steps;
        }

        stats.lr = last_lr;
        stats.loss_mim = sum_lm / static_cast<double>(view_count);
        stats.loss_vis = vdb_ ? sum_lv / static_cast<double>(view_count) : 0.0;
        stats.loss_total = sum_lt / static_cast<double>(view_count);
        stats.m_pred_realized = sum_mpred / static_cast<double>(image_count);
        stats.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return stats;
    }

private:
    Model<T>& model_;
    TrainConfig cfg_;
    TargetPipeline<T> mpb_;
    std::optional<TargetPipeline<T>> vdb_;
    AdamW<T> opt_;
    DisjointViewPlan plan_;
    Rng rng_;
    std::size_t global_step_ = 0;
};

}  // namespace dmjd
