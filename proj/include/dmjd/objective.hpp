#pragma once

#include <vector>

#include "dmjd/masking.hpp"
#include "dmjd/targets.hpp"
#include "dmjd/tensor.hpp"

namespace dmjd {

template <typename T>
struct LossConfig {
    T lambda = T(1);
    T beta = T(2);

    void validate() const {
        if (lambda < T(0)) throw config_error("LossConfig: lambda must be >= 0");
        if (!(beta > T(0))) throw config_error("LossConfig: beta must be > 0");
    }
};

namespace detail {

template <typename T>
Tensor<T> gather_target_rows(const TargetTensor<T>& target, const std::vector<std::size_t>& idx) {
    std::vector<T> rows(idx.size() * target.dim);
    for (std::size_t r = 0; r < idx.size(); ++r) {
        const T* src = target.values.data() + idx[r] * target.dim;
        std::copy_n(src, target.dim, rows.data() + r * target.dim);
    }
    return Tensor<T>::from({idx.size(), target.dim}, std::move(rows));
}

}  // namespace detail

// Masked reconstruction loss: mean squared error over masked tokens only,
// averaged over masked-token count and feature dimension. Gradients at
// unmasked prediction slots are exactly zero because those rows never enter
// the graph.
template <typename T>
Tensor<T> mim_loss(const Tensor<T>& pred, const TargetTensor<T>& target, const MaskVector& mask) {
    if (pred.rank() != 2 || pred.extent(0) != target.n_tokens || pred.extent(1) != target.dim) {
        throw shape_error("mim_loss: prediction " + shape_str(pred.shape()) + " vs target " +
                          std::to_string(target.n_tokens) + "x" + std::to_string(target.dim));
    }
    if (mask.n_tokens != target.n_tokens) throw shape_error("mim_loss: mask length mismatch");
    const auto masked = mask.masked_indices();
    if (masked.empty()) throw contract_error("mim_loss: mask selects zero tokens");
    auto p = gather_rows(pred, masked);
    auto t = detail::gather_target_rows(target, masked);
    auto d = sub(p, t);
    return mean_all(mul(d, d));
}

// Visible distillation loss: smooth-L1 between projected visible features and
// normalized targets at the visible slots, mean over tokens and dimensions.
// proj rows must follow ascending token index, matching encode order.
template <typename T>
Tensor<T> visible_distill_loss(const Tensor<T>& proj, const TargetTensor<T>& target,
                               const MaskVector& mask, NormMode norm, T beta) {
    if (mask.n_tokens != target.n_tokens) throw shape_error("visible_distill_loss: mask length mismatch");
    const auto visible = mask.visible_indices();
    if (visible.empty()) throw contract_error("visible_distill_loss: mask leaves zero visible tokens");
    if (proj.rank() != 2 || proj.extent(0) != visible.size() || proj.extent(1) != target.dim) {
        throw shape_error("visible_distill_loss: projection " + shape_str(proj.shape()) +
                          " does not match " + std::to_string(visible.size()) + " visible tokens x " +
                          std::to_string(target.dim));
    }
    auto normalized = normalize_target(target, norm);
    auto t = detail::gather_target_rows(normalized, visible);
    auto d = sub(proj, t);
    return mean_all(huber(d, beta));
}

template <typename T>
Tensor<T> total_loss(const Tensor<T>& l_vis, const Tensor<T>& l_mim, T lambda) {
    return add(l_vis, scale(l_mim, lambda));
}

}  // namespace dmjd
