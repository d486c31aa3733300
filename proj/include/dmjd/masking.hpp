#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "dmjd/error.hpp"
#include "dmjd/rng.hpp"

namespace dmjd {

// Round-half-up, used for every token-count quantization in the project.
inline std::size_t round_half_up(double x) {
    return static_cast<std::size_t>(std::floor(x + 0.5));
}

inline std::size_t masked_count_for(std::size_t n_tokens, double m_corr) {
    return round_half_up(static_cast<double>(n_tokens) * m_corr);
}

// One masked view: bits[j] is true when token j is masked.
struct MaskVector {
    std::size_t n_tokens = 0;
    std::vector<std::uint8_t> bits;
    double corruption_rate = 0.0;

    std::size_t masked_count() const {
        return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t(1)));
    }

    std::vector<std::size_t> masked_indices() const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < bits.size(); ++i)
            if (bits[i]) out.push_back(i);
        return out;
    }

    std::vector<std::size_t> visible_indices() const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < bits.size(); ++i)
            if (!bits[i]) out.push_back(i);
        return out;
    }
};

// Union of all views accumulated so far; monotone, never clears a bit.
struct CumulativeMask {
    std::size_t n_tokens = 0;
    std::vector<std::uint8_t> covered;
    std::size_t k_views = 0;

    static CumulativeMask empty(std::size_t n_tokens) {
        return CumulativeMask{n_tokens, std::vector<std::uint8_t>(n_tokens, 0), 0};
    }

    std::size_t covered_count() const {
        return static_cast<std::size_t>(std::count(covered.begin(), covered.end(), std::uint8_t(1)));
    }
};

inline CumulativeMask accumulate(CumulativeMask cum, const MaskVector& view) {
    if (cum.n_tokens != view.n_tokens) {
        throw shape_error("accumulate: cumulative mask has N=" + std::to_string(cum.n_tokens) +
                          ", view has N=" + std::to_string(view.n_tokens));
    }
    for (std::size_t i = 0; i < cum.covered.size(); ++i) cum.covered[i] |= view.bits[i];
    cum.k_views += 1;
    return cum;
}

enum class PatternKind { uniform, block };

inline const char* pattern_name(PatternKind k) {
    return k == PatternKind::uniform ? "uniform" : "block";
}

struct MaskPattern {
    PatternKind kind = PatternKind::uniform;
    // Token grid for block masks; row-major indexing, grid_h * grid_w == N.
    std::size_t grid_h = 0, grid_w = 0;
    std::size_t min_block_tokens = 4;
    double aspect_min = 0.3, aspect_max = 10.0 / 3.0;
};

// Per-view quotas of fresh (never-masked) tokens realizing the target
// prediction rate. new_quota[0] is the full first-view count; every later
// view draws at least one token from the never-masked pool.
struct DisjointViewPlan {
    std::size_t n_tokens = 0;
    std::size_t k_views = 1;
    double corruption_rate = 0.0;
    double target_pred_rate = 0.0;
    std::vector<std::size_t> new_quota;
    MaskPattern pattern;
};

namespace detail {

inline void validate_corruption(std::size_t n_tokens, double m_corr) {
    if (n_tokens == 0) throw config_error("masking: n_tokens must be positive");
    if (!(m_corr > 0.0) || m_corr > 1.0) {
        throw config_error("masking: m_corr must lie in (0,1], got " + std::to_string(m_corr));
    }
    if (masked_count_for(n_tokens, m_corr) < 1) {
        throw config_error("masking: m_corr=" + std::to_string(m_corr) + " masks zero of " +
                           std::to_string(n_tokens) + " tokens");
    }
}

inline void validate_block_pattern(const MaskPattern& p, std::size_t n_tokens, std::size_t count) {
    if (p.grid_h * p.grid_w != n_tokens) {
        throw config_error("block mask: grid " + std::to_string(p.grid_h) + "x" +
                           std::to_string(p.grid_w) + " does not cover N=" + std::to_string(n_tokens));
    }
    if (p.min_block_tokens < 1 || p.min_block_tokens > count) {
        throw config_error("block mask: min_block_tokens=" + std::to_string(p.min_block_tokens) +
                           " must lie in [1, round(N*m_corr)=" + std::to_string(count) + "]");
    }
    if (!(p.aspect_min > 0.0) || !(p.aspect_max >= p.aspect_min)) {
        throw config_error("block mask: invalid aspect-ratio range");
    }
}

inline std::size_t masked_neighbor_count(const std::vector<std::uint8_t>& bits, std::size_t gh,
                                         std::size_t gw, std::size_t idx) {
    const std::size_t r = idx / gw, c = idx % gw;
    std::size_t n = 0;
    if (r > 0) n += bits[idx - gw];
    if (r + 1 < gh) n += bits[idx + gw];
    if (c > 0) n += bits[idx - 1];
    if (c + 1 < gw) n += bits[idx + 1];
    return n;
}

// Picks one index from candidates optimizing masked-neighbor attachment;
// ties broken by rng. maximize=true prefers block-adjacent cells.
inline std::size_t pick_by_attachment(const std::vector<std::uint8_t>& bits, const MaskPattern& p,
                                      const std::vector<std::size_t>& candidates, bool maximize,
                                      Rng& rng) {
    std::size_t best_score = maximize ? 0 : SIZE_MAX;
    std::vector<std::size_t> best;
    for (std::size_t idx : candidates) {
        const std::size_t s = masked_neighbor_count(bits, p.grid_h, p.grid_w, idx);
        const bool better = maximize ? s > best_score : s < best_score;
        if (better) {
            best_score = s;
            best.clear();
        }
        if (s == best_score) best.push_back(idx);
    }
    return best[static_cast<std::size_t>(rng.below(best.size()))];
}

}  // namespace detail

// Union of random rectangles on the token grid, each of at least
// min_block_tokens cells, grown until at least `target` tokens are masked.
// The result may exceed target; trim_block_mask shaves it down.
inline std::vector<std::uint8_t> block_union(const MaskPattern& p, std::size_t n_tokens,
                                             std::size_t target, Rng& rng) {
    detail::validate_block_pattern(p, n_tokens, target);
    const std::size_t gh = p.grid_h, gw = p.grid_w;
    std::vector<std::uint8_t> bits(n_tokens, 0);
    std::size_t count = 0;
    const double log_amin = std::log(p.aspect_min), log_amax = std::log(p.aspect_max);
    std::size_t stale = 0;
    while (count < target) {
        const std::size_t remaining = target - count;
        const std::size_t hi = std::max(p.min_block_tokens, remaining);
        const std::size_t area =
            p.min_block_tokens + static_cast<std::size_t>(rng.below(hi - p.min_block_tokens + 1));
        const double ar = std::exp(rng.uniform(log_amin, log_amax));
        std::size_t h = std::clamp<std::size_t>(
            round_half_up(std::sqrt(static_cast<double>(area) / ar)), 1, gh);
        std::size_t w = std::clamp<std::size_t>(
            round_half_up(std::sqrt(static_cast<double>(area) * ar)), 1, gw);
        // rectangles below the minimum would break the component-size guarantee
        while (h * w < p.min_block_tokens) {
            if (h < gh && (w >= gw || h <= w)) ++h;
            else if (w < gw) ++w;
            else break;
        }
        const std::size_t top = static_cast<std::size_t>(rng.below(gh - h + 1));
        const std::size_t left = static_cast<std::size_t>(rng.below(gw - w + 1));
        std::size_t added = 0;
        for (std::size_t r = top; r < top + h; ++r) {
            for (std::size_t c = left; c < left + w; ++c) {
                if (!bits[r * gw + c]) {
                    bits[r * gw + c] = 1;
                    ++added;
                }
            }
        }
        count += added;
        // fully-overlapping draws can stall near the end; grow the existing
        // blocks directly instead of waiting for a lucky rectangle
        stale = added == 0 ? stale + 1 : 0;
        if (stale >= 16) {
            std::vector<std::size_t> frontier;
            for (std::size_t i = 0; i < n_tokens; ++i)
                if (!bits[i] && detail::masked_neighbor_count(bits, gh, gw, i) > 0) frontier.push_back(i);
            if (frontier.empty()) break;  // cannot happen while count < N
            const std::size_t pick = detail::pick_by_attachment(bits, p, frontier, true, rng);
            bits[pick] = 1;
            ++count;
            stale = 0;
        }
    }
    return bits;
}

// Removes cells with the fewest masked neighbors first, keeping blocks compact.
inline void trim_block_mask(std::vector<std::uint8_t>& bits, const MaskPattern& p,
                            std::size_t target, Rng& rng) {
    std::size_t count = static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t(1)));
    while (count > target) {
        std::vector<std::size_t> masked;
        for (std::size_t i = 0; i < bits.size(); ++i)
            if (bits[i]) masked.push_back(i);
        const std::size_t pick = detail::pick_by_attachment(bits, p, masked, false, rng);
        bits[pick] = 0;
        --count;
    }
}

// Masking function: draws one view with the exact masked count
// round(N * m_corr) under the requested pattern.
inline MaskVector sample_mask(std::size_t n_tokens, const MaskPattern& pattern, double m_corr,
                              Rng& rng) {
    detail::validate_corruption(n_tokens, m_corr);
    const std::size_t count = masked_count_for(n_tokens, m_corr);
    MaskVector mv{n_tokens, std::vector<std::uint8_t>(n_tokens, 0), m_corr};
    if (pattern.kind == PatternKind::uniform) {
        std::vector<std::size_t> pool(n_tokens);
        std::iota(pool.begin(), pool.end(), std::size_t{0});
        for (std::size_t i : rng.sample(pool, count)) mv.bits[i] = 1;
    } else {
        mv.bits = block_union(pattern, n_tokens, count, rng);
        trim_block_mask(mv.bits, pattern, count, rng);
    }
    return mv;
}

// Quota planning. Feasibility in token counts: with c = round(N*m_corr) and
// total = round(N*m_pred), the plan needs c + (K-1) <= total <= min(N, K*c).
// Fresh tokens beyond view 1 are split as evenly as possible over views 2..K,
// remainder going to the earlier views.
inline DisjointViewPlan plan_view_quotas(std::size_t n_tokens, double m_corr, std::size_t k_views,
                                         double target_pred_rate, MaskPattern pattern = {}) {
    detail::validate_corruption(n_tokens, m_corr);
    if (k_views < 1) throw config_error("plan_view_quotas: k_views must be >= 1");
    const std::size_t c = masked_count_for(n_tokens, m_corr);
    const std::size_t total = round_half_up(static_cast<double>(n_tokens) * target_pred_rate);
    const std::size_t lo = c + (k_views - 1);
    const std::size_t hi = std::min(n_tokens, k_views * c);
    if (total < lo || total > hi) {
        const double n = static_cast<double>(n_tokens);
        throw infeasible_error(
            "plan_view_quotas: target_pred_rate=" + std::to_string(target_pred_rate) +
            " infeasible for N=" + std::to_string(n_tokens) + ", K=" + std::to_string(k_views) +
            ", m_corr=" + std::to_string(m_corr) + "; m_pred must lie in [m_corr+(K-1)/N, min(1, K*m_corr)] = [" +
            std::to_string(m_corr + static_cast<double>(k_views - 1) / n) + ", " +
            std::to_string(std::min(1.0, static_cast<double>(k_views) * m_corr)) +
            "] (token totals [" + std::to_string(lo) + ", " + std::to_string(hi) + "], requested " +
            std::to_string(total) + ")");
    }
    DisjointViewPlan plan;
    plan.n_tokens = n_tokens;
    plan.k_views = k_views;
    plan.corruption_rate = m_corr;
    plan.target_pred_rate = target_pred_rate;
    plan.pattern = pattern;
    plan.new_quota.assign(k_views, 0);
    plan.new_quota[0] = c;
    if (k_views > 1) {
        const std::size_t extra = total - c;
        const std::size_t base = extra / (k_views - 1);
        const std::size_t rem = extra % (k_views - 1);
        for (std::size_t k = 1; k < k_views; ++k) plan.new_quota[k] = base + (k <= rem ? 1 : 0);
    }
    return plan;
}

// Draws view k of a plan: exactly round(N*m_corr) masked tokens, of which
// exactly new_quota[k] come from the not-yet-covered pool. This satisfies the
// disjoint regulation M^k * (1 - cum^{k-1}) != 0 by construction.
inline MaskVector sample_disjoint_view(const DisjointViewPlan& plan, std::size_t view_index,
                                       const CumulativeMask& cum, Rng& rng) {
    if (view_index >= plan.k_views) {
        throw contract_error("sample_disjoint_view: view index " + std::to_string(view_index) +
                             " beyond K=" + std::to_string(plan.k_views));
    }
    if (cum.n_tokens != plan.n_tokens) {
        throw shape_error("sample_disjoint_view: cumulative mask N mismatch");
    }
    if (cum.k_views != view_index) {
        throw contract_error("sample_disjoint_view: cumulative mask holds " +
                             std::to_string(cum.k_views) + " views, expected " +
                             std::to_string(view_index));
    }
    const std::size_t n = plan.n_tokens;
    const std::size_t count = masked_count_for(n, plan.corruption_rate);
    const std::size_t quota = plan.new_quota[view_index];

    std::vector<std::size_t> fresh_pool, old_pool;
    for (std::size_t i = 0; i < n; ++i) (cum.covered[i] ? old_pool : fresh_pool).push_back(i);
    if (fresh_pool.size() < quota) {
        throw contract_error("sample_disjoint_view: unmasked pool (" +
                             std::to_string(fresh_pool.size()) + ") smaller than fresh quota (" +
                             std::to_string(quota) + ")");
    }
    if (count - quota > old_pool.size()) {
        throw contract_error("sample_disjoint_view: covered pool (" + std::to_string(old_pool.size()) +
                             ") smaller than repeat quota (" + std::to_string(count - quota) + ")");
    }

    MaskVector mv{n, std::vector<std::uint8_t>(n, 0), plan.corruption_rate};
    if (plan.pattern.kind == PatternKind::uniform) {
        for (std::size_t i : rng.sample(fresh_pool, quota)) mv.bits[i] = 1;
        for (std::size_t i : rng.sample(old_pool, count - quota)) mv.bits[i] = 1;
        return mv;
    }

    // Block pattern: shape the mask freely, then repair to the exact fresh
    // quota by swapping cells between the pools, preferring swaps that keep
    // the mask block-like.
    mv.bits = block_union(plan.pattern, n, count, rng);
    trim_block_mask(mv.bits, plan.pattern, count, rng);
    auto fresh_in_mask = [&] {
        std::size_t s = 0;
        for (std::size_t i = 0; i < n; ++i) s += (mv.bits[i] && !cum.covered[i]);
        return s;
    };
    std::size_t have = fresh_in_mask();
    while (have != quota) {
        const bool too_many_fresh = have > quota;
        // remove a low-attachment masked cell of the overfull kind...
        std::vector<std::size_t> removable, addable;
        for (std::size_t i = 0; i < n; ++i) {
            const bool fresh = !cum.covered[i];
            if (mv.bits[i] && fresh == too_many_fresh) removable.push_back(i);
            if (!mv.bits[i] && fresh != too_many_fresh) addable.push_back(i);
        }
        const std::size_t out_cell = detail::pick_by_attachment(mv.bits, plan.pattern, removable, false, rng);
        mv.bits[out_cell] = 0;
        // ...and add a high-attachment unmasked cell of the other kind
        const std::size_t in_cell = detail::pick_by_attachment(mv.bits, plan.pattern, addable, true, rng);
        mv.bits[in_cell] = 1;
        have += too_many_fresh ? std::size_t(-1) : std::size_t(1);
    }
    return mv;
}

// Fraction of tokens masked in at least one view.
inline double prediction_rate(const std::vector<MaskVector>& views) {
    if (views.empty()) throw contract_error("prediction_rate: no views");
    const std::size_t n = views[0].n_tokens;
    std::vector<std::uint8_t> u(n, 0);
    for (const auto& v : views) {
        if (v.n_tokens != n) throw shape_error("prediction_rate: mismatched N across views");
        for (std::size_t i = 0; i < n; ++i) u[i] |= v.bits[i];
    }
    return static_cast<double>(std::count(u.begin(), u.end(), std::uint8_t(1))) /
           static_cast<double>(n);
}

// Samples all K views of a plan in sequence.
inline std::vector<MaskVector> sample_plan_views(const DisjointViewPlan& plan, Rng& rng) {
    std::vector<MaskVector> views;
    views.reserve(plan.k_views);
    CumulativeMask cum = CumulativeMask::empty(plan.n_tokens);
    for (std::size_t k = 0; k < plan.k_views; ++k) {
        views.push_back(sample_disjoint_view(plan, k, cum, rng));
        cum = accumulate(std::move(cum), views.back());
    }
    return views;
}

// Debug export: "N K" header, then one '0'/'1' row per view.
inline void write_mask_views(std::ostream& os, const std::vector<MaskVector>& views) {
    if (views.empty()) throw contract_error("write_mask_views: no views");
    os << views[0].n_tokens << ' ' << views.size() << '\n';
    for (const auto& v : views) {
        for (std::uint8_t b : v.bits) os << (b ? '1' : '0');
        os << '\n';
    }
}

}  // namespace dmjd
