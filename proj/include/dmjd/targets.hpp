#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "dmjd/error.hpp"
#include "dmjd/image.hpp"

namespace dmjd {

enum class TargetKind { pixel, hog, external };

enum class NormMode { none, per_patch_standardize, layer_norm, l2 };

inline const char* target_kind_name(TargetKind k) {
    switch (k) {
        case TargetKind::pixel: return "pixel";
        case TargetKind::hog: return "hog";
        default: return "external";
    }
}

inline const char* norm_mode_name(NormMode m) {
    switch (m) {
        case NormMode::none: return "none";
        case NormMode::per_patch_standardize: return "per_patch_standardize";
        case NormMode::layer_norm: return "layer_norm";
        default: return "l2";
    }
}

// Per-token regression targets: one D_t-dimensional row per token.
template <typename T>
struct TargetTensor {
    std::size_t n_tokens = 0;
    std::size_t dim = 0;
    std::vector<T> values;  // n_tokens x dim, row-major
    TargetKind kind = TargetKind::pixel;
};

namespace detail {

constexpr double kNormEps = 1e-6;

// Per-token standardization; both per_patch_standardize and the
// non-parametric layer_norm mode reduce to this kernel.
template <typename T>
void standardize_rows(std::vector<T>& values, std::size_t rows, std::size_t dim) {
    for (std::size_t r = 0; r < rows; ++r) {
        T* row = values.data() + r * dim;
        T mu = T(0);
        for (std::size_t j = 0; j < dim; ++j) mu += row[j];
        mu /= T(dim);
        T var = T(0);
        for (std::size_t j = 0; j < dim; ++j) {
            const T c = row[j] - mu;
            var += c * c;
        }
        var /= T(dim);
        const T inv = T(1) / std::sqrt(var + T(kNormEps));
        for (std::size_t j = 0; j < dim; ++j) row[j] = (row[j] - mu) * inv;
    }
}

template <typename T>
void l2_normalize_rows(std::vector<T>& values, std::size_t rows, std::size_t dim) {
    for (std::size_t r = 0; r < rows; ++r) {
        T* row = values.data() + r * dim;
        T sq = T(0);
        for (std::size_t j = 0; j < dim; ++j) sq += row[j] * row[j];
        const T norm = std::sqrt(sq);
        if (norm > T(0)) {
            const T inv = T(1) / norm;
            for (std::size_t j = 0; j < dim; ++j) row[j] *= inv;
        }
    }
}

}  // namespace detail

template <typename T>
TargetTensor<T> normalize_target(TargetTensor<T> t, NormMode mode) {
    switch (mode) {
        case NormMode::none:
            break;
        case NormMode::per_patch_standardize:
        case NormMode::layer_norm:
            detail::standardize_rows(t.values, t.n_tokens, t.dim);
            break;
        case NormMode::l2:
            detail::l2_normalize_rows(t.values, t.n_tokens, t.dim);
            break;
    }
    return t;
}

// Flattened p x p x C patches in row-major grid order, with the requested
// per-token normalization applied.
template <typename T>
TargetTensor<T> pixel_target(const Image<T>& img, std::size_t patch_size, NormMode norm) {
    if (patch_size == 0 || img.h % patch_size != 0 || img.w % patch_size != 0) {
        throw shape_error("pixel_target: image " + std::to_string(img.h) + "x" + std::to_string(img.w) +
                          " not divisible by patch " + std::to_string(patch_size));
    }
    const std::size_t gh = img.h / patch_size, gw = img.w / patch_size;
    const std::size_t dim = patch_size * patch_size * img.c;
    TargetTensor<T> out{gh * gw, dim, std::vector<T>(gh * gw * dim), TargetKind::pixel};
    for (std::size_t py = 0; py < gh; ++py) {
        for (std::size_t px = 0; px < gw; ++px) {
            T* row = out.values.data() + (py * gw + px) * dim;
            std::size_t k = 0;
            for (std::size_t y = 0; y < patch_size; ++y)
                for (std::size_t x = 0; x < patch_size; ++x)
                    for (std::size_t ch = 0; ch < img.c; ++ch)
                        row[k++] = img.at(py * patch_size + y, px * patch_size + x, ch);
        }
    }
    return normalize_target(std::move(out), norm);
}

struct HogParams {
    std::size_t bins = 9;            // unsigned orientation bins over [0, 180)
    std::size_t cells_per_side = 2;  // c x c cells per patch
};

// Histogram-of-oriented-gradients descriptor per patch. Gradients use the
// [-1, 0, 1] kernel with replication padding at image borders; votes split
// bilinearly between the two nearest orientation bins; per-cell histograms
// are concatenated per channel and the whole patch descriptor is
// L2-normalized with an eps guard.
template <typename T>
TargetTensor<T> hog_target(const Image<T>& img, std::size_t patch_size, HogParams params = {}) {
    if (patch_size == 0 || img.h % patch_size != 0 || img.w % patch_size != 0) {
        throw shape_error("hog_target: image not divisible by patch size");
    }
    if (params.bins < 2) throw config_error("hog_target: need at least 2 orientation bins");
    if (params.cells_per_side == 0 || patch_size % params.cells_per_side != 0) {
        throw config_error("hog_target: patch size must be divisible by cells_per_side");
    }
    const std::size_t gh = img.h / patch_size, gw = img.w / patch_size;
    const std::size_t cells = params.cells_per_side;
    const std::size_t cell_px = patch_size / cells;
    const std::size_t dim = cells * cells * params.bins * img.c;
    TargetTensor<T> out{gh * gw, dim, std::vector<T>(gh * gw * dim, T(0)), TargetKind::hog};

    auto clamp_x = [&](std::ptrdiff_t x) {
        return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(x, 0, static_cast<std::ptrdiff_t>(img.w) - 1));
    };
    auto clamp_y = [&](std::ptrdiff_t y) {
        return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(y, 0, static_cast<std::ptrdiff_t>(img.h) - 1));
    };

    const double bin_width = 180.0 / static_cast<double>(params.bins);
    for (std::size_t y = 0; y < img.h; ++y) {
        for (std::size_t x = 0; x < img.w; ++x) {
            const std::size_t patch = (y / patch_size) * gw + (x / patch_size);
            const std::size_t cell_r = (y % patch_size) / cell_px;
            const std::size_t cell_c = (x % patch_size) / cell_px;
            const std::size_t cell = cell_r * cells + cell_c;
            for (std::size_t ch = 0; ch < img.c; ++ch) {
                const double gx = static_cast<double>(img.at(y, clamp_x(static_cast<std::ptrdiff_t>(x) + 1), ch)) -
                                  static_cast<double>(img.at(y, clamp_x(static_cast<std::ptrdiff_t>(x) - 1), ch));
                const double gy = static_cast<double>(img.at(clamp_y(static_cast<std::ptrdiff_t>(y) + 1), x, ch)) -
                                  static_cast<double>(img.at(clamp_y(static_cast<std::ptrdiff_t>(y) - 1), x, ch));
                const double mag = std::sqrt(gx * gx + gy * gy);
                if (mag == 0.0) continue;
                double theta = std::atan2(gy, gx) * 180.0 / std::numbers::pi;  // (-180, 180]
                if (theta < 0.0) theta += 180.0;                               // unsigned
                if (theta >= 180.0) theta -= 180.0;
                // continuous bin coordinate, centers at (b + 0.5) * bin_width
                const double coord = theta / bin_width - 0.5;
                const double lower = std::floor(coord);
                const double frac = coord - lower;
                const std::size_t b0 =
                    static_cast<std::size_t>((static_cast<std::ptrdiff_t>(lower) % static_cast<std::ptrdiff_t>(params.bins) +
                                              static_cast<std::ptrdiff_t>(params.bins)) %
                                             static_cast<std::ptrdiff_t>(params.bins));
                const std::size_t b1 = (b0 + 1) % params.bins;
                T* row = out.values.data() + patch * dim;
                T* hist = row + (ch * cells * cells + cell) * params.bins;
                hist[b0] += static_cast<T>(mag * (1.0 - frac));
                hist[b1] += static_cast<T>(mag * frac);
            }
        }
    }

    // block normalization over the whole patch descriptor
    for (std::size_t p = 0; p < out.n_tokens; ++p) {
        T* row = out.values.data() + p * dim;
        T sq = T(0);
        for (std::size_t j = 0; j < dim; ++j) sq += row[j] * row[j];
        const T inv = T(1) / std::sqrt(sq + T(detail::kNormEps));
        for (std::size_t j = 0; j < dim; ++j) row[j] *= inv;
    }
    return out;
}

// ---------------------------------------------------------------------------
// external embedding files: magic "DMJT", u32 images, u32 tokens, u32 dim,
// then images*tokens*dim little-endian f32, row-major
// ---------------------------------------------------------------------------

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
    char buf[4];
    std::memcpy(buf, &v, 4);  // little-endian hosts only, which this project assumes throughout
    os.write(buf, 4);
}

inline std::uint32_t read_u32(std::istream& is, const std::string& what) {
    char buf[4];
    if (!is.read(buf, 4)) throw format_error("unexpected end of file reading " + what);
    std::uint32_t v;
    std::memcpy(&v, buf, 4);
    return v;
}

}  // namespace detail

template <typename T>
void external_target_save(const std::string& path, const std::vector<TargetTensor<T>>& targets) {
    if (targets.empty()) throw contract_error("external_target_save: no targets");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw format_error("external_target_save: cannot open " + path);
    os.write("DMJT", 4);
    detail::write_u32(os, static_cast<std::uint32_t>(targets.size()));
    detail::write_u32(os, static_cast<std::uint32_t>(targets[0].n_tokens));
    detail::write_u32(os, static_cast<std::uint32_t>(targets[0].dim));
    for (const auto& t : targets) {
        for (T v : t.values) {
            const float f = static_cast<float>(v);
            os.write(reinterpret_cast<const char*>(&f), 4);
        }
    }
    if (!os) throw format_error("external_target_save: write failed for " + path);
}

// Loads stored embeddings verbatim. The declared token count and dimension
// must match the header; mismatches report expected vs. found.
template <typename T>
std::vector<TargetTensor<T>> external_target_load(const std::string& path, std::size_t n_tokens,
                                                  std::size_t dim) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw format_error("external_target_load: cannot open " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "DMJT", 4) != 0) {
        throw format_error("external_target_load: bad magic in " + path + ", expected \"DMJT\"");
    }
    const std::uint32_t images = detail::read_u32(is, "image count");
    const std::uint32_t file_tokens = detail::read_u32(is, "token count");
    const std::uint32_t file_dim = detail::read_u32(is, "dimension");
    if (file_tokens != n_tokens || file_dim != dim) {
        throw format_error("external_target_load: declared shape N=" + std::to_string(n_tokens) +
                           ", D=" + std::to_string(dim) + " but file holds N=" +
                           std::to_string(file_tokens) + ", D=" + std::to_string(file_dim));
    }
    std::vector<TargetTensor<T>> out;
    out.reserve(images);
    for (std::uint32_t i = 0; i < images; ++i) {
        TargetTensor<T> t{n_tokens, dim, std::vector<T>(n_tokens * dim), TargetKind::external};
        for (std::size_t j = 0; j < t.values.size(); ++j) {
            float f;
            if (!is.read(reinterpret_cast<char*>(&f), 4)) {
                throw format_error("external_target_load: truncated file, image " + std::to_string(i) +
                                   " of " + std::to_string(images) + " incomplete (row " +
                                   std::to_string(j / dim) + " of " + std::to_string(n_tokens) + ")");
            }
            t.values[j] = static_cast<T>(f);
        }
        out.push_back(std::move(t));
    }
    return out;
}

}  // namespace dmjd
