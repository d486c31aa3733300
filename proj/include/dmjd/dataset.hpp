#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "dmjd/error.hpp"
#include "dmjd/image.hpp"
#include "dmjd/rng.hpp"

namespace dmjd {

// In-memory image collection; labels optional (class_count == 0 means none).
struct Dataset {
    std::size_t h = 0, w = 0, c = 0;
    std::vector<std::uint8_t> pixels;  // M * h * w * c
    std::vector<std::uint16_t> labels;
    std::size_t class_count = 0;

    std::size_t size() const { return h * w * c == 0 ? 0 : pixels.size() / (h * w * c); }
    bool labeled() const { return class_count > 0; }

    std::span<const std::uint8_t> image_bytes(std::size_t i) const {
        const std::size_t stride = h * w * c;
        return {pixels.data() + i * stride, stride};
    }

    template <typename T>
    Image<T> image(std::size_t i) const {
        return Image<T>::from_u8(image_bytes(i), h, w, c);
    }

    template <typename T>
    std::vector<Image<T>> images() const {
        std::vector<Image<T>> out;
        out.reserve(size());
        for (std::size_t i = 0; i < size(); ++i) out.push_back(image<T>(i));
        return out;
    }
};

namespace detail {

struct Rgb {
    double r, g, b;
};

// Five distinct hues; classes c and c + 5 share a hue and are separated by
// grating orientation only, which keeps a purely color-reading probe away
// from the ceiling.
inline Rgb toy_palette(std::size_t cls) {
    static const Rgb palette[5] = {
        {0.95, 0.25, 0.20}, {0.20, 0.80, 0.30}, {0.25, 0.35, 0.95}, {0.90, 0.80, 0.20}, {0.75, 0.25, 0.85}};
    return palette[cls % 5];
}

}  // namespace detail

// Procedural class-structured images: an oriented zero-mean grating (random
// phase and amplitude) plus a class-colored blob near the center, plus pixel
// noise. Class i of n_images is i mod class_count, so counts are balanced by
// construction when class_count divides n_images.
inline Dataset generate_toy_dataset(std::size_t n_images, std::size_t image_size,
                                    std::size_t class_count, std::uint64_t seed) {
    if (n_images == 0 || image_size == 0 || class_count == 0)
        throw config_error("generate_toy_dataset: all parameters must be positive");
    if (class_count > 65535) throw config_error("generate_toy_dataset: class_count exceeds u16 labels");
    Dataset ds;
    ds.h = ds.w = image_size;
    ds.c = 3;
    ds.class_count = class_count;
    ds.pixels.resize(n_images * image_size * image_size * 3);
    ds.labels.resize(n_images);
    Rng rng(seed);
    const double s = static_cast<double>(image_size);
    for (std::size_t i = 0; i < n_images; ++i) {
        const std::size_t cls = i % class_count;
        ds.labels[i] = static_cast<std::uint16_t>(cls);
        const double theta = std::numbers::pi * static_cast<double>(cls) / static_cast<double>(class_count);
        const double cycles = 3.0 + static_cast<double>(cls % 3);
        const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const double amp = rng.uniform(0.22, 0.38);
        const auto hue = detail::toy_palette(cls);
        const double blob_sigma = rng.uniform(0.14, 0.20) * s;
        const double blob_cx = 0.5 * s + rng.uniform(-0.1, 0.1) * s;
        const double blob_cy = 0.5 * s + rng.uniform(-0.1, 0.1) * s;
        const double blob_amp = rng.uniform(0.30, 0.42);
        const double ct = std::cos(theta), st = std::sin(theta);
        std::uint8_t* img = ds.pixels.data() + i * image_size * image_size * 3;
        for (std::size_t y = 0; y < image_size; ++y) {
            for (std::size_t x = 0; x < image_size; ++x) {
                const double u = (static_cast<double>(x) * ct + static_cast<double>(y) * st) / s;
                const double grating = amp * std::sin(2.0 * std::numbers::pi * cycles * u + phase);
                const double dx = static_cast<double>(x) - blob_cx;
                const double dy = static_cast<double>(y) - blob_cy;
                const double blob = blob_amp * std::exp(-(dx * dx + dy * dy) / (2.0 * blob_sigma * blob_sigma));
                const double rgb[3] = {hue.r, hue.g, hue.b};
                for (std::size_t ch = 0; ch < 3; ++ch) {
                    const double noise = rng.uniform(-0.05, 0.05);
                    const double v = 0.45 + grating + blob * (rgb[ch] - 0.45) + noise;
                    const double clamped = std::min(1.0, std::max(0.0, v));
                    img[(y * image_size + x) * 3 + ch] =
                        static_cast<std::uint8_t>(std::floor(clamped * 255.0 + 0.5));
                }
            }
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// dataset file: magic "DMJD", u16 version, u32 M, H, W, C, class_count
// (class_count = 0 means unlabeled), M*H*W*C u8 pixels, M u16 labels when
// labeled. All integers little-endian.
// ---------------------------------------------------------------------------

constexpr std::uint16_t kDatasetVersion = 1;

inline void save_dataset(const Dataset& ds, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw format_error("save_dataset: cannot open " + path);
    os.write("DMJD", 4);
    const std::uint16_t version = kDatasetVersion;
    os.write(reinterpret_cast<const char*>(&version), 2);
    const std::uint32_t fields[5] = {
        static_cast<std::uint32_t>(ds.size()), static_cast<std::uint32_t>(ds.h),
        static_cast<std::uint32_t>(ds.w), static_cast<std::uint32_t>(ds.c),
        static_cast<std::uint32_t>(ds.class_count)};
    os.write(reinterpret_cast<const char*>(fields), sizeof(fields));
    os.write(reinterpret_cast<const char*>(ds.pixels.data()),
             static_cast<std::streamsize>(ds.pixels.size()));
    if (ds.labeled()) {
        os.write(reinterpret_cast<const char*>(ds.labels.data()),
                 static_cast<std::streamsize>(ds.labels.size() * 2));
    }
    if (!os) throw format_error("save_dataset: write failed for " + path);
}

inline Dataset load_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw format_error("load_dataset: cannot open " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "DMJD", 4) != 0)
        throw format_error("load_dataset: bad magic at offset 0 in " + path + ", expected \"DMJD\"");
    std::uint16_t version;
    if (!is.read(reinterpret_cast<char*>(&version), 2))
        throw format_error("load_dataset: truncated at offset 4 (version)");
    if (version != kDatasetVersion)
        throw format_error("load_dataset: unsupported version " + std::to_string(version));
    std::uint32_t fields[5];
    if (!is.read(reinterpret_cast<char*>(fields), sizeof(fields)))
        throw format_error("load_dataset: truncated at offset 6 (header fields)");
    Dataset ds;
    const std::size_t m = fields[0];
    ds.h = fields[1];
    ds.w = fields[2];
    ds.c = fields[3];
    ds.class_count = fields[4];
    const std::size_t pixel_bytes = m * ds.h * ds.w * ds.c;
    ds.pixels.resize(pixel_bytes);
    if (!is.read(reinterpret_cast<char*>(ds.pixels.data()), static_cast<std::streamsize>(pixel_bytes))) {
        const std::size_t got = static_cast<std::size_t>(is.gcount());
        throw format_error("load_dataset: truncated pixel payload at offset " +
                           std::to_string(26 + got) + ", expected " + std::to_string(pixel_bytes) +
                           " bytes for " + std::to_string(m) + " images");
    }
    if (ds.class_count > 0) {
        ds.labels.resize(m);
        if (!is.read(reinterpret_cast<char*>(ds.labels.data()), static_cast<std::streamsize>(m * 2))) {
            const std::size_t got = static_cast<std::size_t>(is.gcount());
            throw format_error("load_dataset: truncated label payload at offset " +
                               std::to_string(26 + pixel_bytes + got));
        }
        for (std::size_t i = 0; i < m; ++i) {
            if (ds.labels[i] >= ds.class_count) {
                throw format_error("load_dataset: label " + std::to_string(ds.labels[i]) +
                                   " out of range for class_count " + std::to_string(ds.class_count) +
                                   " at offset " + std::to_string(26 + pixel_bytes + 2 * i));
            }
        }
    }
    return ds;
}

// Deterministic shuffle split; the validation slice takes the tail fraction.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(
    std::size_t n, double val_fraction, std::uint64_t split_seed) {
    if (val_fraction < 0.0 || val_fraction >= 1.0)
        throw config_error("split_indices: val_fraction must lie in [0,1)");
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    Rng rng(split_seed);
    rng.shuffle(idx);
    const std::size_t n_val = static_cast<std::size_t>(std::floor(static_cast<double>(n) * val_fraction));
    std::vector<std::size_t> val(idx.end() - static_cast<std::ptrdiff_t>(n_val), idx.end());
    idx.resize(n - n_val);
    return {std::move(idx), std::move(val)};
}

}  // namespace dmjd
