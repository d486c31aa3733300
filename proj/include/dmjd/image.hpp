#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dmjd/error.hpp"

namespace dmjd {

// Dense H x W x C image, row-major, channel-minor.
template <typename T>
struct Image {
    std::size_t h = 0, w = 0, c = 0;
    std::vector<T> data;

    static Image from_u8(std::span<const std::uint8_t> pixels, std::size_t h, std::size_t w,
                         std::size_t c) {
        if (pixels.size() != h * w * c) throw shape_error("Image::from_u8: pixel count mismatch");
        Image img{h, w, c, std::vector<T>(pixels.size())};
        for (std::size_t i = 0; i < pixels.size(); ++i)
            img.data[i] = static_cast<T>(pixels[i]) / T(255);
        return img;
    }

    T at(std::size_t y, std::size_t x, std::size_t ch) const { return data[(y * w + x) * c + ch]; }
    T& at(std::size_t y, std::size_t x, std::size_t ch) { return data[(y * w + x) * c + ch]; }

    Image hflip() const {
        Image out{h, w, c, std::vector<T>(data.size())};
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x)
                for (std::size_t ch = 0; ch < c; ++ch) out.at(y, x, ch) = at(y, w - 1 - x, ch);
        return out;
    }
};

}  // namespace dmjd
