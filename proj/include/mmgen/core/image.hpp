#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "mmgen/core/error.hpp"
#include "mmgen/core/tensor.hpp"

namespace mmgen {

// Interleaved RGB float image, values in [0,1].
struct ImageF {
    int h = 0, w = 0;
    std::vector<float> px;  // h*w*3

    ImageF() = default;
    ImageF(int height, int width) : h(height), w(width), px(static_cast<size_t>(height) * width * 3, 0.f) {}

    float& at(int y, int x, int c) { return px[(static_cast<size_t>(y) * w + x) * 3 + c]; }
    float at(int y, int x, int c) const { return px[(static_cast<size_t>(y) * w + x) * 3 + c]; }

    void fill(float r, float g, float b) {
        for (size_t i = 0; i < px.size(); i += 3) {
            px[i] = r;
            px[i + 1] = g;
            px[i + 2] = b;
        }
    }

    bool same_size(const ImageF& o) const { return h == o.h && w == o.w; }

    // Snap all values onto the 8-bit grid so PNG round trips are exact.
    void quantize8() {
        for (auto& v : px) v = std::round(std::clamp(v, 0.f, 1.f) * 255.f) / 255.f;
    }
};

inline bool operator==(const ImageF& a, const ImageF& b) {
    return a.h == b.h && a.w == b.w && a.px == b.px;
}

inline ImageF crop(const ImageF& img, int x0, int y0, int x1, int y1) {
    if (x0 < 0 || y0 < 0 || x1 > img.w || y1 > img.h || x0 >= x1 || y0 >= y1)
        throw ShapeError("crop: region out of bounds");
    ImageF out(y1 - y0, x1 - x0);
    for (int y = 0; y < out.h; ++y)
        for (int x = 0; x < out.w; ++x)
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(y0 + y, x0 + x, c);
    return out;
}

// Center-pad to a square canvas with black pixels.
inline ImageF pad_to_square(const ImageF& img) {
    const int side = std::max(img.h, img.w);
    if (side == img.h && side == img.w) return img;
    ImageF out(side, side);
    const int oy = (side - img.h) / 2;
    const int ox = (side - img.w) / 2;
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            for (int c = 0; c < 3; ++c) out.at(oy + y, ox + x, c) = img.at(y, x, c);
    return out;
}

// Bilinear resample (align-corners=false convention).
inline ImageF resize_bilinear(const ImageF& img, int out_h, int out_w) {
    if (out_h < 1 || out_w < 1) throw ShapeError("resize: bad output size");
    ImageF out(out_h, out_w);
    const float sy = static_cast<float>(img.h) / out_h;
    const float sx = static_cast<float>(img.w) / out_w;
    for (int y = 0; y < out_h; ++y) {
        const float fy = std::clamp((y + 0.5f) * sy - 0.5f, 0.f, static_cast<float>(img.h - 1));
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, img.h - 1);
        const float wy = fy - y0;
        for (int x = 0; x < out_w; ++x) {
            const float fx = std::clamp((x + 0.5f) * sx - 0.5f, 0.f, static_cast<float>(img.w - 1));
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, img.w - 1);
            const float wx = fx - x0;
            for (int c = 0; c < 3; ++c) {
                const float top = img.at(y0, x0, c) * (1 - wx) + img.at(y0, x1, c) * wx;
                const float bot = img.at(y1, x0, c) * (1 - wx) + img.at(y1, x1, c) * wx;
                out.at(y, x, c) = top * (1 - wy) + bot * wy;
            }
        }
    }
    return out;
}

inline std::vector<float> luminance(const ImageF& img) {
    std::vector<float> out(static_cast<size_t>(img.h) * img.w);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            out[static_cast<size_t>(y) * img.w + x] =
                0.299f * img.at(y, x, 0) + 0.587f * img.at(y, x, 1) + 0.114f * img.at(y, x, 2);
    return out;
}

// Sobel gradient magnitude of the luminance channel (replicated borders).
inline std::vector<float> sobel_magnitude(const ImageF& img) {
    const std::vector<float> lum = luminance(img);
    std::vector<float> out(lum.size(), 0.f);
    auto l = [&](int y, int x) {
        y = std::clamp(y, 0, img.h - 1);
        x = std::clamp(x, 0, img.w - 1);
        return lum[static_cast<size_t>(y) * img.w + x];
    };
    for (int y = 0; y < img.h; ++y) {
        for (int x = 0; x < img.w; ++x) {
            const float gx = (l(y - 1, x + 1) + 2 * l(y, x + 1) + l(y + 1, x + 1)) -
                             (l(y - 1, x - 1) + 2 * l(y, x - 1) + l(y + 1, x - 1));
            const float gy = (l(y + 1, x - 1) + 2 * l(y + 1, x) + l(y + 1, x + 1)) -
                             (l(y - 1, x - 1) + 2 * l(y - 1, x) + l(y - 1, x + 1));
            out[static_cast<size_t>(y) * img.w + x] = std::sqrt(gx * gx + gy * gy);
        }
    }
    return out;
}

// Separable Gaussian blur, radius = ceil(2*sigma).
inline ImageF gaussian_blur(const ImageF& img, float sigma) {
    const int radius = std::max(1, static_cast<int>(std::ceil(2 * sigma)));
    std::vector<float> kern(static_cast<size_t>(2 * radius + 1));
    float total = 0;
    for (int i = -radius; i <= radius; ++i) {
        kern[static_cast<size_t>(i + radius)] = std::exp(-0.5f * i * i / (sigma * sigma));
        total += kern[static_cast<size_t>(i + radius)];
    }
    for (auto& k : kern) k /= total;

    ImageF tmp(img.h, img.w), out(img.h, img.w);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            for (int c = 0; c < 3; ++c) {
                float s = 0;
                for (int i = -radius; i <= radius; ++i)
                    s += kern[static_cast<size_t>(i + radius)] * img.at(y, std::clamp(x + i, 0, img.w - 1), c);
                tmp.at(y, x, c) = s;
            }
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            for (int c = 0; c < 3; ++c) {
                float s = 0;
                for (int i = -radius; i <= radius; ++i)
                    s += kern[static_cast<size_t>(i + radius)] * tmp.at(std::clamp(y + i, 0, img.h - 1), x, c);
                out.at(y, x, c) = s;
            }
    return out;
}

// Model-space conversion: [0,1] RGB image <-> [-1,1] tensor [3,H,W].
template <typename T>
Tensor<T> image_to_tensor(const ImageF& img) {
    Tensor<T> t({3, img.h, img.w});
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < img.h; ++y)
            for (int x = 0; x < img.w; ++x)
                t.data[static_cast<size_t>((c * img.h + y) * img.w + x)] =
                    static_cast<T>(img.at(y, x, c)) * T(2) - T(1);
    return t;
}

template <typename T>
ImageF tensor_to_image(const Tensor<T>& t) {
    if (t.rank() != 3 || t.shape[0] != 3) throw ShapeError("tensor_to_image: [3,H,W] required");
    const int h = static_cast<int>(t.shape[1]), w = static_cast<int>(t.shape[2]);
    ImageF img(h, w);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const double v = (static_cast<double>(t.data[static_cast<size_t>((c * h + y) * w + x)]) + 1.0) / 2.0;
                img.at(y, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
    return img;
}

}  // namespace mmgen
