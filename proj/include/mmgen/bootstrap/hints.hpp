#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "mmgen/core/image.hpp"

namespace mmgen::bootstrap {

// Full-image conditioning channels for stage-1 prompts.
enum class HintKind { Edge, BlurSketch, DepthProxy };

inline HintKind hint_kind_from_string(const std::string& s) {
    if (s == "edge") return HintKind::Edge;
    if (s == "blur-sketch") return HintKind::BlurSketch;
    if (s == "downsample-depth-proxy") return HintKind::DepthProxy;
    throw ConfigError("unknown hint kind: " + s);
}

inline const char* hint_kind_name(HintKind k) {
    switch (k) {
        case HintKind::Edge: return "edge";
        case HintKind::BlurSketch: return "blur-sketch";
        case HintKind::DepthProxy: return "downsample-depth-proxy";
    }
    throw Error("bad hint kind");
}

namespace detail {

// Binary edge map: Sobel magnitude thresholded strictly above its 90th
// percentile. A uniform image (all-zero gradients) maps to all zeros.
inline ImageF edge_map(const ImageF& img) {
    const std::vector<float> mag = sobel_magnitude(img);
    std::vector<float> sorted = mag;
    std::sort(sorted.begin(), sorted.end());
    const float p90 = sorted[static_cast<size_t>(0.9 * (sorted.size() - 1))];
    ImageF out(img.h, img.w);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            const float v = mag[static_cast<size_t>(y) * img.w + x] > p90 ? 1.f : 0.f;
            out.at(y, x, 0) = out.at(y, x, 1) = out.at(y, x, 2) = v;
        }
    return out;
}

}  // namespace detail

inline ImageF make_hint_image(const ImageF& img, HintKind kind) {
    if (img.h != img.w) throw ShapeError("make_hint_image: square image required");
    switch (kind) {
        case HintKind::Edge:
            return detail::edge_map(img);
        case HintKind::BlurSketch:
            return detail::edge_map(gaussian_blur(img, 2.f));
        case HintKind::DepthProxy: {
            // luminance quantized to 4 levels in [0,1]; a stand-in for depth
            const std::vector<float> lum = luminance(img);
            ImageF out(img.h, img.w);
            for (int y = 0; y < img.h; ++y)
                for (int x = 0; x < img.w; ++x) {
                    const float l = std::min(lum[static_cast<size_t>(y) * img.w + x], 0.999f);
                    const float q = std::floor(l * 4.f) / 3.f;
                    out.at(y, x, 0) = out.at(y, x, 1) = out.at(y, x, 2) = q;
                }
            return out;
        }
    }
    throw Error("bad hint kind");
}

}  // namespace mmgen::bootstrap
