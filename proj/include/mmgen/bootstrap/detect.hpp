#pragma once

#include <cmath>
#include <vector>

#include "mmgen/core/rng.hpp"
#include "mmgen/scenegen/types.hpp"

namespace mmgen::bootstrap {

using scenegen::BBox;
using scenegen::ImageSample;
using scenegen::Span;

struct Detection {
    Span word_span;
    BBox bbox;
    double score = 1.0;
};

enum class DetectorMode { Oracle, Jittered };

inline DetectorMode detector_from_string(const std::string& s) {
    if (s == "oracle") return DetectorMode::Oracle;
    if (s == "jittered") return DetectorMode::Jittered;
    throw ConfigError("unknown detector mode: " + s);
}

// Oracle mode returns the ground-truth annotations verbatim. Jittered mode
// perturbs each bbox edge by round(N(0, sigma*side)); draw order is
// x0, x1, y0, y1 per detection so an external re-simulation with the same
// seed reproduces the boxes exactly. Boxes that collapse to zero area after
// clamping are dropped.
inline std::vector<Detection> detect_objects(const ImageSample& sample, DetectorMode mode,
                                             double sigma = 0.0, Rng* rng = nullptr) {
    std::vector<Detection> dets;
    for (const auto& ann : sample.annotations) {
        Detection d;
        d.word_span = ann.word_span;
        d.bbox = ann.bbox;
        d.score = 1.0;
        if (mode == DetectorMode::Jittered) {
            if (!rng) throw ConfigError("jittered detector needs an rng");
            const double sw = sigma * ann.bbox.width();
            const double sh = sigma * ann.bbox.height();
            BBox b = ann.bbox;
            b.x0 += static_cast<int>(std::lround(rng->normal(0.0, sw)));
            b.x1 += static_cast<int>(std::lround(rng->normal(0.0, sw)));
            b.y0 += static_cast<int>(std::lround(rng->normal(0.0, sh)));
            b.y1 += static_cast<int>(std::lround(rng->normal(0.0, sh)));
            b.x0 = std::clamp(b.x0, 0, sample.pixels.w);
            b.x1 = std::clamp(b.x1, 0, sample.pixels.w);
            b.y0 = std::clamp(b.y0, 0, sample.pixels.h);
            b.y1 = std::clamp(b.y1, 0, sample.pixels.h);
            if (b.x1 <= b.x0 || b.y1 <= b.y0) continue;
            d.bbox = b;
        }
        dets.push_back(d);
    }
    return dets;
}

}  // namespace mmgen::bootstrap
