#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "mmgen/scenegen/types.hpp"

namespace mmgen::scenegen {

namespace detail {

// Object silhouettes are rasterized into a boolean mask over the square bbox.
// All geometry is integer/fixed arithmetic on pixel centers, so renders are
// bit-identical across runs.
inline std::vector<uint8_t> shape_mask(ShapeClass cls, int side) {
    std::vector<uint8_t> m(static_cast<size_t>(side) * side, 0);
    auto set = [&](int x, int y) {
        if (x >= 0 && x < side && y >= 0 && y < side) m[static_cast<size_t>(y) * side + x] = 1;
    };
    auto fill_rect = [&](double fx0, double fy0, double fx1, double fy1) {
        const int x0 = static_cast<int>(std::lround(fx0 * side));
        const int y0 = static_cast<int>(std::lround(fy0 * side));
        const int x1 = static_cast<int>(std::lround(fx1 * side));
        const int y1 = static_cast<int>(std::lround(fy1 * side));
        for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x) set(x, y);
    };
    auto fill_disk = [&](double fcx, double fcy, double frad) {
        const double cx = fcx * side, cy = fcy * side, r = frad * side;
        for (int y = 0; y < side; ++y)
            for (int x = 0; x < side; ++x) {
                const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
                if (dx * dx + dy * dy <= r * r) set(x, y);
            }
    };

    switch (cls) {
        case ShapeClass::Square:
            fill_rect(0, 0, 1, 1);
            break;
        case ShapeClass::Circle:
            fill_disk(0.5, 0.5, 0.5);
            break;
        case ShapeClass::Triangle:
            // apex at the top center, base along the bottom edge
            for (int y = 0; y < side; ++y) {
                const double half = 0.5 * (y + 1.0) / side;
                const int x0 = static_cast<int>(std::lround((0.5 - half) * side));
                const int x1 = static_cast<int>(std::lround((0.5 + half) * side));
                for (int x = x0; x < x1; ++x) set(x, y);
            }
            break;
        case ShapeClass::SpritePerson:
            fill_disk(0.5, 0.175, 0.16);       // head, centered in the top 35% band
            fill_rect(0.40, 0.26, 0.60, 0.38); // neck keeps the silhouette connected when tiny
            fill_rect(0.28, 0.35, 0.72, 0.72); // torso
            fill_rect(0.30, 0.72, 0.44, 1.0);  // legs
            fill_rect(0.56, 0.72, 0.70, 1.0);
            fill_rect(0.12, 0.38, 0.28, 0.52); // arms
            fill_rect(0.72, 0.38, 0.88, 0.52);
            break;
        case ShapeClass::SpriteDog:
            fill_rect(0.08, 0.38, 0.72, 0.72); // body
            fill_disk(0.80, 0.34, 0.15);       // head
            fill_rect(0.12, 0.72, 0.24, 0.95); // legs
            fill_rect(0.56, 0.72, 0.68, 0.95);
            fill_rect(0.02, 0.20, 0.10, 0.42); // tail
            break;
    }
    return m;
}

inline double texture_factor(const TextureSpec& tex, int gx, int gy, int res) {
    if (tex.kind == TextureSpec::Kind::Flat) return 1.0;
    const int cell = std::max(2, static_cast<int>(std::lround(tex.period_frac * res)));
    const int phase = static_cast<int>(std::lround(tex.phase_frac * cell));
    if (tex.kind == TextureSpec::Kind::Stripes) {
        const int coord = tex.orientation == 0 ? gy : gx;
        const int band = ((coord + phase) / std::max(1, cell / 2)) % 2;
        return band == 0 ? 1.0 : 0.55;
    }
    // dots: darker square dot in each cell
    const int dot = std::max(1, cell / 3);
    const int ox = ((gx + phase) % cell + cell) % cell;
    const int oy = ((gy + phase) % cell + cell) % cell;
    return (ox < dot && oy < dot) ? 0.55 : 1.0;
}

}  // namespace detail

// Deterministic rasterization of a SceneSpec. Objects are drawn in order;
// bboxes record the exact drawn square region per object.
inline ImageSample render_scene(const SceneSpec& spec, int resolution) {
    if (resolution != 32 && resolution != 64)
        throw ConfigError("render resolution must be 32 or 64");
    validate(spec);

    ImageSample out;
    out.caption = spec.caption;
    out.pixels = ImageF(resolution, resolution);
    const auto& bg = spec.style.background_rgb;
    out.pixels.fill(bg[0], bg[1], bg[2]);

    std::vector<Span> spans;
    build_caption(spec.objects, spec.style, &spans);

    for (size_t i = 0; i < spec.objects.size(); ++i) {
        const ObjectSpec& obj = spec.objects[i];
        const int side = static_cast<int>(std::lround(obj.size * resolution));
        int x0 = static_cast<int>(std::lround((obj.cx - obj.size / 2) * resolution));
        int y0 = static_cast<int>(std::lround((obj.cy - obj.size / 2) * resolution));
        x0 = std::clamp(x0, 0, resolution - side);
        y0 = std::clamp(y0, 0, resolution - side);
        const BBox bbox{x0, y0, x0 + side, y0 + side};

        const auto mask = detail::shape_mask(obj.cls, side);
        auto inside = [&](int lx, int ly) {
            return lx >= 0 && lx < side && ly >= 0 && ly < side &&
                   mask[static_cast<size_t>(ly) * side + lx];
        };

        const auto base = color_rgb(obj.color);
        for (int ly = 0; ly < side; ++ly) {
            for (int lx = 0; lx < side; ++lx) {
                if (!inside(lx, ly)) continue;
                const int gx = x0 + lx, gy = y0 + ly;
                double factor = detail::texture_factor(spec.style.texture, gx, gy, resolution) *
                                obj.shade;
                if (spec.style.outline_px > 0) {
                    bool boundary = false;
                    for (int d = 1; d <= spec.style.outline_px && !boundary; ++d)
                        boundary = !inside(lx - d, ly) || !inside(lx + d, ly) ||
                                   !inside(lx, ly - d) || !inside(lx, ly + d);
                    if (boundary) factor *= 0.35;
                }
                for (int c = 0; c < 3; ++c)
                    out.pixels.at(gy, gx, c) = std::clamp(
                        static_cast<float>(base[c] * factor + spec.style.palette_shift), 0.f, 1.f);
            }
        }

        Annotation ann;
        ann.word_span = spans[i];
        ann.bbox = bbox;
        if (obj.cls == ShapeClass::SpritePerson) {
            const int head_h = static_cast<int>(std::lround(0.35 * bbox.height()));
            ann.part_bboxes["head"] = BBox{bbox.x0, bbox.y0, bbox.x1, bbox.y0 + head_h};
        }
        out.annotations.push_back(std::move(ann));
    }

    out.pixels.quantize8();
    validate(out);
    return out;
}

}  // namespace mmgen::scenegen
