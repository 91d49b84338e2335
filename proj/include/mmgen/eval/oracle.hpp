#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mmgen/scenegen/render.hpp"

namespace mmgen::eval {

using scenegen::BBox;
using scenegen::ShapeClass;

// Scene backgrounds are near-neutral by construction, object colors strongly
// chromatic, and texture/outline shading preserves hue. A pixel classifies to
// the palette color with the highest cosine similarity; low-chroma pixels are
// background.
inline std::optional<std::string> classify_color(float r, float g, float b,
                                                 float chroma_threshold = 0.15f) {
    const float mx = std::max({r, g, b}), mn = std::min({r, g, b});
    if (mx - mn < chroma_threshold) return std::nullopt;
    double best = -1;
    const std::string* label = nullptr;
    for (const auto& c : scenegen::palette()) {
        const double dot = r * c.rgb[0] + g * c.rgb[1] + b * c.rgb[2];
        const double na = std::sqrt(double(r) * r + double(g) * g + double(b) * b);
        const double nb =
            std::sqrt(double(c.rgb[0]) * c.rgb[0] + c.rgb[1] * c.rgb[1] + c.rgb[2] * c.rgb[2]);
        const double cos = dot / (na * nb + 1e-9);
        if (cos > best) {
            best = cos;
            label = &c.name;
        }
    }
    return *label;
}

// A connected chromatic component of the image.
struct Region {
    BBox bbox;
    std::vector<uint8_t> mask;  // over bbox, row-major
    std::string color;          // majority palette color
    int pixels = 0;

    bool at(int y, int x) const {  // bbox-local
        return mask[static_cast<size_t>(y) * bbox.width() + x] != 0;
    }
};

// 4-connected components over the chroma mask; tiny specks are dropped.
inline std::vector<Region> detect_regions(const ImageF& img, int min_pixels = 8) {
    const int h = img.h, w = img.w;
    std::vector<int> label(static_cast<size_t>(h) * w, -1);
    std::vector<std::optional<std::string>> color(static_cast<size_t>(h) * w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            color[static_cast<size_t>(y) * w + x] =
                classify_color(img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2));

    std::vector<Region> regions;
    std::vector<std::pair<int, int>> stack;
    for (int y0 = 0; y0 < h; ++y0) {
        for (int x0 = 0; x0 < w; ++x0) {
            const size_t i0 = static_cast<size_t>(y0) * w + x0;
            if (!color[i0] || label[i0] >= 0) continue;
            const int id = static_cast<int>(regions.size());
            std::vector<std::pair<int, int>> members;
            std::map<std::string, int> votes;
            stack.push_back({y0, x0});
            label[i0] = id;
            while (!stack.empty()) {
                auto [y, x] = stack.back();
                stack.pop_back();
                members.push_back({y, x});
                votes[*color[static_cast<size_t>(y) * w + x]]++;
                const int dy[] = {-1, 1, 0, 0}, dx[] = {0, 0, -1, 1};
                for (int k = 0; k < 4; ++k) {
                    const int ny = y + dy[k], nx = x + dx[k];
                    if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
                    const size_t ni = static_cast<size_t>(ny) * w + nx;
                    if (!color[ni] || label[ni] >= 0) continue;
                    label[ni] = id;
                    stack.push_back({ny, nx});
                }
            }
            Region r;
            r.bbox = {w, h, 0, 0};
            for (auto [y, x] : members) {
                r.bbox.x0 = std::min(r.bbox.x0, x);
                r.bbox.y0 = std::min(r.bbox.y0, y);
                r.bbox.x1 = std::max(r.bbox.x1, x + 1);
                r.bbox.y1 = std::max(r.bbox.y1, y + 1);
            }
            r.pixels = static_cast<int>(members.size());
            r.mask.assign(static_cast<size_t>(r.bbox.width()) * r.bbox.height(), 0);
            for (auto [y, x] : members)
                r.mask[static_cast<size_t>(y - r.bbox.y0) * r.bbox.width() + (x - r.bbox.x0)] = 1;
            int best = 0;
            for (const auto& [name, n] : votes)
                if (n > best) {
                    best = n;
                    r.color = name;
                }
            regions.push_back(std::move(r));
        }
    }
    std::erase_if(regions, [&](const Region& r) { return r.pixels < min_pixels; });
    std::sort(regions.begin(), regions.end(),
              [](const Region& a, const Region& b) { return a.pixels > b.pixels; });
    return regions;
}

namespace detail {

struct ShapeTemplate {
    ShapeClass cls;
    std::vector<uint8_t> mask;   // 64x64 rasterization
    int x0, y0, x1, y1;          // tight content bounds within the raster
};

// Templates are compared content-box to content-box: the region's tight bbox
// against the silhouette's own tight bounds (sprites do not fill their
// square render box).
inline const std::vector<ShapeTemplate>& shape_templates() {
    static const std::vector<ShapeTemplate> tpls = [] {
        std::vector<ShapeTemplate> out;
        for (ShapeClass cls : scenegen::all_classes()) {
            ShapeTemplate t;
            t.cls = cls;
            t.mask = scenegen::detail::shape_mask(cls, 64);
            t.x0 = 64;
            t.y0 = 64;
            t.x1 = 0;
            t.y1 = 0;
            for (int y = 0; y < 64; ++y)
                for (int x = 0; x < 64; ++x)
                    if (t.mask[static_cast<size_t>(y) * 64 + x]) {
                        t.x0 = std::min(t.x0, x);
                        t.y0 = std::min(t.y0, y);
                        t.x1 = std::max(t.x1, x + 1);
                        t.y1 = std::max(t.y1, y + 1);
                    }
            out.push_back(std::move(t));
        }
        return out;
    }();
    return tpls;
}

}  // namespace detail

// Silhouette template match over tight content boxes; classify by best IoU.
inline std::pair<ShapeClass, double> classify_shape(const Region& region) {
    const int h = region.bbox.height(), w = region.bbox.width();
    ShapeClass best_cls = ShapeClass::Square;
    double best_iou = -1;
    for (const auto& tpl : detail::shape_templates()) {
        const int tw = tpl.x1 - tpl.x0, th = tpl.y1 - tpl.y0;
        int64_t inter = 0, uni = 0;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const int ty = tpl.y0 + std::min(th - 1, y * th / h);
                const int tx = tpl.x0 + std::min(tw - 1, x * tw / w);
                const bool a = region.at(y, x);
                const bool b = tpl.mask[static_cast<size_t>(ty) * 64 + tx] != 0;
                inter += a && b;
                uni += a || b;
            }
        const double iou = uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
        if (iou > best_iou) {
            best_iou = iou;
            best_cls = tpl.cls;
        }
    }
    return {best_cls, best_iou};
}

// Texture from brightness modulation inside the (eroded) region mask, using
// the per-pixel max channel so dark palette colors keep full contrast.
// Stripes modulate one axis, dots both, flat neither.
inline scenegen::TextureSpec::Kind classify_texture(const ImageF& img, const Region& region) {
    const int h = region.bbox.height(), w = region.bbox.width();
    auto inner = [&](int y, int x) {
        if (y < 0 || y >= h || x < 0 || x >= w) return false;
        return region.at(y, x);
    };
    std::vector<double> row_sum(static_cast<size_t>(h), 0), row_n(static_cast<size_t>(h), 0);
    std::vector<double> col_sum(static_cast<size_t>(w), 0), col_n(static_cast<size_t>(w), 0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            // erode by one pixel: outline pixels carry their own shading
            if (!inner(y, x) || !inner(y - 1, x) || !inner(y + 1, x) || !inner(y, x - 1) ||
                !inner(y, x + 1))
                continue;
            const int gy = region.bbox.y0 + y, gx = region.bbox.x0 + x;
            const double v = std::max({img.at(gy, gx, 0), img.at(gy, gx, 1), img.at(gy, gx, 2)});
            row_sum[static_cast<size_t>(y)] += v;
            row_n[static_cast<size_t>(y)] += 1;
            col_sum[static_cast<size_t>(x)] += v;
            col_n[static_cast<size_t>(x)] += 1;
        }
    auto profile_std = [](const std::vector<double>& sum, const std::vector<double>& n) {
        std::vector<double> prof;
        for (size_t i = 0; i < sum.size(); ++i)
            if (n[i] >= 2) prof.push_back(sum[i] / n[i]);
        if (prof.size() < 4) return 0.0;
        double mu = 0;
        for (double v : prof) mu += v;
        mu /= static_cast<double>(prof.size());
        double var = 0;
        for (double v : prof) var += (v - mu) * (v - mu);
        return std::sqrt(var / static_cast<double>(prof.size()));
    };
    const double ry = profile_std(row_sum, row_n);
    const double rx = profile_std(col_sum, col_n);
    const double hi = std::max(ry, rx), lo = std::min(ry, rx);
    if (hi < 0.025) return scenegen::TextureSpec::Kind::Flat;
    if (lo < 0.45 * hi) return scenegen::TextureSpec::Kind::Stripes;
    return scenegen::TextureSpec::Kind::Dots;
}

struct AdherenceResult {
    bool class_ok = false;
    bool color_ok = false;
    bool ok() const { return class_ok && color_ok; }
};

// Checks that the largest detected region matches the expected color+class.
inline AdherenceResult check_single_object(const ImageF& img, ShapeClass expected_cls,
                                           const std::string& expected_color) {
    const auto regions = detect_regions(img);
    AdherenceResult res;
    if (regions.empty()) return res;
    const Region& r = regions.front();
    res.color_ok = r.color == expected_color;
    res.class_ok = classify_shape(r).first == expected_cls;
    return res;
}

}  // namespace mmgen::eval
