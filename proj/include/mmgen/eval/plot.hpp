#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "mmgen/core/image.hpp"

namespace mmgen::eval {

struct CurvePoint {
    double x = 0, y = 0, lo = 0, hi = 0;
};

// Minimal line chart with interval whiskers, rendered with the same raster
// primitives the rest of the project uses.
inline ImageF plot_curve(const std::vector<CurvePoint>& pts, int width = 480, int height = 320) {
    ImageF img(height, width);
    img.fill(1.f, 1.f, 1.f);
    if (pts.empty()) return img;
    const int mx = 48, my = 28;  // margins
    double x0 = pts[0].x, x1 = pts[0].x, y0 = pts[0].lo, y1 = pts[0].hi;
    for (const auto& p : pts) {
        x0 = std::min(x0, p.x);
        x1 = std::max(x1, p.x);
        y0 = std::min(y0, p.lo);
        y1 = std::max(y1, p.hi);
    }
    if (x1 == x0) x1 = x0 + 1;
    const double pad = std::max(0.05 * (y1 - y0), 1e-6);
    y0 -= pad;
    y1 += pad;

    auto px = [&](double x) {
        return mx + static_cast<int>((x - x0) / (x1 - x0) * (width - 2 * mx));
    };
    auto py = [&](double y) {
        return height - my - static_cast<int>((y - y0) / (y1 - y0) * (height - 2 * my));
    };
    auto set = [&](int x, int y, float r, float g, float b) {
        if (x < 0 || x >= img.w || y < 0 || y >= img.h) return;
        img.at(y, x, 0) = r;
        img.at(y, x, 1) = g;
        img.at(y, x, 2) = b;
    };
    auto line = [&](int xa, int ya, int xb, int yb, float r, float g, float b) {
        const int steps = std::max({std::abs(xb - xa), std::abs(yb - ya), 1});
        for (int i = 0; i <= steps; ++i) {
            const int x = xa + (xb - xa) * i / steps;
            const int y = ya + (yb - ya) * i / steps;
            set(x, y, r, g, b);
        }
    };

    // axes
    line(mx, my, mx, height - my, 0.2f, 0.2f, 0.2f);
    line(mx, height - my, width - mx, height - my, 0.2f, 0.2f, 0.2f);
    // interval whiskers then the mean curve
    for (const auto& p : pts) {
        const int x = px(p.x);
        line(x, py(p.lo), x, py(p.hi), 0.65f, 0.75f, 0.95f);
        line(x - 3, py(p.lo), x + 3, py(p.lo), 0.65f, 0.75f, 0.95f);
        line(x - 3, py(p.hi), x + 3, py(p.hi), 0.65f, 0.75f, 0.95f);
    }
    for (size_t i = 0; i + 1 < pts.size(); ++i)
        line(px(pts[i].x), py(pts[i].y), px(pts[i + 1].x), py(pts[i + 1].y), 0.85f, 0.25f, 0.2f);
    for (const auto& p : pts)
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) set(px(p.x) + dx, py(p.y) + dy, 0.6f, 0.1f, 0.1f);
    img.quantize8();
    return img;
}

// Tiles equally sized images into a grid, row-major, with a 2px gutter.
inline ImageF montage(const std::vector<ImageF>& images, int columns) {
    if (images.empty()) return ImageF(8, 8);
    const int cell_h = images[0].h, cell_w = images[0].w, gap = 2;
    const int cols = std::max(1, std::min<int>(columns, static_cast<int>(images.size())));
    const int rows = (static_cast<int>(images.size()) + cols - 1) / cols;
    ImageF out(rows * cell_h + (rows - 1) * gap, cols * cell_w + (cols - 1) * gap);
    out.fill(1.f, 1.f, 1.f);
    for (size_t i = 0; i < images.size(); ++i) {
        const int r = static_cast<int>(i) / cols, c = static_cast<int>(i) % cols;
        for (int y = 0; y < cell_h; ++y)
            for (int x = 0; x < cell_w; ++x)
                for (int ch = 0; ch < 3; ++ch)
                    out.at(r * (cell_h + gap) + y, c * (cell_w + gap) + x, ch) =
                        images[i].at(y, x, ch);
    }
    return out;
}

}  // namespace mmgen::eval
