#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mmgen/core/rng.hpp"
#include "mmgen/scenegen/types.hpp"

namespace mmgen::scenegen {

// A content is the style-independent half of a scene: which objects appear
// and in which colors. Geometry (size/position/shade) is drawn per sample.
struct ContentTemplate {
    std::vector<std::pair<ShapeClass, std::string>> parts;  // (class, color name)
    double weight = 1.0;
    double size_min = 0.0, size_max = 0.0;  // 0 -> defaults by object count

    bool has_person() const {
        for (const auto& [cls, _] : parts)
            if (cls == ShapeClass::SpritePerson) return true;
        return false;
    }
};

inline std::pair<double, double> default_size_range(size_t n_objects) {
    switch (n_objects) {
        case 1: return {0.28, 0.50};
        case 2: return {0.20, 0.34};
        default: return {0.16, 0.26};
    }
}

// Person-containing templates carry 2x weight (training data is biased toward
// people). Distinct color+class pairs within one template keep caption word
// spans unambiguous.
inline std::vector<ContentTemplate> default_content_pool() {
    std::vector<ContentTemplate> pool;
    const auto& colors = palette();
    auto add = [&](std::vector<std::pair<ShapeClass, std::string>> parts) {
        ContentTemplate t;
        t.parts = std::move(parts);
        t.weight = 1.0;
        if (t.has_person()) t.weight = 2.0;
        pool.push_back(std::move(t));
    };

    // singles
    for (const auto& c : colors) add({{ShapeClass::SpritePerson, c.name}});
    for (size_t i = 0; i < 4; ++i) {
        add({{ShapeClass::Square, colors[i].name}});
        add({{ShapeClass::Circle, colors[(i + 1) % colors.size()].name}});
        add({{ShapeClass::Triangle, colors[(i + 2) % colors.size()].name}});
    }
    for (size_t i = 0; i < 3; ++i) add({{ShapeClass::SpriteDog, colors[(i + 3) % colors.size()].name}});

    // pairs
    const ShapeClass others[] = {ShapeClass::SpriteDog, ShapeClass::Square, ShapeClass::Circle,
                                 ShapeClass::Triangle};
    int ci = 0;
    for (ShapeClass other : others) {
        for (int k = 0; k < 2; ++k) {
            const auto& a = colors[static_cast<size_t>(ci) % colors.size()];
            const auto& b = colors[static_cast<size_t>(ci + 2) % colors.size()];
            add({{ShapeClass::SpritePerson, a.name}, {other, b.name}});
            ++ci;
        }
    }
    for (int k = 0; k < 4; ++k) {
        const auto& a = colors[static_cast<size_t>(k)];
        const auto& b = colors[static_cast<size_t>(k + 3) % colors.size()];
        add({{ShapeClass::SpritePerson, a.name}, {ShapeClass::SpritePerson, b.name}});
    }
    add({{ShapeClass::Square, "red"}, {ShapeClass::Circle, "blue"}});
    add({{ShapeClass::Circle, "green"}, {ShapeClass::Triangle, "orange"}});
    add({{ShapeClass::Triangle, "purple"}, {ShapeClass::Square, "yellow"}});
    add({{ShapeClass::SpriteDog, "orange"}, {ShapeClass::Square, "blue"}});
    add({{ShapeClass::SpriteDog, "yellow"}, {ShapeClass::Circle, "red"}});

    // triples
    add({{ShapeClass::SpritePerson, "red"}, {ShapeClass::SpriteDog, "yellow"}, {ShapeClass::Square, "blue"}});
    add({{ShapeClass::SpritePerson, "blue"}, {ShapeClass::Square, "green"}, {ShapeClass::Circle, "orange"}});
    add({{ShapeClass::SpritePerson, "green"}, {ShapeClass::SpriteDog, "red"}, {ShapeClass::Circle, "purple"}});
    add({{ShapeClass::SpritePerson, "orange"}, {ShapeClass::Triangle, "blue"}, {ShapeClass::SpriteDog, "green"}});
    add({{ShapeClass::Square, "purple"}, {ShapeClass::Circle, "yellow"}, {ShapeClass::Triangle, "red"}});
    add({{ShapeClass::Square, "orange"}, {ShapeClass::Circle, "purple"}, {ShapeClass::Triangle, "green"}});
    return pool;
}

inline std::vector<StyleSpec> default_style_pool() {
    std::vector<StyleSpec> pool;
    {
        StyleSpec s;
        s.name = "flat";
        s.background_rgb = {0.92f, 0.92f, 0.92f};
        s.outline_px = 1;
        s.texture.kind = TextureSpec::Kind::Flat;
        pool.push_back(s);
    }
    {
        StyleSpec s;
        s.name = "stripes";
        s.background_rgb = {0.88f, 0.88f, 0.92f};
        s.outline_px = 0;
        s.texture.kind = TextureSpec::Kind::Stripes;
        s.texture.period_frac = 0.25;
        pool.push_back(s);
    }
    {
        StyleSpec s;
        s.name = "dots";
        s.background_rgb = {0.95f, 0.92f, 0.88f};
        s.outline_px = 0;
        s.texture.kind = TextureSpec::Kind::Dots;
        s.texture.period_frac = 0.1875;
        pool.push_back(s);
    }
    {
        StyleSpec s;
        s.name = "noir";
        s.background_rgb = {0.10f, 0.10f, 0.12f};
        s.outline_px = 1;
        s.texture.kind = TextureSpec::Kind::Flat;
        s.palette_shift = -0.08f;
        pool.push_back(s);
    }
    return pool;
}

// Draws one scene. Content draws and style draws use separate child streams,
// so the same seed produces the same `objects` regardless of the style pool.
inline SceneSpec sample_scene(Rng& rng, const std::vector<ContentTemplate>& content_pool,
                              const std::vector<StyleSpec>& style_pool) {
    if (content_pool.empty() || style_pool.empty())
        throw ConfigError("sample_scene: empty pool");
    Rng rc = rng.child("content");
    Rng rs = rng.child("style");

    std::vector<double> weights;
    weights.reserve(content_pool.size());
    for (const auto& t : content_pool) weights.push_back(t.weight);
    const ContentTemplate& tpl = content_pool[rc.weighted_index(weights)];

    auto [lo, hi] = default_size_range(tpl.parts.size());
    if (tpl.size_min > 0) lo = tpl.size_min;
    if (tpl.size_max > 0) hi = tpl.size_max;

    SceneSpec spec;
    for (const auto& [cls, color] : tpl.parts) {
        ObjectSpec o;
        o.cls = cls;
        o.color = color;
        o.size = rc.uniform(lo, hi);
        o.shade = rc.uniform(0.7, 1.0);
        spec.objects.push_back(o);
    }

    const int kMaxAttempts = 100;
    bool placed = false;
    for (int attempt = 0; attempt < kMaxAttempts && !placed; ++attempt) {
        for (auto& o : spec.objects) {
            const double margin = o.size / 2 + 0.01;
            o.cx = rc.uniform(margin, 1.0 - margin);
            o.cy = rc.uniform(margin, 1.0 - margin);
        }
        placed = true;
        for (size_t i = 0; i < spec.objects.size() && placed; ++i)
            for (size_t j = i + 1; j < spec.objects.size() && placed; ++j)
                if (iou(spec.objects[i].frac_box(), spec.objects[j].frac_box()) >= 0.1)
                    placed = false;
    }
    if (!placed)
        throw PlacementError("could not place " + std::to_string(spec.objects.size()) +
                             " objects with pairwise IoU < 0.1 after 100 attempts");

    spec.style = style_pool[static_cast<size_t>(rs.uniform_int(0, static_cast<int64_t>(style_pool.size()) - 1))];
    spec.style.texture.orientation = static_cast<int>(rs.uniform_int(0, 1));
    spec.style.texture.phase_frac = rs.uniform();

    spec.caption = build_caption(spec.objects, spec.style);
    validate(spec);
    return spec;
}

}  // namespace mmgen::scenegen
