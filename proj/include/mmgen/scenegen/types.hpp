#pragma once

#include <array>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "mmgen/core/error.hpp"
#include "mmgen/core/image.hpp"

namespace mmgen::scenegen {

struct BBox {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;

    int width() const { return x1 - x0; }
    int height() const { return y1 - y0; }
    int64_t area() const { return static_cast<int64_t>(width()) * height(); }

    bool valid_within(int w, int h) const {
        return 0 <= x0 && x0 < x1 && x1 <= w && 0 <= y0 && y0 < y1 && y1 <= h;
    }
};

inline bool operator==(const BBox& a, const BBox& b) {
    return a.x0 == b.x0 && a.y0 == b.y0 && a.x1 == b.x1 && a.y1 == b.y1;
}

inline double iou(const BBox& a, const BBox& b) {
    const int ix0 = std::max(a.x0, b.x0), iy0 = std::max(a.y0, b.y0);
    const int ix1 = std::min(a.x1, b.x1), iy1 = std::min(a.y1, b.y1);
    const int64_t inter = static_cast<int64_t>(std::max(0, ix1 - ix0)) * std::max(0, iy1 - iy0);
    const int64_t uni = a.area() + b.area() - inter;
    return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

// Fractional box used during placement, before rasterization.
struct FracBox {
    double x0, y0, x1, y1;
};

inline double iou(const FracBox& a, const FracBox& b) {
    const double iw = std::max(0.0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
    const double ih = std::max(0.0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
    const double inter = iw * ih;
    const double uni = (a.x1 - a.x0) * (a.y1 - a.y0) + (b.x1 - b.x0) * (b.y1 - b.y0) - inter;
    return uni > 0 ? inter / uni : 0.0;
}

enum class ShapeClass { Square, Circle, Triangle, SpritePerson, SpriteDog };

inline const char* class_word(ShapeClass c) {
    switch (c) {
        case ShapeClass::Square: return "square";
        case ShapeClass::Circle: return "circle";
        case ShapeClass::Triangle: return "triangle";
        case ShapeClass::SpritePerson: return "person";
        case ShapeClass::SpriteDog: return "dog";
    }
    throw Error("bad shape class");
}

inline ShapeClass class_from_word(const std::string& w) {
    if (w == "square") return ShapeClass::Square;
    if (w == "circle") return ShapeClass::Circle;
    if (w == "triangle") return ShapeClass::Triangle;
    if (w == "person") return ShapeClass::SpritePerson;
    if (w == "dog") return ShapeClass::SpriteDog;
    throw ParseError("unknown class word: " + w);
}

inline const std::vector<ShapeClass>& all_classes() {
    static const std::vector<ShapeClass> v = {ShapeClass::Square, ShapeClass::Circle,
                                              ShapeClass::Triangle, ShapeClass::SpritePerson,
                                              ShapeClass::SpriteDog};
    return v;
}

struct NamedColor {
    std::string name;
    std::array<float, 3> rgb;
};

inline const std::vector<NamedColor>& palette() {
    static const std::vector<NamedColor> v = {
        {"red", {0.90f, 0.10f, 0.10f}},    {"green", {0.10f, 0.75f, 0.15f}},
        {"blue", {0.15f, 0.20f, 0.90f}},   {"yellow", {0.95f, 0.85f, 0.10f}},
        {"purple", {0.60f, 0.15f, 0.80f}}, {"orange", {0.95f, 0.55f, 0.10f}},
    };
    return v;
}

inline std::array<float, 3> color_rgb(const std::string& name) {
    for (const auto& c : palette())
        if (c.name == name) return c.rgb;
    throw ParseError("unknown color: " + name);
}

struct TextureSpec {
    enum class Kind { Flat, Stripes, Dots };
    Kind kind = Kind::Flat;
    double period_frac = 0.125;  // pattern cell size as a fraction of the canvas
    int orientation = 0;         // stripes: 0 horizontal bands, 1 vertical
    double phase_frac = 0.0;     // pattern offset in cell units, [0,1)
};

inline const char* texture_name(TextureSpec::Kind k) {
    switch (k) {
        case TextureSpec::Kind::Flat: return "flat";
        case TextureSpec::Kind::Stripes: return "stripes";
        case TextureSpec::Kind::Dots: return "dots";
    }
    throw Error("bad texture kind");
}

struct StyleSpec {
    std::string name;  // the word used in the caption's style clause
    std::array<float, 3> background_rgb = {0.92f, 0.92f, 0.92f};
    int outline_px = 1;
    TextureSpec texture;
    float palette_shift = 0.f;  // added to object color channels
};

struct ObjectSpec {
    ShapeClass cls = ShapeClass::Square;
    std::string color;   // palette name
    double size = 0.3;   // side of the square bbox as a canvas fraction, in (0.1, 0.6)
    double cx = 0.5, cy = 0.5;
    double shade = 1.0;  // per-instance brightness; not described by the caption

    FracBox frac_box() const { return {cx - size / 2, cy - size / 2, cx + size / 2, cy + size / 2}; }
};

struct SceneSpec {
    std::vector<ObjectSpec> objects;
    StyleSpec style;
    std::string caption;
};

struct Span {
    int begin = 0, end = 0;  // character interval [begin, end)
};

inline bool operator==(const Span& a, const Span& b) { return a.begin == b.begin && a.end == b.end; }

struct Annotation {
    Span word_span;
    BBox bbox;
    std::map<std::string, BBox> part_bboxes;
};

inline bool operator==(const Annotation& a, const Annotation& b) {
    return a.word_span == b.word_span && a.bbox == b.bbox && a.part_bboxes == b.part_bboxes;
}

struct ImageSample {
    ImageF pixels;
    std::string caption;
    std::vector<Annotation> annotations;
};

// Builds the fixed-grammar caption and the class-word span per object:
// "a {color} {class}[ and a {color} {class}...] in {style} style".
inline std::string build_caption(const std::vector<ObjectSpec>& objects, const StyleSpec& style,
                                 std::vector<Span>* spans = nullptr) {
    std::string caption;
    if (spans) spans->clear();
    for (size_t i = 0; i < objects.size(); ++i) {
        caption += (i == 0) ? "a " : " and a ";
        caption += objects[i].color;
        caption += ' ';
        const std::string word = class_word(objects[i].cls);
        if (spans) spans->push_back({static_cast<int>(caption.size()),
                                     static_cast<int>(caption.size() + word.size())});
        caption += word;
    }
    caption += " in " + style.name + " style";
    return caption;
}

inline void validate(const SceneSpec& spec) {
    if (spec.objects.empty() || spec.objects.size() > 4)
        throw ConfigError("scene must have 1-4 objects");
    for (const auto& o : spec.objects) {
        if (!(o.size > 0.1 && o.size < 0.6)) throw ConfigError("object size out of (0.1, 0.6)");
        const FracBox b = o.frac_box();
        if (b.x0 < 0 || b.y0 < 0 || b.x1 > 1 || b.y1 > 1)
            throw ConfigError("object bbox leaves the canvas");
        color_rgb(o.color);
    }
    // each color+class mention must be unique so word spans are unambiguous
    for (size_t i = 0; i < spec.objects.size(); ++i)
        for (size_t j = i + 1; j < spec.objects.size(); ++j)
            if (spec.objects[i].cls == spec.objects[j].cls &&
                spec.objects[i].color == spec.objects[j].color)
                throw ConfigError("duplicate color+class pair in scene");
    if (spec.caption != build_caption(spec.objects, spec.style))
        throw ConfigError("caption does not match the grammar for its objects");
}

inline void validate(const ImageSample& s) {
    if (s.pixels.h != s.pixels.w) throw ConfigError("sample image must be square");
    for (const auto& a : s.annotations) {
        if (a.word_span.begin < 0 || a.word_span.end > static_cast<int>(s.caption.size()) ||
            a.word_span.begin >= a.word_span.end)
            throw ConfigError("annotation span out of caption range");
        if (!a.bbox.valid_within(s.pixels.w, s.pixels.h))
            throw ConfigError("annotation bbox out of image bounds");
        for (const auto& [name, part] : a.part_bboxes) {
            if (part.x0 < a.bbox.x0 || part.y0 < a.bbox.y0 || part.x1 > a.bbox.x1 ||
                part.y1 > a.bbox.y1)
                throw ConfigError("part bbox '" + name + "' not inside object bbox");
        }
    }
}

}  // namespace mmgen::scenegen
