#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "mmgen/bootstrap/detect.hpp"
#include "mmgen/bootstrap/hints.hpp"
#include "mmgen/core/image.hpp"
#include "mmgen/core/jsonio.hpp"

namespace mmgen::bootstrap {

enum class SegmentType { Text, Image };
enum class ImageOrigin { Crop, Hint };

inline const char* origin_name(ImageOrigin o) { return o == ImageOrigin::Crop ? "crop" : "hint"; }

inline ImageOrigin origin_from_string(const std::string& s) {
    if (s == "crop") return ImageOrigin::Crop;
    if (s == "hint") return ImageOrigin::Hint;
    throw ParseError("unknown image segment origin: " + s);
}

struct Segment {
    SegmentType type = SegmentType::Text;
    std::string text;                        // Text segments
    ImageF pixels;                           // Image segments
    int target_tokens = 0;                   // Image segments
    ImageOrigin origin = ImageOrigin::Crop;  // Image segments

    static Segment make_text(std::string t) {
        Segment s;
        s.type = SegmentType::Text;
        s.text = std::move(t);
        return s;
    }
    static Segment make_image(ImageF px, int tokens, ImageOrigin orig) {
        Segment s;
        s.type = SegmentType::Image;
        s.pixels = std::move(px);
        s.target_tokens = tokens;
        s.origin = orig;
        return s;
    }
};

struct MultimodalPrompt {
    std::vector<Segment> segments;

    std::string text() const {
        std::string out;
        for (const auto& s : segments)
            if (s.type == SegmentType::Text) out += s.text;
        return out;
    }

    int image_count() const {
        int n = 0;
        for (const auto& s : segments) n += s.type == SegmentType::Image;
        return n;
    }

    int crop_count() const {
        int n = 0;
        for (const auto& s : segments)
            n += s.type == SegmentType::Image && s.origin == ImageOrigin::Crop;
        return n;
    }
};

inline bool operator==(const Segment& a, const Segment& b) {
    if (a.type != b.type) return false;
    if (a.type == SegmentType::Text) return a.text == b.text;
    return a.origin == b.origin && a.target_tokens == b.target_tokens && a.pixels == b.pixels;
}

inline bool operator==(const MultimodalPrompt& a, const MultimodalPrompt& b) {
    return a.segments == b.segments;
}

struct BootstrapConfig {
    // 150x150 of a 1024x1024 image, expressed as an area fraction so the rule
    // survives rescaling; both bounds are inclusive.
    double min_crop_area_fraction = 0.0215;
    double max_crop_area_fraction = 0.75;
    int max_crops = 3;
    double head_substitution_prob = 0.70;
    double augment_prob = 0.20;
    double hint_prob = 0.30;
    int stage = 1;
    int target_tokens_stage1 = 16;
    int target_tokens_stage2 = 64;
    int patch_size = 4;

    int target_tokens() const { return stage == 2 ? target_tokens_stage2 : target_tokens_stage1; }

    void validate() const {
        auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
        if (!prob(head_substitution_prob) || !prob(augment_prob) || !prob(hint_prob))
            throw ConfigError("bootstrap probabilities must lie in [0,1]");
        if (!(min_crop_area_fraction > 0 && min_crop_area_fraction < max_crop_area_fraction &&
              max_crop_area_fraction <= 1.0))
            throw ConfigError("crop area fractions must satisfy 0 < min < max <= 1");
        if (stage != 1 && stage != 2) throw ConfigError("stage must be 1 or 2");
        if (max_crops < 1) throw ConfigError("max_crops must be >= 1");
    }

    json to_json() const {
        json j;
        j["min_crop_area_fraction"] = min_crop_area_fraction;
        j["max_crop_area_fraction"] = max_crop_area_fraction;
        j["max_crops"] = max_crops;
        j["head_substitution_prob"] = head_substitution_prob;
        j["augment_prob"] = augment_prob;
        j["hint_prob"] = hint_prob;
        j["stage"] = stage;
        j["target_tokens_stage1"] = target_tokens_stage1;
        j["target_tokens_stage2"] = target_tokens_stage2;
        j["patch_size"] = patch_size;
        return j;
    }

    static BootstrapConfig from_json(const json& j) {
        BootstrapConfig c;
        c.min_crop_area_fraction = j.at("min_crop_area_fraction").get<double>();
        c.max_crop_area_fraction = j.at("max_crop_area_fraction").get<double>();
        c.max_crops = j.at("max_crops").get<int>();
        c.head_substitution_prob = j.at("head_substitution_prob").get<double>();
        c.augment_prob = j.at("augment_prob").get<double>();
        c.hint_prob = j.at("hint_prob").get<double>();
        c.stage = j.at("stage").get<int>();
        c.target_tokens_stage1 = j.at("target_tokens_stage1").get<int>();
        c.target_tokens_stage2 = j.at("target_tokens_stage2").get<int>();
        c.patch_size = j.at("patch_size").get<int>();
        return c;
    }
};

// Conditioning images are fed to the encoder at a fixed square side so each
// contributes exactly `tokens` positions.
inline int crop_side_for_tokens(int tokens, int patch_size) {
    const int root = static_cast<int>(std::lround(std::sqrt(static_cast<double>(tokens))));
    if (root * root != tokens) throw ConfigError("tokens per image must be a perfect square");
    return root * patch_size;
}

// Keeps detections whose bbox area fraction lies in [min, max] (inclusive);
// input order is preserved.
inline std::vector<Detection> filter_crops(const std::vector<Detection>& dets, int image_side,
                                           const BootstrapConfig& cfg) {
    std::vector<Detection> out;
    const double denom = static_cast<double>(image_side) * image_side;
    for (const auto& d : dets) {
        const double frac = static_cast<double>(d.bbox.area()) / denom;
        if (frac >= cfg.min_crop_area_fraction && frac <= cfg.max_crop_area_fraction)
            out.push_back(d);
    }
    return out;
}

// Exactly one augmentation, applied with probability cfg.augment_prob:
// sub-crop to 80-95% area, horizontal flip, Gaussian noise (sigma 0.05,
// clamped), or grayscale. Output size can shrink for the sub-crop branch.
inline ImageF augment_crop(const ImageF& crop, Rng& rng, const BootstrapConfig& cfg) {
    if (crop.h < 1 || crop.w < 1) throw ShapeError("augment_crop: empty crop");
    if (!rng.bernoulli(cfg.augment_prob)) return crop;
    switch (rng.uniform_int(0, 3)) {
        case 0: {  // random sub-crop, 80-95% of the area; always strictly smaller
            const double area = rng.uniform(0.80, 0.95);
            const double f = std::sqrt(area);
            const int w = std::clamp(static_cast<int>(std::lround(crop.w * f)), 1,
                                     std::max(1, crop.w - 1));
            const int h = std::clamp(static_cast<int>(std::lround(crop.h * f)), 1,
                                     std::max(1, crop.h - 1));
            const int x0 = static_cast<int>(rng.uniform_int(0, crop.w - w));
            const int y0 = static_cast<int>(rng.uniform_int(0, crop.h - h));
            return mmgen::crop(crop, x0, y0, x0 + w, y0 + h);
        }
        case 1: {  // horizontal flip
            ImageF out(crop.h, crop.w);
            for (int y = 0; y < crop.h; ++y)
                for (int x = 0; x < crop.w; ++x)
                    for (int c = 0; c < 3; ++c) out.at(y, x, c) = crop.at(y, crop.w - 1 - x, c);
            return out;
        }
        case 2: {  // additive Gaussian noise
            ImageF out = crop;
            for (auto& v : out.px)
                v = std::clamp(v + static_cast<float>(rng.normal(0.0, 0.05)), 0.f, 1.f);
            return out;
        }
        default: {  // grayscale
            ImageF out = crop;
            for (int y = 0; y < crop.h; ++y)
                for (int x = 0; x < crop.w; ++x) {
                    const float l = 0.299f * crop.at(y, x, 0) + 0.587f * crop.at(y, x, 1) +
                                    0.114f * crop.at(y, x, 2);
                    out.at(y, x, 0) = out.at(y, x, 1) = out.at(y, x, 2) = l;
                }
            return out;
        }
    }
}

inline void validate_prompt(const MultimodalPrompt& p) {
    int crops = 0, hints = 0, tokens = -1;
    for (size_t i = 0; i < p.segments.size(); ++i) {
        const Segment& s = p.segments[i];
        if (s.type != SegmentType::Image) continue;
        if (tokens < 0) tokens = s.target_tokens;
        if (s.target_tokens != tokens)
            throw ConfigError("prompt image segments disagree on target tokens");
        if (s.origin == ImageOrigin::Crop) {
            ++crops;
        } else {
            ++hints;
            if (i != 0) throw ConfigError("hint segment must come first");
        }
    }
    if (crops > 3) throw ConfigError("prompt has more than 3 crop segments");
    if (hints > 1) throw ConfigError("prompt has more than one hint segment");
}

namespace detail {

inline std::string span_word(const std::string& caption, const Span& s) {
    return caption.substr(static_cast<size_t>(s.begin), static_cast<size_t>(s.end - s.begin));
}

// Head region for a person detection: the ground-truth part box when the
// span matches an annotation, otherwise the top 35% of the detected box.
inline BBox head_box_for(const ImageSample& sample, const Detection& det) {
    for (const auto& ann : sample.annotations)
        if (ann.word_span == det.word_span && ann.part_bboxes.count("head"))
            return ann.part_bboxes.at("head");
    BBox b = det.bbox;
    b.y1 = b.y0 + std::max(1, static_cast<int>(std::lround(0.35 * det.bbox.height())));
    return b;
}

// Crop, pad to square with black, resize to the conditioning side, then
// (maybe) augment; sub-crop augmentation is resized back to the target side.
inline ImageF prepare_crop(const ImageF& pixels, const BBox& box, int side, Rng& aug_rng,
                           const BootstrapConfig& cfg) {
    ImageF out = mmgen::crop(pixels, box.x0, box.y0, box.x1, box.y1);
    out = pad_to_square(out);
    out = resize_bilinear(out, side, side);
    out = augment_crop(out, aug_rng, cfg);
    if (out.h != side || out.w != side) out = resize_bilinear(out, side, side);
    out.quantize8();
    return out;
}

}  // namespace detail

// Builds the interleaved prompt for one sample. Stage 1 inserts up to
// max_crops detections (uniform, without replacement) plus an optional
// prepended hint image; stage 2 inserts exactly one crop, preferring person
// detections. Each crop segment lands immediately before the text containing
// its word; concatenating the text segments reproduces the caption exactly.
//
// Independent child rng streams are used per decision family ("select",
// "head", "augment", "hint") so the configured rates are directly
// Monte-Carlo testable.
// One selected detection plus the box that was actually cropped (the head box
// when substitution fired).
struct ChosenCrop {
    Span word_span;
    BBox used_box;
    bool head_used = false;
};

inline MultimodalPrompt make_multimodal_caption(const ImageSample& sample,
                                                const std::vector<Detection>& dets,
                                                const BootstrapConfig& cfg, Rng& rng,
                                                std::vector<ChosenCrop>* out_chosen = nullptr) {
    cfg.validate();
    // overlapping spans mean malformed annotations
    for (size_t i = 0; i < dets.size(); ++i)
        for (size_t j = i + 1; j < dets.size(); ++j) {
            const auto& a = dets[i].word_span;
            const auto& b = dets[j].word_span;
            if (std::max(a.begin, b.begin) < std::min(a.end, b.end))
                throw ConfigError("make_multimodal_caption: overlapping word spans");
        }

    Rng select_rng = rng.child("select");
    Rng head_rng = rng.child("head");
    Rng augment_rng = rng.child("augment");
    Rng hint_rng = rng.child("hint");

    // choose detections
    std::vector<size_t> chosen;
    if (cfg.stage == 2) {
        std::vector<size_t> persons, any;
        for (size_t i = 0; i < dets.size(); ++i) {
            any.push_back(i);
            if (detail::span_word(sample.caption, dets[i].word_span) == "person") persons.push_back(i);
        }
        const auto& pool = persons.empty() ? any : persons;
        if (!pool.empty())
            chosen.push_back(pool[static_cast<size_t>(
                select_rng.uniform_int(0, static_cast<int64_t>(pool.size()) - 1))]);
    } else {
        std::vector<size_t> idx(dets.size());
        for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        // partial Fisher-Yates: uniform draw without replacement
        const size_t k = std::min(static_cast<size_t>(cfg.max_crops), idx.size());
        for (size_t i = 0; i < k; ++i) {
            const size_t j = static_cast<size_t>(
                select_rng.uniform_int(static_cast<int64_t>(i), static_cast<int64_t>(idx.size()) - 1));
            std::swap(idx[i], idx[j]);
            chosen.push_back(idx[i]);
        }
    }
    std::sort(chosen.begin(), chosen.end(), [&](size_t a, size_t b) {
        return dets[a].word_span.begin < dets[b].word_span.begin;
    });

    const int side = crop_side_for_tokens(cfg.target_tokens(), cfg.patch_size);

    MultimodalPrompt prompt;
    if (cfg.stage == 1 && hint_rng.bernoulli(cfg.hint_prob)) {
        const auto kind = static_cast<HintKind>(hint_rng.uniform_int(0, 2));
        ImageF hint = resize_bilinear(make_hint_image(sample.pixels, kind), side, side);
        hint.quantize8();
        prompt.segments.push_back(Segment::make_image(std::move(hint), cfg.target_tokens(),
                                                      ImageOrigin::Hint));
    }

    if (out_chosen) out_chosen->clear();
    int cursor = 0;
    for (size_t ci : chosen) {
        const Detection& det = dets[ci];
        BBox box = det.bbox;
        bool head_used = false;
        if (detail::span_word(sample.caption, det.word_span) == "person" &&
            head_rng.bernoulli(cfg.head_substitution_prob)) {
            box = detail::head_box_for(sample, det);
            head_used = true;
        }
        if (out_chosen) out_chosen->push_back({det.word_span, box, head_used});
        if (det.word_span.begin > cursor)
            prompt.segments.push_back(Segment::make_text(
                sample.caption.substr(static_cast<size_t>(cursor),
                                      static_cast<size_t>(det.word_span.begin - cursor))));
        prompt.segments.push_back(Segment::make_image(
            detail::prepare_crop(sample.pixels, box, side, augment_rng, cfg), cfg.target_tokens(),
            ImageOrigin::Crop));
        cursor = det.word_span.begin;
    }
    if (cursor < static_cast<int>(sample.caption.size()))
        prompt.segments.push_back(Segment::make_text(sample.caption.substr(static_cast<size_t>(cursor))));

    validate_prompt(prompt);
    return prompt;
}

}  // namespace mmgen::bootstrap
