#pragma once

#include <sstream>
#include <string>
#include <vector>

#include "mmgen/bootstrap/prompt.hpp"
#include "mmgen/eval/embedder.hpp"
#include "mmgen/eval/oracle.hpp"

namespace mmgen::eval {

// Reference for one crop segment: what it shows and which pixels to compare
// against. For the prompt-level score the reference is the stored segment;
// the detail score substitutes the full-resolution source crop.
struct CropRef {
    ShapeClass cls = ShapeClass::Square;
    std::string color;
    ImageF image;
};

namespace detail {

inline std::string first_word(const std::string& text) {
    std::istringstream is(text);
    std::string w;
    is >> w;
    return w;
}

inline std::string last_word(const std::string& text) {
    std::istringstream is(text);
    std::string w, last;
    while (is >> w) last = w;
    return last;
}

}  // namespace detail

// Recovers (class, color) per crop segment from the prompt structure: a crop
// sits immediately before the text containing its class word, and the
// grammar puts the color word right before that.
inline std::vector<CropRef> crop_refs_from_prompt(const bootstrap::MultimodalPrompt& prompt) {
    std::vector<CropRef> refs;
    const auto& segs = prompt.segments;
    for (size_t i = 0; i < segs.size(); ++i) {
        if (segs[i].type != bootstrap::SegmentType::Image ||
            segs[i].origin != bootstrap::ImageOrigin::Crop)
            continue;
        if (i + 1 >= segs.size() || segs[i + 1].type != bootstrap::SegmentType::Text)
            throw ConfigError("crop segment is not followed by text");
        CropRef ref;
        ref.cls = scenegen::class_from_word(detail::first_word(segs[i + 1].text));
        ref.color = i > 0 && segs[i - 1].type == bootstrap::SegmentType::Text
                        ? detail::last_word(segs[i - 1].text)
                        : std::string();
        ref.image = segs[i].pixels;
        refs.push_back(std::move(ref));
    }
    return refs;
}

// Mean embedder similarity between each reference crop and the best matching
// detected region of the same class in the generated image; an object with no
// matching region contributes the flagged no-match score of -1.
inline double mm_score_from_refs(const std::vector<CropRef>& refs, const ImageF& generated,
                                 const EmbedderModel& embedder) {
    if (refs.empty()) throw ConfigError("mm_prompt_score: prompt has no crop segments");
    const std::vector<Region> regions = detect_regions(generated);
    double total = 0;
    for (const auto& ref : refs) {
        const std::vector<float> ref_emb = embedder.embed(ref.image);
        double best = -1.0;
        bool found = false;
        for (const auto& region : regions) {
            if (classify_shape(region).first != ref.cls) continue;
            const ImageF patch = crop(generated, region.bbox.x0, region.bbox.y0, region.bbox.x1,
                                      region.bbox.y1);
            const double cos = EmbedderModel::cosine(ref_emb, embedder.embed(patch));
            if (!found || cos > best) best = cos;
            found = true;
        }
        total += found ? best : -1.0;
    }
    return total / static_cast<double>(refs.size());
}

inline double mm_prompt_score(const bootstrap::MultimodalPrompt& prompt, const ImageF& generated,
                              const EmbedderModel& embedder) {
    return mm_score_from_refs(crop_refs_from_prompt(prompt), generated, embedder);
}

}  // namespace mmgen::eval
