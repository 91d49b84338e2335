#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mmgen/bootstrap/prompt.hpp"
#include "mmgen/core/jsonio.hpp"
#include "mmgen/core/parallel.hpp"
#include "mmgen/core/png_io.hpp"
#include "mmgen/scenegen/dataset.hpp"

namespace mmgen::bootstrap {

struct PromptRecord {
    std::string id;
    MultimodalPrompt prompt;
    std::string source_sample_id;
};

inline bool operator==(const PromptRecord& a, const PromptRecord& b) {
    return a.id == b.id && a.source_sample_id == b.source_sample_id && a.prompt == b.prompt;
}

// Record layout: {id, segments:[{type:"text",text} | {type:"image",png_path,
// target_tokens,origin}], source_sample_id}. Image pixels live in PNG files
// referenced relative to the record's directory; writing is deterministic.
inline json serialize_prompt(const PromptRecord& rec, const std::filesystem::path& dir,
                             bool write_images = true) {
    json j;
    j["id"] = rec.id;
    j["source_sample_id"] = rec.source_sample_id;
    json segs = json::array();
    int img_index = 0;
    for (const auto& s : rec.prompt.segments) {
        json sj;
        if (s.type == SegmentType::Text) {
            sj["type"] = "text";
            sj["text"] = s.text;
        } else {
            const std::string rel = "crops/" + rec.id + "_" + std::to_string(img_index) + ".png";
            sj["type"] = "image";
            sj["png_path"] = rel;
            sj["target_tokens"] = s.target_tokens;
            sj["origin"] = origin_name(s.origin);
            if (write_images) {
                std::filesystem::create_directories(dir / "crops");
                write_png(dir / rel, s.pixels);
            }
            ++img_index;
        }
        segs.push_back(std::move(sj));
    }
    j["segments"] = std::move(segs);
    return j;
}

inline PromptRecord deserialize_prompt(const json& j, const std::filesystem::path& dir) {
    PromptRecord rec;
    try {
        rec.id = j.at("id").get<std::string>();
        rec.source_sample_id = j.at("source_sample_id").get<std::string>();
    } catch (const std::exception& e) {
        throw ParseError(std::string("prompt record header: ") + e.what());
    }
    const auto& segs = j.at("segments");
    for (size_t i = 0; i < segs.size(); ++i) {
        const auto& sj = segs[i];
        try {
            const std::string type = sj.at("type").get<std::string>();
            if (type == "text") {
                rec.prompt.segments.push_back(Segment::make_text(sj.at("text").get<std::string>()));
            } else if (type == "image") {
                const std::filesystem::path png = dir / sj.at("png_path").get<std::string>();
                if (!std::filesystem::exists(png))
                    throw ParseError("missing crop png " + png.string());
                rec.prompt.segments.push_back(
                    Segment::make_image(read_png(png), sj.at("target_tokens").get<int>(),
                                        origin_from_string(sj.at("origin").get<std::string>())));
            } else {
                throw ParseError("unknown segment type '" + type + "'");
            }
        } catch (const std::exception& e) {
            throw ParseError("prompt " + rec.id + " segment " + std::to_string(i) + ": " + e.what());
        }
    }
    validate_prompt(rec.prompt);
    return rec;
}

inline void save_prompts(const std::filesystem::path& dir, const std::vector<PromptRecord>& records) {
    std::filesystem::create_directories(dir);
    std::ofstream os(dir / "prompts.jsonl");
    if (!os) throw IoError("cannot open for write: " + (dir / "prompts.jsonl").string());
    for (const auto& r : records) os << serialize_prompt(r, dir).dump() << "\n";
    if (!os) throw IoError("write failed: " + (dir / "prompts.jsonl").string());
}

inline std::vector<PromptRecord> load_prompts(const std::filesystem::path& dir) {
    std::ifstream is(dir / "prompts.jsonl");
    if (!is) throw IoError("cannot open for read: " + (dir / "prompts.jsonl").string());
    std::vector<PromptRecord> out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            out.push_back(deserialize_prompt(json::parse(line), dir));
        } catch (const json::exception& e) {
            throw ParseError("prompts.jsonl line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

struct BootstrapStats {
    int64_t prompts = 0;
    int64_t skipped = 0;       // stage-2 samples with no usable detection
    double mean_det_iou = 1.0; // detected vs ground truth, averaged over boxes
};

// Full corpus pass: detect, filter, build and write one prompt per usable
// sample. Per-record rng streams derive from (seed, record index).
inline BootstrapStats run_bootstrap(const scenegen::DatasetManifest& manifest,
                                    const std::filesystem::path& out_dir, const BootstrapConfig& cfg,
                                    uint64_t seed, DetectorMode mode, double sigma = 0.0) {
    cfg.validate();
    const uint64_t root_seed = derive_seed(seed, "bootstrap");
    const int64_t n = static_cast<int64_t>(manifest.records.size());

    std::vector<std::optional<PromptRecord>> built(static_cast<size_t>(n));
    std::vector<double> iou_sum(static_cast<size_t>(n), 0.0);
    std::vector<int64_t> iou_count(static_cast<size_t>(n), 0);

    parallel_for(n, [&](int64_t i) {
        const auto& rec = manifest.records[static_cast<size_t>(i)];
        const scenegen::ImageSample sample = scenegen::load_sample(manifest, rec);
        Rng rng(derive_seed(root_seed, static_cast<uint64_t>(i)));
        Rng det_rng = rng.child("detect");
        const std::vector<Detection> dets =
            detect_objects(sample, mode, sigma, mode == DetectorMode::Jittered ? &det_rng : nullptr);
        for (size_t d = 0; d < dets.size(); ++d) {
            // jittered boxes keep their span, so the matching annotation is findable
            for (const auto& ann : sample.annotations)
                if (ann.word_span == dets[d].word_span) {
                    iou_sum[static_cast<size_t>(i)] += scenegen::iou(dets[d].bbox, ann.bbox);
                    iou_count[static_cast<size_t>(i)]++;
                }
        }
        const std::vector<Detection> kept = filter_crops(dets, sample.pixels.w, cfg);
        MultimodalPrompt prompt = make_multimodal_caption(sample, kept, cfg, rng);
        if (cfg.stage == 2 && prompt.crop_count() != 1) return;  // unusable for stage 2
        PromptRecord pr;
        pr.id = rec.id;
        pr.prompt = std::move(prompt);
        pr.source_sample_id = rec.id;
        built[static_cast<size_t>(i)] = std::move(pr);
    });

    std::vector<PromptRecord> records;
    BootstrapStats stats;
    double iou_total = 0.0;
    int64_t iou_n = 0;
    for (int64_t i = 0; i < n; ++i) {
        iou_total += iou_sum[static_cast<size_t>(i)];
        iou_n += iou_count[static_cast<size_t>(i)];
        if (built[static_cast<size_t>(i)])
            records.push_back(std::move(*built[static_cast<size_t>(i)]));
        else
            stats.skipped++;
    }
    stats.prompts = static_cast<int64_t>(records.size());
    stats.mean_det_iou = iou_n > 0 ? iou_total / static_cast<double>(iou_n) : 1.0;
    save_prompts(out_dir, records);
    return stats;
}

}  // namespace mmgen::bootstrap
