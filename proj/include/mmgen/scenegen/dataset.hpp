#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mmgen/core/jsonio.hpp"
#include "mmgen/core/parallel.hpp"
#include "mmgen/core/png_io.hpp"
#include "mmgen/scenegen/render.hpp"
#include "mmgen/scenegen/sample.hpp"

namespace mmgen::scenegen {

struct DatasetRecord {
    std::string id;
    std::string image_path;  // relative to the manifest directory
    std::string caption;
    std::vector<Annotation> annotations;
    std::string style_name;
    uint64_t seed = 0;
};

struct DatasetManifest {
    std::filesystem::path root;
    std::vector<DatasetRecord> records;
};

inline json annotation_to_json(const Annotation& a) {
    json j;
    j["span"] = {a.word_span.begin, a.word_span.end};
    j["bbox"] = {a.bbox.x0, a.bbox.y0, a.bbox.x1, a.bbox.y1};
    json parts = json::object();
    for (const auto& [name, b] : a.part_bboxes) parts[name] = {b.x0, b.y0, b.x1, b.y1};
    j["parts"] = std::move(parts);
    return j;
}

inline Annotation annotation_from_json(const json& j) {
    Annotation a;
    a.word_span = {j.at("span")[0].get<int>(), j.at("span")[1].get<int>()};
    a.bbox = {j.at("bbox")[0].get<int>(), j.at("bbox")[1].get<int>(), j.at("bbox")[2].get<int>(),
              j.at("bbox")[3].get<int>()};
    for (const auto& [name, b] : j.at("parts").items())
        a.part_bboxes[name] = {b[0].get<int>(), b[1].get<int>(), b[2].get<int>(), b[3].get<int>()};
    return a;
}

inline json record_to_json(const DatasetRecord& r) {
    json j;
    j["id"] = r.id;
    j["image_path"] = r.image_path;
    j["caption"] = r.caption;
    json anns = json::array();
    for (const auto& a : r.annotations) anns.push_back(annotation_to_json(a));
    j["annotations"] = std::move(anns);
    j["style_name"] = r.style_name;
    j["seed"] = r.seed;
    return j;
}

inline DatasetRecord record_from_json(const json& j) {
    DatasetRecord r;
    r.id = j.at("id").get<std::string>();
    r.image_path = j.at("image_path").get<std::string>();
    r.caption = j.at("caption").get<std::string>();
    for (const auto& a : j.at("annotations")) r.annotations.push_back(annotation_from_json(a));
    r.style_name = j.at("style_name").get<std::string>();
    r.seed = j.at("seed").get<uint64_t>();
    return r;
}

inline void save_manifest(const std::filesystem::path& path, const std::vector<DatasetRecord>& records) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open for write: " + path.string());
    for (const auto& r : records) os << record_to_json(r).dump() << "\n";
    if (!os) throw IoError("write failed: " + path.string());
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open for read: " + path.string());
    DatasetManifest m;
    m.root = path.parent_path();
    std::string line;
    size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            m.records.push_back(record_from_json(json::parse(line)));
        } catch (const std::exception& e) {
            throw ParseError("manifest line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return m;
}

inline ImageSample load_sample(const DatasetManifest& m, const DatasetRecord& r) {
    ImageSample s;
    s.pixels = read_png(m.root / r.image_path);
    s.caption = r.caption;
    s.annotations = r.annotations;
    validate(s);
    return s;
}

// Generates n samples under out_dir: images/<id>.png plus manifest.jsonl.
// Record i is a pure function of derive_seed(seed, i) and the pools, so any
// execution order produces identical output.
inline DatasetManifest build_dataset(int64_t n, uint64_t seed, const std::filesystem::path& out_dir,
                                     int resolution,
                                     const std::vector<ContentTemplate>& content_pool =
                                         default_content_pool(),
                                     const std::vector<StyleSpec>& style_pool = default_style_pool()) {
    if (n < 1) throw ConfigError("build_dataset: n must be >= 1");
    const auto images_dir = out_dir / "images";
    const auto manifest_path = out_dir / "manifest.jsonl";
    try {
        std::filesystem::create_directories(images_dir);
        std::vector<DatasetRecord> records(static_cast<size_t>(n));
        parallel_for(n, [&](int64_t i) {
            const uint64_t rec_seed = derive_seed(seed, static_cast<uint64_t>(i));
            Rng rng(rec_seed);
            const SceneSpec spec = sample_scene(rng, content_pool, style_pool);
            const ImageSample sample = render_scene(spec, resolution);

            char idbuf[16];
            std::snprintf(idbuf, sizeof(idbuf), "%06lld", static_cast<long long>(i));
            DatasetRecord rec;
            rec.id = idbuf;
            rec.image_path = std::string("images/") + idbuf + ".png";
            rec.caption = sample.caption;
            rec.annotations = sample.annotations;
            rec.style_name = spec.style.name;
            rec.seed = rec_seed;
            write_png(out_dir / rec.image_path, sample.pixels);
            records[static_cast<size_t>(i)] = std::move(rec);
        });
        save_manifest(manifest_path, records);
        DatasetManifest m;
        m.root = out_dir;
        m.records = std::move(records);
        return m;
    } catch (...) {
        // do not leave a partial dataset behind
        std::error_code ec;
        std::filesystem::remove_all(images_dir, ec);
        std::filesystem::remove(manifest_path, ec);
        throw;
    }
}

// Re-derives the SceneSpec that produced a record (the record stores its
// per-record seed). Used by evaluation to recover style parameters that are
// visible in pixels but absent from the caption.
inline SceneSpec rederive_scene(const DatasetRecord& rec,
                                const std::vector<ContentTemplate>& content_pool =
                                    default_content_pool(),
                                const std::vector<StyleSpec>& style_pool = default_style_pool()) {
    Rng rng(rec.seed);
    SceneSpec spec = sample_scene(rng, content_pool, style_pool);
    if (spec.caption != rec.caption)
        throw ConfigError("rederive_scene: pools do not match the dataset (caption mismatch)");
    return spec;
}

}  // namespace mmgen::scenegen
