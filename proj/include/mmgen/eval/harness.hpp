#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mmgen/bootstrap/serialize.hpp"
#include "mmgen/eval/metrics.hpp"
#include "mmgen/eval/plot.hpp"
#include "mmgen/pipeline.hpp"

namespace mmgen::eval {

struct Aggregate {
    double mean = 0, lo = 0, hi = 0;
    int n = 0;

    json to_json() const {
        json j;
        j["mean"] = mean;
        j["lo"] = lo;
        j["hi"] = hi;
        j["n"] = n;
        return j;
    }
};

// Percentile bootstrap 95% interval; deterministic given the rng seed.
inline Aggregate bootstrap_ci(const std::vector<double>& xs, Rng& rng, int resamples = 2000) {
    Aggregate a;
    a.n = static_cast<int>(xs.size());
    if (xs.empty()) return a;
    double mu = 0;
    for (double v : xs) mu += v;
    a.mean = mu / static_cast<double>(xs.size());
    std::vector<double> means(static_cast<size_t>(resamples));
    for (int b = 0; b < resamples; ++b) {
        double s = 0;
        for (size_t i = 0; i < xs.size(); ++i)
            s += xs[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(xs.size()) - 1))];
        means[static_cast<size_t>(b)] = s / static_cast<double>(xs.size());
    }
    std::sort(means.begin(), means.end());
    a.lo = means[static_cast<size_t>(0.025 * (resamples - 1))];
    a.hi = means[static_cast<size_t>(0.975 * (resamples - 1))];
    return a;
}

struct PromptEval {
    std::string prompt_id;
    uint64_t seed = 0;
    double mm_score = 0;
    double detail_score = 0;
    bool class_ok = false;
    bool color_ok = false;

    json to_json() const {
        json j;
        j["prompt_id"] = prompt_id;
        j["seed"] = seed;
        j["mm_score"] = mm_score;
        j["detail_score"] = detail_score;
        j["class_ok"] = class_ok;
        j["color_ok"] = color_ok;
        return j;
    }
};

struct EvalReport {
    std::vector<PromptEval> records;
    std::map<std::string, Aggregate> aggregates;
    json config;

    // Aggregates are a pure function of the records plus the stored bootstrap
    // seed; recomputation must reproduce them exactly.
    static std::map<std::string, Aggregate> aggregate_records(const std::vector<PromptEval>& recs,
                                                              uint64_t bootstrap_seed) {
        std::vector<double> mm, detail, adherence;
        for (const auto& r : recs) {
            mm.push_back(r.mm_score);
            detail.push_back(r.detail_score);
            adherence.push_back(r.class_ok && r.color_ok ? 1.0 : 0.0);
        }
        std::map<std::string, Aggregate> out;
        Rng r1(derive_seed(bootstrap_seed, "mm_score"));
        out["mm_score"] = bootstrap_ci(mm, r1);
        Rng r2(derive_seed(bootstrap_seed, "detail_score"));
        out["detail_score"] = bootstrap_ci(detail, r2);
        Rng r3(derive_seed(bootstrap_seed, "adherence"));
        out["adherence"] = bootstrap_ci(adherence, r3);
        return out;
    }

    void finalize(uint64_t bootstrap_seed) {
        config["bootstrap_seed"] = bootstrap_seed;
        aggregates = aggregate_records(records, bootstrap_seed);
    }

    json to_json() const {
        json j;
        j["config"] = config;
        json recs = json::array();
        for (const auto& r : records) recs.push_back(r.to_json());
        j["records"] = std::move(recs);
        json ag = json::object();
        for (const auto& [name, a] : aggregates) ag[name] = a.to_json();
        j["aggregates"] = std::move(ag);
        return j;
    }
};

// One evaluation prompt plus everything needed to score it: the prompt as the
// model sees it, full-resolution reference crops, and the scene's style.
struct EvalCase {
    std::string id;
    bootstrap::MultimodalPrompt prompt;
    std::vector<CropRef> full_refs;
    scenegen::TextureSpec::Kind texture = scenegen::TextureSpec::Kind::Flat;
};

// Deterministic eval prompts from a dataset: oracle detections, no
// augmentation, no hints, no head substitution, so the prompt and references
// are a pure function of the record.
inline std::vector<EvalCase> build_eval_cases(const scenegen::DatasetManifest& m, int tokens,
                                              size_t max_cases, bool single_object_only) {
    bootstrap::BootstrapConfig cfg;
    cfg.stage = 1;
    cfg.target_tokens_stage1 = tokens;
    cfg.augment_prob = 0;
    cfg.hint_prob = 0;
    cfg.head_substitution_prob = 0;
    // scored objects must be large enough for the shape oracle (side >= 10px
    // at the 32px canvas), a stricter floor than the training-time crop filter
    cfg.min_crop_area_fraction = 100.0 / 1024.0;

    std::vector<EvalCase> cases;
    for (const auto& rec : m.records) {
        if (cases.size() >= max_cases) break;
        const scenegen::ImageSample s = scenegen::load_sample(m, rec);
        const auto dets = bootstrap::filter_crops(
            bootstrap::detect_objects(s, bootstrap::DetectorMode::Oracle), s.pixels.w, cfg);
        if (dets.empty()) continue;
        if (single_object_only && (s.annotations.size() != 1 || dets.size() != 1)) continue;

        Rng rng(derive_seed(rec.seed, "eval_prompt"));
        std::vector<bootstrap::ChosenCrop> chosen;
        EvalCase c;
        c.prompt = bootstrap::make_multimodal_caption(s, dets, cfg, rng, &chosen);
        if (c.prompt.crop_count() == 0) continue;
        c.id = rec.id;
        c.full_refs = crop_refs_from_prompt(c.prompt);
        for (size_t i = 0; i < chosen.size(); ++i) {
            const auto& b = chosen[i].used_box;
            c.full_refs[i].image = crop(s.pixels, b.x0, b.y0, b.x1, b.y1);
        }
        c.texture = scenegen::rederive_scene(rec).style.texture.kind;
        cases.push_back(std::move(c));
    }
    return cases;
}

struct ScoreOptions {
    int steps = 50;
    double guidance = 6.0;
    uint64_t bootstrap_seed = 0;
};

// Per-reference adherence: a region of the right class and color must exist.
inline std::pair<bool, bool> adherence_for_refs(const ImageF& generated,
                                                const std::vector<CropRef>& refs) {
    const auto regions = detect_regions(generated);
    bool all_class = true, all_color = true;
    for (const auto& ref : refs) {
        bool class_found = false, color_found = false;
        for (const auto& region : regions) {
            if (classify_shape(region).first != ref.cls) continue;
            class_found = true;
            color_found = color_found || region.color == ref.color;
        }
        all_class = all_class && class_found;
        all_color = all_color && color_found;
    }
    return {all_class, all_color};
}

// Samples every (case, seed) pair and scores it. Sampling parallelizes over
// pairs; records are assembled in (case, seed) order.
inline EvalReport score_suite(Pipeline<float>& p, const std::vector<EvalCase>& cases,
                              const std::vector<uint64_t>& seeds, const EmbedderModel& embedder,
                              const ScoreOptions& opt,
                              const std::optional<std::filesystem::path>& grids_dir = {}) {
    EvalReport report;
    report.config["steps"] = opt.steps;
    report.config["guidance"] = opt.guidance;
    report.config["cases"] = cases.size();
    const int64_t total = static_cast<int64_t>(cases.size() * seeds.size());
    std::vector<PromptEval> recs(static_cast<size_t>(total));
    std::vector<ImageF> images(static_cast<size_t>(total));
    parallel_for(total, [&](int64_t k) {
        const auto& c = cases[static_cast<size_t>(k) / seeds.size()];
        const uint64_t seed = seeds[static_cast<size_t>(k) % seeds.size()];
        diffuser::Sampler<float> sampler(p.enc, p.unet, p.sched);
        const ImageF img = sampler.sample(c.prompt, opt.steps, static_cast<float>(opt.guidance), seed);
        PromptEval pe;
        pe.prompt_id = c.id;
        pe.seed = seed;
        pe.mm_score = mm_prompt_score(c.prompt, img, embedder);
        pe.detail_score = mm_score_from_refs(c.full_refs, img, embedder);
        const auto [class_ok, color_ok] = adherence_for_refs(img, c.full_refs);
        pe.class_ok = class_ok;
        pe.color_ok = color_ok;
        recs[static_cast<size_t>(k)] = std::move(pe);
        images[static_cast<size_t>(k)] = img;
    });
    report.records = std::move(recs);
    report.finalize(opt.bootstrap_seed);
    if (grids_dir) {
        std::filesystem::create_directories(*grids_dir);
        for (size_t ci = 0; ci < cases.size(); ++ci) {
            std::vector<ImageF> row(images.begin() + static_cast<int64_t>(ci * seeds.size()),
                                    images.begin() + static_cast<int64_t>((ci + 1) * seeds.size()));
            write_png(*grids_dir / (cases[ci].id + ".png"), montage(row, static_cast<int>(seeds.size())));
        }
    }
    return report;
}

// ---------------------------------------------------------------------------
// Tokens-per-image ablation
// ---------------------------------------------------------------------------

struct AblationRow {
    int tokens = 0;
    Aggregate detail;
};

struct AblationResult {
    std::vector<AblationRow> rows;
    std::filesystem::path csv_path, plot_path;
};

// Scores detail preservation per tokens-per-image grid point, each with its
// own checkpoint. Evaluation prompts are rebuilt per grid point so the crops
// carry exactly that token budget.
inline AblationResult tokens_ablation(const std::map<int, std::filesystem::path>& checkpoints,
                                      const scenegen::DatasetManifest& eval_data,
                                      const std::vector<uint64_t>& seeds,
                                      const EmbedderModel& embedder, const ScoreOptions& opt,
                                      const std::filesystem::path& out_dir, size_t n_prompts) {
    if (checkpoints.size() < 3) throw ConfigError("tokens ablation needs at least 3 grid points");
    if (n_prompts < 20) throw ConfigError("tokens ablation needs at least 20 prompts");
    if (seeds.size() < 5) throw ConfigError("tokens ablation needs at least 5 seeds");
    std::string missing;
    for (const auto& [tokens, path] : checkpoints)
        if (!std::filesystem::exists(path / "manifest.json"))
            missing += (missing.empty() ? "" : ", ") + std::to_string(tokens);
    if (!missing.empty())
        throw ConfigError("tokens ablation: missing checkpoints for grid points " + missing);

    std::filesystem::create_directories(out_dir);
    AblationResult result;
    json per_point = json::object();
    for (const auto& [tokens, path] : checkpoints) {
        auto loaded = Pipeline<float>::load_checkpoint(path);
        if (loaded.pipeline->enc_cfg.tokens_per_image != tokens)
            throw ConfigError("checkpoint at grid point " + std::to_string(tokens) +
                              " was trained with tokens_per_image = " +
                              std::to_string(loaded.pipeline->enc_cfg.tokens_per_image));
        const auto cases = build_eval_cases(eval_data, tokens, n_prompts, false);
        if (cases.size() < n_prompts)
            throw ConfigError("eval dataset yields too few prompts for the ablation");
        const EvalReport rep = score_suite(*loaded.pipeline, cases, seeds, embedder, opt);
        AblationRow row;
        row.tokens = tokens;
        row.detail = rep.aggregates.at("detail_score");
        result.rows.push_back(row);
        per_point[std::to_string(tokens)] = rep.to_json();
    }

    result.csv_path = out_dir / "ablation.csv";
    std::ofstream csv(result.csv_path);
    csv << "tokens,detail_mean,detail_lo,detail_hi,n\n";
    std::vector<CurvePoint> pts;
    for (const auto& row : result.rows) {
        char line[128];
        std::snprintf(line, sizeof(line), "%d,%.9g,%.9g,%.9g,%d\n", row.tokens, row.detail.mean,
                      row.detail.lo, row.detail.hi, row.detail.n);
        csv << line;
        pts.push_back({static_cast<double>(row.tokens), row.detail.mean, row.detail.lo, row.detail.hi});
    }
    csv.close();
    result.plot_path = out_dir / "ablation.png";
    write_png(result.plot_path, plot_curve(pts));
    write_json_file(out_dir / "ablation_report.json", per_point);
    return result;
}

// ---------------------------------------------------------------------------
// Harmonization probe
// ---------------------------------------------------------------------------

struct HarmonizationCase {
    std::string id;
    bootstrap::MultimodalPrompt prompt;
    ShapeClass subject_cls = ShapeClass::Square;
    std::string subject_color;
    scenegen::TextureSpec::Kind target = scenegen::TextureSpec::Kind::Stripes;
    bool cross_source = false;  // subject crop pulled from a flat-styled image
};

namespace detail {

struct IndexedObject {
    const scenegen::DatasetRecord* rec = nullptr;
    scenegen::Annotation ann;
    ShapeClass cls = ShapeClass::Square;
    std::string color;
};

// per texture kind: objects available in records of that texture
inline std::map<std::string, std::vector<IndexedObject>> index_objects(
    const scenegen::DatasetManifest& m) {
    std::map<std::string, std::vector<IndexedObject>> by_texture;
    for (const auto& rec : m.records) {
        const auto spec = scenegen::rederive_scene(rec);
        const std::string tex = scenegen::texture_name(spec.style.texture.kind);
        for (size_t i = 0; i < rec.annotations.size(); ++i) {
            IndexedObject o;
            o.rec = &rec;
            o.ann = rec.annotations[i];
            o.cls = spec.objects[i].cls;
            o.color = spec.objects[i].color;
            by_texture[tex].push_back(std::move(o));
        }
    }
    return by_texture;
}

inline ImageF object_crop(const scenegen::DatasetManifest& m, const IndexedObject& o, int side) {
    const scenegen::ImageSample s = scenegen::load_sample(m, *o.rec);
    bootstrap::BootstrapConfig cfg;
    cfg.augment_prob = 0;
    Rng rng(0);
    return bootstrap::detail::prepare_crop(s.pixels, o.ann.bbox, side, rng, cfg);
}

}  // namespace detail

// Two-object prompts whose caption names a textured style. The style-source
// crop always comes from an image in the target style; the subject crop comes
// from a flat-styled image (cross-source) or from the target style itself
// (in-distribution control).
inline std::vector<HarmonizationCase> build_harmonization_cases(const scenegen::DatasetManifest& m,
                                                                int tokens, size_t per_arm) {
    const auto by_texture = detail::index_objects(m);
    const int side = bootstrap::crop_side_for_tokens(tokens, 4);
    std::vector<HarmonizationCase> cases;
    for (const char* target : {"stripes", "dots"}) {
        if (!by_texture.count(target) || !by_texture.count("flat")) continue;
        const auto& styled = by_texture.at(target);
        const auto& flat = by_texture.at("flat");
        size_t made = 0;
        for (size_t i = 0; i < styled.size() && made < per_arm; ++i) {
            for (const bool cross : {true, false}) {
                const auto& subject_pool = cross ? flat : styled;
                // pick a subject with a different (class,color) than the style source
                const detail::IndexedObject* subject = nullptr;
                for (size_t j = i; j < subject_pool.size() + i; ++j) {
                    const auto& cand = subject_pool[j % subject_pool.size()];
                    if (cand.cls != styled[i].cls || cand.color != styled[i].color) {
                        subject = &cand;
                        break;
                    }
                }
                if (!subject) continue;
                HarmonizationCase c;
                c.subject_cls = subject->cls;
                c.subject_color = subject->color;
                c.target = target == std::string("stripes") ? scenegen::TextureSpec::Kind::Stripes
                                                            : scenegen::TextureSpec::Kind::Dots;
                c.cross_source = cross;
                c.id = std::string(target) + (cross ? "_cross_" : "_indist_") + std::to_string(made);
                const std::string cls_a = scenegen::class_word(subject->cls);
                const std::string cls_b = scenegen::class_word(styled[i].cls);
                using bootstrap::Segment;
                c.prompt.segments.push_back(Segment::make_text("a " + subject->color + " "));
                c.prompt.segments.push_back(Segment::make_image(
                    detail::object_crop(m, *subject, side), tokens, bootstrap::ImageOrigin::Crop));
                c.prompt.segments.push_back(
                    Segment::make_text(cls_a + " and a " + styled[i].color + " "));
                c.prompt.segments.push_back(Segment::make_image(
                    detail::object_crop(m, styled[i], side), tokens, bootstrap::ImageOrigin::Crop));
                c.prompt.segments.push_back(
                    Segment::make_text(cls_b + " in " + std::string(target) + " style"));
                cases.push_back(std::move(c));
            }
            ++made;
        }
    }
    return cases;
}

struct HarmonizationRecord {
    std::string id;
    bool cross_source = false;
    uint64_t seed = 0;
    bool subject_found = false;
    bool style_ok = false;      // oracle texture classifier on the subject region
    bool adherence_ok = false;  // class+color of the subject
    double style_sim = 0;       // embedder similarity to a reference render

    json to_json() const {
        json j;
        j["id"] = id;
        j["cross_source"] = cross_source;
        j["seed"] = seed;
        j["subject_found"] = subject_found;
        j["style_ok"] = style_ok;
        j["adherence_ok"] = adherence_ok;
        j["style_sim"] = style_sim;
        return j;
    }
};

struct HarmonizationReport {
    std::vector<HarmonizationRecord> records;
    double cross_style_rate = 0, indist_style_rate = 0;
    double cross_adherence = 0, indist_adherence = 0;

    json to_json() const {
        json j;
        json recs = json::array();
        for (const auto& r : records) recs.push_back(r.to_json());
        j["records"] = std::move(recs);
        j["cross_style_rate"] = cross_style_rate;
        j["indist_style_rate"] = indist_style_rate;
        j["cross_adherence"] = cross_adherence;
        j["indist_adherence"] = indist_adherence;
        return j;
    }
};

// Renders the subject in the target style as the embedder's style reference.
inline ImageF style_reference_render(ShapeClass cls, const std::string& color,
                                     scenegen::TextureSpec::Kind target) {
    scenegen::SceneSpec spec;
    scenegen::ObjectSpec o;
    o.cls = cls;
    o.color = color;
    o.size = 0.5;
    o.cx = o.cy = 0.5;
    spec.objects = {o};
    for (const auto& st : scenegen::default_style_pool())
        if (st.texture.kind == target) spec.style = st;
    spec.caption = scenegen::build_caption(spec.objects, spec.style);
    const auto sample = scenegen::render_scene(spec, 32);
    const auto& b = sample.annotations[0].bbox;
    return crop(sample.pixels, b.x0, b.y0, b.x1, b.y1);
}

inline HarmonizationReport harmonization_suite(Pipeline<float>& p,
                                               const std::vector<HarmonizationCase>& cases,
                                               const std::vector<uint64_t>& seeds,
                                               const EmbedderModel& embedder,
                                               const ScoreOptions& opt,
                                               const std::optional<std::filesystem::path>& grids_dir = {}) {
    HarmonizationReport report;
    if (seeds.empty() || cases.empty()) return report;
    const int64_t total = static_cast<int64_t>(cases.size() * seeds.size());
    report.records.resize(static_cast<size_t>(total));
    std::vector<ImageF> images(static_cast<size_t>(total));
    parallel_for(total, [&](int64_t k) {
        const auto& c = cases[static_cast<size_t>(k) / seeds.size()];
        const uint64_t seed = seeds[static_cast<size_t>(k) % seeds.size()];
        diffuser::Sampler<float> sampler(p.enc, p.unet, p.sched);
        const ImageF img = sampler.sample(c.prompt, opt.steps, static_cast<float>(opt.guidance), seed);
        HarmonizationRecord r;
        r.id = c.id;
        r.cross_source = c.cross_source;
        r.seed = seed;
        // the region generated for the subject: best shape match of its class
        const auto regions = detect_regions(img);
        const Region* subject = nullptr;
        double best = -1;
        for (const auto& region : regions) {
            const auto [cls, iou] = classify_shape(region);
            if (cls != c.subject_cls) continue;
            if (iou > best) {
                best = iou;
                subject = &region;
            }
        }
        if (subject) {
            r.subject_found = true;
            r.adherence_ok = subject->color == c.subject_color;
            r.style_ok = classify_texture(img, *subject) == c.target;
            const ImageF patch =
                crop(img, subject->bbox.x0, subject->bbox.y0, subject->bbox.x1, subject->bbox.y1);
            r.style_sim = EmbedderModel::cosine(
                embedder.embed(patch),
                embedder.embed(style_reference_render(c.subject_cls, c.subject_color, c.target)));
        }
        report.records[static_cast<size_t>(k)] = std::move(r);
        images[static_cast<size_t>(k)] = img;
    });

    int64_t cross_n = 0, indist_n = 0, cross_style = 0, indist_style = 0, cross_adh = 0,
            indist_adh = 0;
    for (const auto& r : report.records) {
        if (r.cross_source) {
            ++cross_n;
            cross_style += r.style_ok;
            cross_adh += r.subject_found && r.adherence_ok;
        } else {
            ++indist_n;
            indist_style += r.style_ok;
            indist_adh += r.subject_found && r.adherence_ok;
        }
    }
    if (cross_n) {
        report.cross_style_rate = static_cast<double>(cross_style) / static_cast<double>(cross_n);
        report.cross_adherence = static_cast<double>(cross_adh) / static_cast<double>(cross_n);
    }
    if (indist_n) {
        report.indist_style_rate = static_cast<double>(indist_style) / static_cast<double>(indist_n);
        report.indist_adherence = static_cast<double>(indist_adh) / static_cast<double>(indist_n);
    }
    if (grids_dir) {
        std::filesystem::create_directories(*grids_dir);
        for (size_t ci = 0; ci < cases.size(); ++ci) {
            std::vector<ImageF> row(images.begin() + static_cast<int64_t>(ci * seeds.size()),
                                    images.begin() + static_cast<int64_t>((ci + 1) * seeds.size()));
            write_png(*grids_dir / (cases[ci].id + ".png"), montage(row, static_cast<int>(seeds.size())));
        }
    }
    return report;
}

}  // namespace mmgen::eval
