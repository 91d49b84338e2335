#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "mmgen/bootstrap/serialize.hpp"
#include "mmgen/scenegen/render.hpp"
#include "testutil.hpp"

using namespace mmgen;
using namespace mmgen::bootstrap;
using namespace mmgen::scenegen;

namespace {

ImageSample person_sample() {
    SceneSpec spec;
    ObjectSpec o;
    o.cls = ShapeClass::SpritePerson;
    o.color = "blue";
    o.size = 0.45;
    o.cx = o.cy = 0.5;
    spec.objects = {o};
    spec.style = default_style_pool()[0];
    spec.caption = build_caption(spec.objects, spec.style);
    return render_scene(spec, 64);
}

ImageSample two_object_sample() {
    SceneSpec spec;
    ObjectSpec a;
    a.cls = ShapeClass::Square;
    a.color = "red";
    a.size = 0.3;
    a.cx = a.cy = 0.28;
    ObjectSpec b;
    b.cls = ShapeClass::Circle;
    b.color = "blue";
    b.size = 0.3;
    b.cx = b.cy = 0.72;
    spec.objects = {a, b};
    spec.style = default_style_pool()[0];
    spec.caption = build_caption(spec.objects, spec.style);
    return render_scene(spec, 64);
}

std::string read_file(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

}  // namespace

TEST(Detect, OracleReturnsAnnotations) {
    const ImageSample s = two_object_sample();
    const auto dets = detect_objects(s, DetectorMode::Oracle);
    ASSERT_EQ(dets.size(), 2u);
    for (size_t i = 0; i < 2; ++i) {
        EXPECT_TRUE(dets[i].bbox == s.annotations[i].bbox);
        EXPECT_TRUE(dets[i].word_span == s.annotations[i].word_span);
        EXPECT_EQ(dets[i].score, 1.0);
    }
}

TEST(Detect, JitterSigmaZeroEqualsOracle) {
    const ImageSample s = two_object_sample();
    Rng rng(5);
    const auto jit = detect_objects(s, DetectorMode::Jittered, 0.0, &rng);
    const auto ora = detect_objects(s, DetectorMode::Oracle);
    ASSERT_EQ(jit.size(), ora.size());
    for (size_t i = 0; i < jit.size(); ++i) EXPECT_TRUE(jit[i].bbox == ora[i].bbox);
}

TEST(Detect, JitteredMeanIouMatchesIndependentResimulation) {
    const auto dir = test::tmp_dir("boot_iou");
    const DatasetManifest m = build_dataset(1000, 31, dir, 32);

    BootstrapConfig cfg;
    const uint64_t seed = 99;
    const double sigma = 0.1;
    const auto out = dir / "prompts";
    const BootstrapStats stats = run_bootstrap(m, out, cfg, seed, DetectorMode::Jittered, sigma);

    // independent re-simulation of the jitter with the documented stream/draw order
    const uint64_t root = derive_seed(seed, "bootstrap");
    double total = 0;
    int64_t count = 0;
    for (size_t i = 0; i < m.records.size(); ++i) {
        const ImageSample s = load_sample(m, m.records[i]);
        Rng rng(derive_seed(root, static_cast<uint64_t>(i)));
        Rng det = rng.child("detect");
        for (const auto& ann : s.annotations) {
            BBox b = ann.bbox;
            const double sw = sigma * ann.bbox.width(), sh = sigma * ann.bbox.height();
            b.x0 += static_cast<int>(std::lround(det.normal(0, sw)));
            b.x1 += static_cast<int>(std::lround(det.normal(0, sw)));
            b.y0 += static_cast<int>(std::lround(det.normal(0, sh)));
            b.y1 += static_cast<int>(std::lround(det.normal(0, sh)));
            b.x0 = std::clamp(b.x0, 0, s.pixels.w);
            b.x1 = std::clamp(b.x1, 0, s.pixels.w);
            b.y0 = std::clamp(b.y0, 0, s.pixels.h);
            b.y1 = std::clamp(b.y1, 0, s.pixels.h);
            if (b.x1 <= b.x0 || b.y1 <= b.y0) continue;
            total += iou(b, ann.bbox);
            ++count;
        }
    }
    ASSERT_GT(count, 0);
    EXPECT_NEAR(stats.mean_det_iou, total / static_cast<double>(count), 0.01);
    EXPECT_LT(stats.mean_det_iou, 1.0);  // sigma 0.1 must actually perturb
    std::filesystem::remove_all(dir);
}

TEST(FilterCrops, BoundsAndBruteForce) {
    BootstrapConfig cfg;
    const int side = 64;
    auto det_with_area_frac = [&](double frac) {
        Detection d;
        const int w = static_cast<int>(std::lround(std::sqrt(frac) * side));
        d.bbox = {0, 0, w, w};
        return d;
    };
    // 80% of the image: removed
    {
        Detection d;
        d.bbox = {0, 0, 57, 58};  // 3306/4096 = 0.807
        EXPECT_TRUE(filter_crops({d}, side, cfg).empty());
    }
    // exactly min_frac: kept (inclusive boundary)
    {
        BootstrapConfig c2;
        c2.min_crop_area_fraction = 100.0 / (side * side);
        Detection d;
        d.bbox = {0, 0, 10, 10};
        EXPECT_EQ(filter_crops({d}, side, c2).size(), 1u);
    }
    // random set vs brute force recount
    Rng rng(7);
    std::vector<Detection> dets;
    for (int i = 0; i < 500; ++i) {
        Detection d;
        const int x0 = static_cast<int>(rng.uniform_int(0, side - 2));
        const int y0 = static_cast<int>(rng.uniform_int(0, side - 2));
        d.bbox = {x0, y0, static_cast<int>(rng.uniform_int(x0 + 1, side)),
                  static_cast<int>(rng.uniform_int(y0 + 1, side))};
        dets.push_back(d);
    }
    const auto kept = filter_crops(dets, side, cfg);
    size_t brute = 0;
    std::vector<Detection> expected;
    for (const auto& d : dets) {
        const double frac = static_cast<double>(d.bbox.area()) / (side * side);
        if (frac >= cfg.min_crop_area_fraction && frac <= cfg.max_crop_area_fraction) {
            ++brute;
            expected.push_back(d);
        }
    }
    ASSERT_EQ(kept.size(), brute);
    for (size_t i = 0; i < kept.size(); ++i) EXPECT_TRUE(kept[i].bbox == expected[i].bbox);
    (void)det_with_area_frac;
}

TEST(MakePrompt, CropLandsBeforeItsWord) {
    SceneSpec spec;
    ObjectSpec o;
    o.cls = ShapeClass::Square;
    o.color = "red";
    o.size = 0.4;
    o.cx = o.cy = 0.5;
    spec.objects = {o};
    spec.style = default_style_pool()[0];
    spec.caption = build_caption(spec.objects, spec.style);
    const ImageSample s = render_scene(spec, 64);
    ASSERT_EQ(s.caption, "a red square in flat style");

    BootstrapConfig cfg;
    cfg.hint_prob = 0;
    cfg.augment_prob = 0;
    Rng rng(3);
    const auto prompt = make_multimodal_caption(s, detect_objects(s, DetectorMode::Oracle), cfg, rng);
    ASSERT_EQ(prompt.segments.size(), 3u);
    EXPECT_EQ(prompt.segments[0].type, SegmentType::Text);
    EXPECT_EQ(prompt.segments[0].text, "a red ");
    EXPECT_EQ(prompt.segments[1].type, SegmentType::Image);
    EXPECT_EQ(prompt.segments[2].text, "square in flat style");
}

TEST(MakePrompt, ZeroDetectionsGiveSingleTextSegment) {
    const ImageSample s = two_object_sample();
    BootstrapConfig cfg;
    cfg.hint_prob = 0;
    Rng rng(3);
    const auto prompt = make_multimodal_caption(s, {}, cfg, rng);
    ASSERT_EQ(prompt.segments.size(), 1u);
    EXPECT_EQ(prompt.segments[0].type, SegmentType::Text);
    EXPECT_EQ(prompt.segments[0].text, s.caption);
}

TEST(MakePrompt, HeadSubstitutionRate) {
    const ImageSample s = person_sample();
    const auto dets = detect_objects(s, DetectorMode::Oracle);
    BootstrapConfig cfg;
    cfg.hint_prob = 0;
    cfg.augment_prob = 0;  // crops become a pure function of the chosen box

    // reference crops for the two possible boxes
    const int side = crop_side_for_tokens(cfg.target_tokens(), cfg.patch_size);
    Rng aug_rng(0);
    const ImageF full_crop = bootstrap::detail::prepare_crop(s.pixels, dets[0].bbox, side, aug_rng, cfg);
    const ImageF head_crop =
        bootstrap::detail::prepare_crop(s.pixels, s.annotations[0].part_bboxes.at("head"), side, aug_rng, cfg);

    int heads = 0;
    const int n = 10000;
    Rng root(404);
    for (int i = 0; i < n; ++i) {
        Rng rng = root.child(static_cast<uint64_t>(i));
        const auto prompt = make_multimodal_caption(s, dets, cfg, rng);
        const auto& img = prompt.segments[1].type == SegmentType::Image ? prompt.segments[1]
                                                                        : prompt.segments[0];
        if (img.pixels == head_crop)
            ++heads;
        else
            EXPECT_TRUE(img.pixels == full_crop);
    }
    EXPECT_NEAR(heads / static_cast<double>(n), 0.70, 0.01);
}

TEST(MakePrompt, HintInsertionRate) {
    const ImageSample s = two_object_sample();
    const auto dets = detect_objects(s, DetectorMode::Oracle);
    BootstrapConfig cfg;
    cfg.augment_prob = 0;
    int hints = 0;
    const int n = 10000;
    Rng root(505);
    for (int i = 0; i < n; ++i) {
        Rng rng = root.child(static_cast<uint64_t>(i));
        const auto prompt = make_multimodal_caption(s, dets, cfg, rng);
        hints += !prompt.segments.empty() && prompt.segments[0].type == SegmentType::Image &&
                 prompt.segments[0].origin == ImageOrigin::Hint;
    }
    EXPECT_NEAR(hints / static_cast<double>(n), 0.30, 0.01);
}

TEST(MakePrompt, TextConcatenationReproducesCaption) {
    const auto dir = test::tmp_dir("boot_prop");
    const DatasetManifest m = build_dataset(300, 8, dir, 32);
    BootstrapConfig cfg;
    Rng root(606);
    for (size_t i = 0; i < m.records.size(); ++i) {
        const ImageSample s = load_sample(m, m.records[i]);
        const auto dets = filter_crops(detect_objects(s, DetectorMode::Oracle), s.pixels.w, cfg);
        Rng rng = root.child(static_cast<uint64_t>(i));
        const auto prompt = make_multimodal_caption(s, dets, cfg, rng);
        EXPECT_EQ(prompt.text(), s.caption) << i;
        EXPECT_LE(prompt.crop_count(), std::min<int>(3, static_cast<int>(dets.size()))) << i;
    }
    std::filesystem::remove_all(dir);
}

TEST(MakePrompt, Stage2PrefersSinglePersonCrop) {
    SceneSpec spec;
    ObjectSpec p;
    p.cls = ShapeClass::SpritePerson;
    p.color = "red";
    p.size = 0.34;
    p.cx = p.cy = 0.3;
    ObjectSpec q;
    q.cls = ShapeClass::Square;
    q.color = "blue";
    q.size = 0.3;
    q.cx = q.cy = 0.72;
    spec.objects = {p, q};
    spec.style = default_style_pool()[0];
    spec.caption = build_caption(spec.objects, spec.style);
    const ImageSample s = render_scene(spec, 64);

    BootstrapConfig cfg;
    cfg.stage = 2;
    cfg.augment_prob = 0;
    cfg.head_substitution_prob = 0;
    const auto dets = detect_objects(s, DetectorMode::Oracle);
    const int side = crop_side_for_tokens(cfg.target_tokens(), cfg.patch_size);
    Rng aug(0);
    const ImageF person_crop = bootstrap::detail::prepare_crop(s.pixels, dets[0].bbox, side, aug, cfg);
    for (int i = 0; i < 20; ++i) {
        Rng rng(static_cast<uint64_t>(i));
        const auto prompt = make_multimodal_caption(s, dets, cfg, rng);
        EXPECT_EQ(prompt.image_count(), 1);
        EXPECT_EQ(prompt.crop_count(), 1);
        for (const auto& seg : prompt.segments)
            if (seg.type == SegmentType::Image) EXPECT_TRUE(seg.pixels == person_crop);
    }
}

TEST(Augment, ZeroProbIsIdentity) {
    BootstrapConfig cfg;
    cfg.augment_prob = 0;
    Rng rng(1);
    ImageF img(8, 8);
    for (auto& v : img.px) v = static_cast<float>(rng.uniform());
    const ImageF out = augment_crop(img, rng, cfg);
    EXPECT_TRUE(out == img);
}

TEST(Augment, BranchPropertiesAndRate) {
    BootstrapConfig cfg;
    Rng pix_rng(2);
    ImageF img(12, 12);
    for (auto& v : img.px) v = static_cast<float>(pix_rng.uniform());
    img.quantize8();

    int applied = 0, gray_seen = 0, subcrop_seen = 0, flip_seen = 0;
    const int n = 10000;
    Rng root(707);
    for (int i = 0; i < n; ++i) {
        Rng rng = root.child(static_cast<uint64_t>(i));
        const ImageF out = augment_crop(img, rng, cfg);
        if (out == img) continue;
        ++applied;
        if (out.h != img.h || out.w != img.w) {
            ++subcrop_seen;
            EXPECT_LE(out.h, img.h);
            continue;
        }
        bool gray = true;
        for (int y = 0; y < out.h && gray; ++y)
            for (int x = 0; x < out.w && gray; ++x)
                gray = out.at(y, x, 0) == out.at(y, x, 1) && out.at(y, x, 1) == out.at(y, x, 2);
        if (gray) {
            ++gray_seen;
            continue;
        }
        bool flipped = true;
        for (int y = 0; y < out.h && flipped; ++y)
            for (int x = 0; x < out.w && flipped; ++x)
                for (int c = 0; c < 3; ++c)
                    flipped = flipped && out.at(y, x, c) == img.at(y, out.w - 1 - x, c);
        flip_seen += flipped;
        for (const auto& v : out.px) {
            EXPECT_GE(v, 0.f);
            EXPECT_LE(v, 1.f);
        }
    }
    EXPECT_NEAR(applied / static_cast<double>(n), 0.20, 0.01);
    EXPECT_GT(gray_seen, 0);
    EXPECT_GT(subcrop_seen, 0);
    EXPECT_GT(flip_seen, 0);
}

TEST(Hints, EdgeMapProperties) {
    // uniform image -> all zeros
    ImageF flat(32, 32);
    flat.fill(0.4f, 0.7f, 0.2f);
    const ImageF e0 = make_hint_image(flat, HintKind::Edge);
    for (float v : e0.px) EXPECT_EQ(v, 0.f);

    // red square on black: edges only near the square's boundary
    ImageF sq(32, 32);
    for (int y = 10; y < 22; ++y)
        for (int x = 10; x < 22; ++x) sq.at(y, x, 0) = 1.f;
    const ImageF e1 = make_hint_image(sq, HintKind::Edge);
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) {
            if (e1.at(y, x, 0) == 0.f) continue;
            const int d = std::max({10 - x, x - 21, 10 - y, y - 21});
            EXPECT_LE(std::abs(d), 2) << "edge pixel far from boundary at " << x << "," << y;
        }

    // range and shape contracts for every kind
    Rng rng(3);
    ImageF noise(16, 16);
    for (auto& v : noise.px) v = static_cast<float>(rng.uniform());
    for (HintKind k : {HintKind::Edge, HintKind::BlurSketch, HintKind::DepthProxy}) {
        const ImageF h = make_hint_image(noise, k);
        EXPECT_EQ(h.h, 16);
        EXPECT_EQ(h.w, 16);
        for (float v : h.px) {
            EXPECT_GE(v, 0.f);
            EXPECT_LE(v, 1.f);
        }
        // single channel replicated
        for (int y = 0; y < h.h; ++y)
            for (int x = 0; x < h.w; ++x) {
                EXPECT_EQ(h.at(y, x, 0), h.at(y, x, 1));
                EXPECT_EQ(h.at(y, x, 1), h.at(y, x, 2));
            }
    }
}

TEST(Serialize, RoundTripAndMissingPng) {
    const auto dir = test::tmp_dir("boot_ser");
    const ImageSample s = person_sample();
    BootstrapConfig cfg;
    Rng rng(9);
    PromptRecord rec;
    rec.id = "000001";
    rec.source_sample_id = "000001";
    rec.prompt = make_multimodal_caption(s, detect_objects(s, DetectorMode::Oracle), cfg, rng);
    save_prompts(dir, {rec});

    const auto loaded = load_prompts(dir);
    ASSERT_EQ(loaded.size(), 1u);
    EXPECT_TRUE(loaded[0] == rec);

    // removing a crop png makes deserialization fail, naming the segment
    bool had_image = false;
    for (const auto& seg : rec.prompt.segments) had_image |= seg.type == SegmentType::Image;
    if (had_image) {
        std::filesystem::remove_all(dir / "crops");
        try {
            load_prompts(dir);
            FAIL() << "expected ParseError";
        } catch (const ParseError& e) {
            EXPECT_NE(std::string(e.what()).find("segment"), std::string::npos);
        }
    }
    std::filesystem::remove_all(dir);
}

TEST(Serialize, IdempotentOverCorpus) {
    const auto dir = test::tmp_dir("boot_idem");
    const DatasetManifest m = build_dataset(1000, 12, dir / "ds", 32);
    BootstrapConfig cfg;
    run_bootstrap(m, dir / "p1", cfg, 42, DetectorMode::Oracle);
    const std::string first = read_file(dir / "p1" / "prompts.jsonl");
    ASSERT_FALSE(first.empty());

    // serialize(deserialize(serialize(x))) == serialize(x), byte for byte
    const auto prompts = load_prompts(dir / "p1");
    std::vector<PromptRecord> copy(prompts.begin(), prompts.end());
    save_prompts(dir / "p2", copy);
    EXPECT_EQ(read_file(dir / "p2" / "prompts.jsonl"), first);
    // crop blobs survive byte-for-byte as well
    for (const auto& entry : std::filesystem::directory_iterator(dir / "p1" / "crops")) {
        const auto other = dir / "p2" / "crops" / entry.path().filename();
        ASSERT_TRUE(std::filesystem::exists(other));
        EXPECT_EQ(read_file(entry.path()), read_file(other)) << entry.path();
    }
    std::filesystem::remove_all(dir);
}
