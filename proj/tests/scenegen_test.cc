#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <regex>
#include <set>

#include "mmgen/scenegen/dataset.hpp"
#include "testutil.hpp"

using namespace mmgen;
using namespace mmgen::scenegen;

namespace {

std::vector<ContentTemplate> one_object_pool() {
    ContentTemplate t;
    t.parts = {{ShapeClass::Square, "red"}};
    return {t};
}

// Test-local color oracle: low-chroma pixels are background; others classify
// to the palette color with the highest cosine similarity (shade-invariant).
const char* classify_pixel(float r, float g, float b) {
    const float mx = std::max({r, g, b}), mn = std::min({r, g, b});
    if (mx - mn < 0.15f) return nullptr;
    double best = -1;
    const char* label = nullptr;
    for (const auto& c : palette()) {
        const double dot = r * c.rgb[0] + g * c.rgb[1] + b * c.rgb[2];
        const double na = std::sqrt(r * r + g * g + b * b);
        const double nb = std::sqrt(c.rgb[0] * c.rgb[0] + c.rgb[1] * c.rgb[1] + c.rgb[2] * c.rgb[2]);
        const double cos = dot / (na * nb + 1e-9);
        if (cos > best) {
            best = cos;
            label = c.name.c_str();
        }
    }
    return label;
}

std::string read_file(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

}  // namespace

TEST(SampleScene, OneObjectPoolMatchesGrammar) {
    Rng rng(0);
    const SceneSpec spec = sample_scene(rng, one_object_pool(), default_style_pool());
    ASSERT_EQ(spec.objects.size(), 1u);
    const std::regex grammar(
        R"(^a (red|green|blue|yellow|purple|orange) (square|circle|triangle|person|dog)()"
        R"( and a (red|green|blue|yellow|purple|orange) (square|circle|triangle|person|dog))*)"
        R"( in (flat|stripes|dots|noir) style$)");
    EXPECT_TRUE(std::regex_match(spec.caption, grammar)) << spec.caption;
}

TEST(SampleScene, ContentIndependentOfStylePool) {
    // same seed, two different single-style pools -> same objects, different style
    const auto styles = default_style_pool();
    Rng r1(123), r2(123);
    const SceneSpec a = sample_scene(r1, default_content_pool(), {styles[0]});
    const SceneSpec b = sample_scene(r2, default_content_pool(), {styles[1]});
    ASSERT_EQ(a.objects.size(), b.objects.size());
    for (size_t i = 0; i < a.objects.size(); ++i) {
        EXPECT_EQ(a.objects[i].cls, b.objects[i].cls);
        EXPECT_EQ(a.objects[i].color, b.objects[i].color);
        EXPECT_EQ(a.objects[i].size, b.objects[i].size);
        EXPECT_EQ(a.objects[i].cx, b.objects[i].cx);
        EXPECT_EQ(a.objects[i].shade, b.objects[i].shade);
    }
    EXPECT_NE(a.style.name, b.style.name);
}

TEST(SampleScene, ContentStylePairFrequencies) {
    // 5 contents x 4 styles, uniform weights: every pair ~0.05 +- 0.01
    std::vector<ContentTemplate> contents;
    const auto& colors = palette();
    for (int i = 0; i < 5; ++i) {
        ContentTemplate t;
        t.parts = {{all_classes()[static_cast<size_t>(i)], colors[static_cast<size_t>(i)].name}};
        contents.push_back(t);
    }
    const auto styles = default_style_pool();
    ASSERT_EQ(styles.size(), 4u);

    std::map<std::string, int> counts;
    const int n = 10000;
    Rng root(2024);
    for (int i = 0; i < n; ++i) {
        Rng rng = root.child(static_cast<uint64_t>(i));
        const SceneSpec s = sample_scene(rng, contents, styles);
        counts[std::string(class_word(s.objects[0].cls)) + "|" + s.style.name]++;
    }
    ASSERT_EQ(counts.size(), 20u);
    for (const auto& [key, c] : counts) {
        const double freq = static_cast<double>(c) / n;
        EXPECT_NEAR(freq, 0.05, 0.01) << key;
    }
}

TEST(SampleScene, OverDenseTemplateFailsWithPlacementError) {
    ContentTemplate t;
    t.parts = {{ShapeClass::Square, "red"},
               {ShapeClass::Square, "blue"},
               {ShapeClass::Square, "green"},
               {ShapeClass::Square, "yellow"}};
    t.size_min = 0.55;
    t.size_max = 0.59;
    Rng rng(1);
    EXPECT_THROW(sample_scene(rng, {t}, default_style_pool()), PlacementError);
}

TEST(RenderScene, CenteredRedSquareGeometry) {
    SceneSpec spec;
    ObjectSpec o;
    o.cls = ShapeClass::Square;
    o.color = "red";
    o.size = 0.5;
    o.cx = o.cy = 0.5;
    o.shade = 1.0;
    spec.objects = {o};
    spec.style = default_style_pool()[0];  // flat
    spec.caption = build_caption(spec.objects, spec.style);

    const ImageSample s = render_scene(spec, 64);
    ASSERT_EQ(s.annotations.size(), 1u);
    const BBox b = s.annotations[0].bbox;
    EXPECT_EQ(b.x0, 16);
    EXPECT_EQ(b.y0, 16);
    EXPECT_EQ(b.x1, 48);
    EXPECT_EQ(b.y1, 48);
    int red = 0;
    for (int y = b.y0; y < b.y1; ++y)
        for (int x = b.x0; x < b.x1; ++x)
            if (const char* c = classify_pixel(s.pixels.at(y, x, 0), s.pixels.at(y, x, 1),
                                               s.pixels.at(y, x, 2)))
                red += std::string(c) == "red";
    EXPECT_EQ(red, 32 * 32);
}

TEST(RenderScene, PersonHeadPartBox) {
    SceneSpec spec;
    ObjectSpec o;
    o.cls = ShapeClass::SpritePerson;
    o.color = "blue";
    o.size = 0.41;
    o.cx = o.cy = 0.5;
    spec.objects = {o};
    spec.style = default_style_pool()[0];
    spec.caption = build_caption(spec.objects, spec.style);

    const ImageSample s = render_scene(spec, 64);
    const auto& ann = s.annotations[0];
    ASSERT_TRUE(ann.part_bboxes.count("head"));
    const BBox head = ann.part_bboxes.at("head");
    EXPECT_EQ(head.height(), static_cast<int>(std::lround(0.35 * ann.bbox.height())));
    EXPECT_EQ(head.x0, ann.bbox.x0);
    EXPECT_EQ(head.x1, ann.bbox.x1);
    EXPECT_EQ(head.y0, ann.bbox.y0);
}

TEST(RenderScene, Deterministic) {
    Rng rng(77);
    const SceneSpec spec = sample_scene(rng, default_content_pool(), default_style_pool());
    const ImageSample a = render_scene(spec, 32);
    const ImageSample b = render_scene(spec, 32);
    EXPECT_TRUE(a.pixels == b.pixels);
}

TEST(RenderScene, BBoxColorCoverageMeetsClassExpectation) {
    // lower bounds from shape geometry (fractions of the square bbox covered)
    const std::map<ShapeClass, double> expected_fill = {
        {ShapeClass::Square, 1.0},        {ShapeClass::Circle, 0.25 * 3.14159},
        {ShapeClass::Triangle, 0.5},      {ShapeClass::SpritePerson, 0.33},
        {ShapeClass::SpriteDog, 0.33},
    };
    const auto styles = default_style_pool();
    for (ShapeClass cls : all_classes()) {
        for (const auto& style : styles) {
            SceneSpec spec;
            ObjectSpec o;
            o.cls = cls;
            o.color = "green";
            o.size = 0.45;
            o.cx = o.cy = 0.5;
            spec.objects = {o};
            spec.style = style;
            spec.caption = build_caption(spec.objects, spec.style);
            const ImageSample s = render_scene(spec, 64);
            const BBox b = s.annotations[0].bbox;
            int match = 0;
            for (int y = b.y0; y < b.y1; ++y)
                for (int x = b.x0; x < b.x1; ++x)
                    if (const char* c = classify_pixel(s.pixels.at(y, x, 0), s.pixels.at(y, x, 1),
                                                       s.pixels.at(y, x, 2)))
                        match += std::string(c) == "green";
            const double frac = static_cast<double>(match) / b.area();
            EXPECT_GE(frac, 0.9 * expected_fill.at(cls))
                << class_word(cls) << " in " << style.name;
        }
    }
}

TEST(Dataset, ManifestByteIdenticalAcrossRuns) {
    const auto dir1 = test::tmp_dir("ds1");
    const auto dir2 = test::tmp_dir("ds2");
    build_dataset(1, 7, dir1, 32);
    build_dataset(1, 7, dir2, 32);
    EXPECT_EQ(read_file(dir1 / "manifest.jsonl"), read_file(dir2 / "manifest.jsonl"));
    EXPECT_EQ(read_file(dir1 / "images/000000.png"), read_file(dir2 / "images/000000.png"));
    std::filesystem::remove_all(dir1);
    std::filesystem::remove_all(dir2);
}

TEST(Dataset, CountsAndFilesExist) {
    const auto dir = test::tmp_dir("ds_n");
    const DatasetManifest m = build_dataset(100, 3, dir, 32);
    EXPECT_EQ(m.records.size(), 100u);
    std::ifstream is(dir / "manifest.jsonl");
    int lines = 0;
    std::string line;
    while (std::getline(is, line))
        if (!line.empty()) ++lines;
    EXPECT_EQ(lines, 100);
    for (const auto& r : m.records) EXPECT_TRUE(std::filesystem::exists(dir / r.image_path)) << r.id;
    std::filesystem::remove_all(dir);
}

TEST(Dataset, PeopleBiasedSampling) {
    const auto dir = test::tmp_dir("ds_bias");
    const DatasetManifest m = build_dataset(1000, 11, dir, 32);
    int64_t person_objects = 0, total_objects = 0, person_images = 0;
    for (const auto& r : m.records) {
        bool has_person = false;
        for (const auto& a : r.annotations) {
            const std::string word = r.caption.substr(
                static_cast<size_t>(a.word_span.begin),
                static_cast<size_t>(a.word_span.end - a.word_span.begin));
            ++total_objects;
            if (word == "person") {
                ++person_objects;
                has_person = true;
            }
        }
        person_images += has_person;
    }
    EXPECT_GE(static_cast<double>(person_objects) / static_cast<double>(total_objects), 0.4);
    EXPECT_GE(static_cast<double>(person_images) / static_cast<double>(m.records.size()), 0.4);
    std::filesystem::remove_all(dir);
}

TEST(Dataset, SampleRoundTrip) {
    const auto dir = test::tmp_dir("ds_rt");
    const DatasetManifest m = build_dataset(20, 5, dir, 32);
    const DatasetManifest loaded = load_manifest(dir / "manifest.jsonl");
    ASSERT_EQ(loaded.records.size(), 20u);
    for (size_t i = 0; i < 20; ++i) {
        // regenerate the source sample and compare against the decoded copy
        const SceneSpec spec = rederive_scene(loaded.records[i]);
        const ImageSample truth = render_scene(spec, 32);
        const ImageSample got = load_sample(loaded, loaded.records[i]);
        EXPECT_TRUE(got.pixels == truth.pixels) << i;
        EXPECT_EQ(got.caption, truth.caption);
        EXPECT_TRUE(got.annotations == truth.annotations);
    }
    std::filesystem::remove_all(dir);
}

TEST(Dataset, RederiveRecoversStyleParameters) {
    const auto dir = test::tmp_dir("ds_rd");
    const DatasetManifest m = build_dataset(10, 9, dir, 32);
    for (const auto& r : m.records) {
        const SceneSpec spec = rederive_scene(r);
        EXPECT_EQ(spec.style.name, r.style_name);
    }
    std::filesystem::remove_all(dir);
}
