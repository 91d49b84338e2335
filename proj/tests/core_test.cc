#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "mmgen/core/checkpoint.hpp"
#include "mmgen/core/image.hpp"
#include "mmgen/core/nn.hpp"
#include "mmgen/core/ops.hpp"
#include "mmgen/core/parallel.hpp"
#include "mmgen/core/png_io.hpp"
#include "mmgen/core/rng.hpp"
#include "testutil.hpp"

using namespace mmgen;

TEST(Rng, DeterministicAndBounded) {
    Rng a(42), b(42);
    for (int i = 0; i < 1000; ++i) {
        const double u = a.uniform();
        EXPECT_EQ(u, b.uniform());
        EXPECT_GE(u, 0.0);
        EXPECT_LT(u, 1.0);
    }
    Rng c(43);
    EXPECT_NE(Rng(42).next_u64(), c.next_u64());
}

TEST(Rng, ChildStreamsIndependentOfPosition) {
    Rng a(7);
    a.uniform();
    a.uniform();
    Rng b(7);
    EXPECT_EQ(a.child("x").next_u64(), b.child("x").next_u64());
    EXPECT_NE(b.child("x").next_u64(), b.child("y").next_u64());
}

TEST(Rng, NormalMoments) {
    Rng r(1);
    double sum = 0, sq = 0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double v = r.normal();
        sum += v;
        sq += v * v;
    }
    EXPECT_NEAR(sum / n, 0.0, 0.01);
    EXPECT_NEAR(sq / n, 1.0, 0.02);
}

TEST(Rng, UniformIntInclusive) {
    Rng r(5);
    std::vector<int> hits(5, 0);
    for (int i = 0; i < 5000; ++i) hits[static_cast<size_t>(r.uniform_int(0, 4))]++;
    for (int h : hits) EXPECT_GT(h, 800);
}

// ---------------------------------------------------------------------------
// Autograd vs finite differences
// ---------------------------------------------------------------------------

namespace {

ParamStore<double> make_store(std::initializer_list<std::pair<std::string, std::vector<int64_t>>> defs,
                              uint64_t seed = 11) {
    ParamStore<double> ps;
    Rng rng(seed);
    for (const auto& [name, shape] : defs) {
        Tensor<double>& t = ps.create(name, shape, "test", true);
        for (auto& v : t.data) v = rng.normal() * 0.5;
    }
    return ps;
}

}  // namespace

TEST(Autograd, MatmulAllTransposeFlags) {
    for (const bool ta : {false, true}) {
        for (const bool tb : {false, true}) {
            auto ps = make_store({{"a", {ta ? 4 : 3, ta ? 3 : 4}}, {"b", {tb ? 5 : 4, tb ? 4 : 5}}});
            auto build = [&](Graph<double>& g) {
                return sum_all(matmul(ps.bind(g, "a"), ps.bind(g, "b"), ta, tb));
            };
            EXPECT_LT(test::max_rel_grad_err(ps, "a", build, 64), 1e-6) << ta << tb;
            EXPECT_LT(test::max_rel_grad_err(ps, "b", build, 64), 1e-6) << ta << tb;
        }
    }
}

TEST(Autograd, ElementwiseOps) {
    auto ps = make_store({{"a", {4, 5}}, {"b", {4, 5}}});
    auto build = [&](Graph<double>& g) {
        Var<double> a = ps.bind(g, "a"), b = ps.bind(g, "b");
        Var<double> y = add(mul(silu(a), b), scale(sub(a, b), 0.3));
        return mse(y, scale(b, 0.1));
    };
    EXPECT_LT(test::max_rel_grad_err(ps, "a", build, 40), 1e-6);
    EXPECT_LT(test::max_rel_grad_err(ps, "b", build, 40), 1e-6);
}

TEST(Autograd, RowvecBiasAndReductions) {
    auto ps = make_store({{"x", {6, 3}}, {"v", {3}}});
    auto build = [&](Graph<double>& g) {
        return mean_all(silu(add_rowvec(ps.bind(g, "x"), ps.bind(g, "v"))));
    };
    EXPECT_LT(test::max_rel_grad_err(ps, "x", build, 40), 1e-6);
    EXPECT_LT(test::max_rel_grad_err(ps, "v", build, 40), 1e-6);
}

TEST(Autograd, SoftmaxMaskedAndCausal) {
    auto ps = make_store({{"s", {5, 5}}});
    std::vector<uint8_t> mask = {1, 1, 0, 1, 1};
    auto build = [&](Graph<double>& g) {
        Rng rw(3);
        Var<double> p = attn_softmax(ps.bind(g, "s"), true, &mask);
        Var<double> w = g.input(Tensor<double>::randn({5, 5}, rw));
        return sum_all(mul(p, w));
    };
    EXPECT_LT(test::max_rel_grad_err(ps, "s", build, 25), 1e-6);
}

TEST(Autograd, SoftmaxRowsAreDistributions) {
    Graph<double> g;
    Rng rng(9);
    std::vector<uint8_t> mask = {1, 0, 1, 1, 1, 1, 0, 1};
    Var<double> p = attn_softmax(g.input(Tensor<double>::randn({6, 8}, rng)), false, &mask);
    for (int64_t r = 0; r < 6; ++r) {
        double s = 0;
        for (int64_t c = 0; c < 8; ++c) {
            s += p.val().at2(r, c);
            if (!mask[static_cast<size_t>(c)]) EXPECT_EQ(p.val().at2(r, c), 0.0);
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(Autograd, LayerNorm) {
    auto ps = make_store({{"x", {5, 8}}, {"g", {8}}, {"b", {8}}});
    auto build = [&](Graph<double>& g) {
        return mean_all(
            mul(layer_norm(ps.bind(g, "x"), ps.bind(g, "g"), ps.bind(g, "b")), ps.bind(g, "x")));
    };
    EXPECT_LT(test::max_rel_grad_err(ps, "x", build, 40), 1e-5);
    EXPECT_LT(test::max_rel_grad_err(ps, "g", build, 40), 1e-5);
    EXPECT_LT(test::max_rel_grad_err(ps, "b", build, 40), 1e-5);
}

TEST(Autograd, GroupNorm) {
    auto ps = make_store({{"x", {8, 3, 4}}, {"g", {8}}, {"b", {8}}});
    auto build = [&](Graph<double>& g) {
        Var<double> y = group_norm(ps.bind(g, "x"), ps.bind(g, "g"), ps.bind(g, "b"), 4);
        return mean_all(mul(y, ps.bind(g, "x")));
    };
    EXPECT_LT(test::max_rel_grad_err(ps, "x", build, 48), 1e-5);
    EXPECT_LT(test::max_rel_grad_err(ps, "g", build, 16), 1e-5);
    EXPECT_LT(test::max_rel_grad_err(ps, "b", build, 16), 1e-5);
}

TEST(Autograd, Conv2dStride1And2) {
    for (const int stride : {1, 2}) {
        auto ps = make_store({{"x", {3, 8, 8}}, {"w", {5, 27}}, {"b", {5}}});
        auto build = [&](Graph<double>& g) {
            return mean_all(silu(conv2d(ps.bind(g, "x"), ps.bind(g, "w"), ps.bind(g, "b"), 3, stride)));
        };
        EXPECT_LT(test::max_rel_grad_err(ps, "x", build, 48), 1e-5) << stride;
        EXPECT_LT(test::max_rel_grad_err(ps, "w", build, 48), 1e-5) << stride;
        EXPECT_LT(test::max_rel_grad_err(ps, "b", build, 5), 1e-5) << stride;
    }
}

TEST(Autograd, ShapeOpsAndEmbedding) {
    auto ps = make_store({{"x", {4, 6, 6}}, {"t", {7, 4}}, {"c", {4}}});
    std::vector<int> ids = {1, 3, 3, 0, 6};
    auto build = [&](Graph<double>& g) {
        Var<double> x = ps.bind(g, "x");
        Var<double> rows = chw_to_rows(upsample_nearest2(add_channel_bias(x, ps.bind(g, "c"))));
        Var<double> emb = embedding(ps.bind(g, "t"), ids);
        Var<double> joined = concat_rows<double>({slice_rows(rows, 0, 3), emb, slice_cols(rows, 0, 4)});
        return mean_all(mul(joined, joined));
    };
    EXPECT_LT(test::max_rel_grad_err(ps, "x", build, 48), 1e-5);
    EXPECT_LT(test::max_rel_grad_err(ps, "t", build, 35), 1e-5);
    EXPECT_LT(test::max_rel_grad_err(ps, "c", build, 4), 1e-5);
}

TEST(Autograd, TransformerBlockGradcheck) {
    ParamStore<double> ps;
    Rng rng(21);
    TransformerBlock<double> blk(ps, "blk", 8, 2, rng, "test", true);
    Tensor<double> x = Tensor<double>::randn({5, 8}, rng);
    auto build = [&](Graph<double>& g) { return mean_all(blk(g, g.input(x), true)); };
    for (const char* p : {"blk.attn.q.w", "blk.attn.k.w", "blk.attn.v.w", "blk.attn.o.w",
                          "blk.fc1.w", "blk.fc2.b", "blk.ln1.g", "blk.ln2.b"}) {
        EXPECT_LT(test::max_rel_grad_err(ps, p, build, 16), 1e-4) << p;
    }
}

TEST(Autograd, NoGradGraphRecordsNothing) {
    auto ps = make_store({{"a", {3, 3}}});
    Graph<double> g(false);
    Var<double> y = silu(matmul(ps.bind(g, "a"), ps.bind(g, "a")));
    EXPECT_FALSE(g.needs_grad(y.id));
    EXPECT_THROW(g.backward(sum_all(y)), Error);
}

TEST(Autograd, ConcatChannels) {
    auto ps = make_store({{"a", {2, 3, 3}}, {"b", {3, 3, 3}}});
    auto build = [&](Graph<double>& g) {
        Var<double> y = concat_channels(ps.bind(g, "a"), ps.bind(g, "b"));
        return mean_all(mul(y, y));
    };
    EXPECT_LT(test::max_rel_grad_err(ps, "a", build, 18), 1e-6);
    EXPECT_LT(test::max_rel_grad_err(ps, "b", build, 27), 1e-6);
}

// ---------------------------------------------------------------------------
// LoRA-aware Linear
// ---------------------------------------------------------------------------

TEST(Nn, FreshLoraIsExactNoop) {
    ParamStore<double> ps;
    Rng rng(3);
    Linear<double> lin(ps, "lin", 6, 4, rng, "test", true);
    Tensor<double> x = Tensor<double>::randn({5, 6}, rng);

    Graph<double> g0(false);
    Tensor<double> before = lin(g0, g0.input(x)).val();

    Rng lr(5);
    ps.attach_lora("lin.w", 2, 2.0, lr, "test_lora");
    Graph<double> g1(false);
    Tensor<double> after = lin(g1, g1.input(x)).val();
    EXPECT_EQ(max_abs_diff(before, after), 0.0);
}

TEST(Nn, LoraGradientsFlowToAdapterNotFrozenBase) {
    ParamStore<double> ps;
    Rng rng(3);
    Linear<double> lin(ps, "lin", 6, 4, rng, "test", /*trainable=*/false);
    Rng lr(5);
    ps.attach_lora("lin.w", 2, 2.0, lr, "test_lora");
    // make B nonzero so grads reach A
    for (auto& v : ps.value("lin.w.lora_B").data) v = 0.3;

    Graph<double> g;
    Tensor<double> x = Tensor<double>::randn({5, 6}, rng);
    Var<double> loss = mean_all(mul(lin(g, g.input(x)), lin(g, g.input(x))));
    auto grads = test::collect_grads(g, loss);
    EXPECT_TRUE(grads.count("lin.w.lora_A"));
    EXPECT_TRUE(grads.count("lin.w.lora_B"));
    EXPECT_FALSE(grads.count("lin.w"));
}

// ---------------------------------------------------------------------------
// Checkpoint round trip
// ---------------------------------------------------------------------------

TEST(Checkpoint, RoundTripAndCorruptionDetection) {
    const auto dir = test::tmp_dir("ckpt");
    Rng rng(17);
    Tensor<float> a = Tensor<float>::randn({3, 4}, rng);
    Tensor<float> b = Tensor<float>::randn({7}, rng);
    json meta;
    meta["note"] = "x";
    ckpt::save<float>(dir, {{"a", &a}, {"b", &b}}, meta);

    auto loaded = ckpt::load<float>(dir);
    EXPECT_EQ(loaded.meta.at("note"), "x");
    EXPECT_EQ(max_abs_diff(loaded.tensors.at("a"), a), 0.f);
    EXPECT_EQ(max_abs_diff(loaded.tensors.at("b"), b), 0.f);

    // flip one byte of `b`
    {
        std::fstream f(dir / ckpt::kBlobFile, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(3 * 4 * 4 + 2);
        char c;
        f.seekg(3 * 4 * 4 + 2);
        f.read(&c, 1);
        c = static_cast<char>(c ^ 0x40);
        f.seekp(3 * 4 * 4 + 2);
        f.write(&c, 1);
    }
    try {
        ckpt::load<float>(dir);
        FAIL() << "expected corruption error";
    } catch (const ParseError& e) {
        EXPECT_NE(std::string(e.what()).find("b"), std::string::npos);
    }
    std::filesystem::remove_all(dir);
}

// ---------------------------------------------------------------------------
// Images
// ---------------------------------------------------------------------------

TEST(Image, PngRoundTripIsExactAfterQuantize) {
    const auto dir = test::tmp_dir("png");
    Rng rng(23);
    ImageF img(17, 13);
    for (auto& v : img.px) v = static_cast<float>(rng.uniform());
    img.quantize8();
    write_png(dir / "x.png", img);
    const ImageF back = read_png(dir / "x.png");
    ASSERT_TRUE(back.same_size(img));
    EXPECT_EQ(back.px, img.px);
    std::filesystem::remove_all(dir);
}

TEST(Image, PadAndResizeShapes) {
    ImageF img(4, 10);
    img.fill(0.5f, 0.25f, 1.f);
    const ImageF sq = pad_to_square(img);
    EXPECT_EQ(sq.h, 10);
    EXPECT_EQ(sq.w, 10);
    const ImageF small = resize_bilinear(sq, 5, 5);
    EXPECT_EQ(small.h, 5);
    // center of padded region keeps the original color
    EXPECT_NEAR(small.at(2, 2, 2), 1.f, 1e-5);
}

TEST(Image, TensorRoundTrip) {
    ImageF img(6, 6);
    img.fill(0.25f, 0.5f, 0.75f);
    auto t = image_to_tensor<float>(img);
    EXPECT_NEAR(t.at3(0, 0, 0), -0.5f, 1e-6);
    const ImageF back = tensor_to_image(t);
    EXPECT_NEAR(back.at(3, 3, 1), 0.5f, 1e-6);
}

TEST(Parallel, CoversAllIndices) {
    std::vector<int> hits(1000, 0);
    parallel_for(1000, [&](int64_t i) { hits[static_cast<size_t>(i)]++; });
    EXPECT_EQ(std::accumulate(hits.begin(), hits.end(), 0), 1000);
    for (int h : hits) EXPECT_EQ(h, 1);
}

TEST(Jsonio, ConfigHashStableUnderKeyOrder) {
    json a = json::parse(R"({"b":1,"a":{"y":2,"x":3}})");
    json b = json::parse(R"({"a":{"x":3,"y":2},"b":1})");
    EXPECT_EQ(config_hash(a), config_hash(b));
    b["a"]["x"] = 4;
    EXPECT_NE(config_hash(a), config_hash(b));
}
