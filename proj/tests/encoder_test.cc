#include <gtest/gtest.h>

#include "mmgen/encoder/model.hpp"
#include "testutil.hpp"

using namespace mmgen;
using namespace mmgen::encoder;
using bootstrap::ImageOrigin;
using bootstrap::MultimodalPrompt;
using bootstrap::Segment;

namespace {

EncoderConfig small_cfg(int tokens = 16) {
    EncoderConfig cfg;
    cfg.d_model = 16;
    cfg.n_layers_vlm = 2;
    cfg.n_heads = 2;
    cfg.patch_size = 4;
    cfg.tokens_per_image = tokens;
    cfg.n_layers_adapter = 2;
    cfg.d_cond = 12;
    cfg.max_sequence_length = 160;
    return cfg;
}

ImageF gradient_image(int side, float bias = 0.f) {
    ImageF img(side, side);
    for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(y, x, c) = std::clamp(
                    bias + static_cast<float>(x + y + c) / (2.f * side + 3.f), 0.f, 1.f);
    return img;
}

MultimodalPrompt prompt_with_crops(const EncoderConfig& cfg, int n_crops) {
    MultimodalPrompt p;
    p.segments.push_back(Segment::make_text("a red "));
    for (int i = 0; i < n_crops; ++i) {
        p.segments.push_back(Segment::make_image(gradient_image(cfg.image_side(), 0.05f * i),
                                                 cfg.tokens_per_image, ImageOrigin::Crop));
        if (i == 0) p.segments.push_back(Segment::make_text("square and a blue "));
    }
    p.segments.push_back(Segment::make_text("circle in flat style"));
    return p;
}

}  // namespace

TEST(Patchify, TokenCounts) {
    // 64x64 with patch 8 -> 64 tokens; with patch 16 -> 16 tokens
    for (const auto& [patch, tokens] : std::vector<std::pair<int, int>>{{8, 64}, {16, 16}}) {
        ParamStore<double> ps;
        Rng rng(1);
        EncoderConfig cfg = small_cfg();
        cfg.patch_size = patch;
        cfg.tokens_per_image = tokens;
        ASSERT_EQ(cfg.image_side(), 64);
        EncoderModel<double> enc(ps, cfg, Vocab::default_vocab(), rng);
        Graph<double> g(false);
        Var<double> patches = enc.patchify(g, g.input(image_to_tensor<double>(gradient_image(64))));
        EXPECT_EQ(patches.val().shape[0], tokens);
        EXPECT_EQ(patches.val().shape[1], cfg.d_model);
    }
}

TEST(Patchify, ZeroImageZeroWeightsGiveBias) {
    ParamStore<double> ps;
    Rng rng(2);
    EncoderModel<double> enc(ps, small_cfg(), Vocab::default_vocab(), rng);
    ps.value("enc.vit.patch.w").fill(0.0);
    Tensor<double>& b = ps.value("enc.vit.patch.b");
    for (size_t i = 0; i < b.data.size(); ++i) b.data[i] = 0.01 * static_cast<double>(i);

    ImageF mid(enc.cfg.image_side(), enc.cfg.image_side());
    mid.fill(0.5f, 0.5f, 0.5f);  // maps to 0 in model space
    Graph<double> g(false);
    Var<double> patches = enc.patchify(g, g.input(image_to_tensor<double>(mid)));
    for (int64_t r = 0; r < patches.val().shape[0]; ++r)
        for (int64_t c = 0; c < patches.val().shape[1]; ++c)
            EXPECT_NEAR(patches.val().at2(r, c), b.data[static_cast<size_t>(c)], 1e-12);
}

TEST(Perceiver, IdentityHookGivesValueProjectedPatches) {
    ParamStore<double> ps;
    Rng rng(3);
    EncoderConfig cfg = small_cfg(4);  // 4 patches
    cfg.use_perceiver = true;
    cfg.perceiver_tokens = 4;  // k == N for the hook
    cfg.identity_attention_hook = true;
    EncoderModel<double> enc(ps, cfg, Vocab::default_vocab(), rng);
    // output projection := identity
    Tensor<double>& ow = ps.value("enc.perceiver.attn.o.w");
    ow.fill(0.0);
    for (int i = 0; i < cfg.d_model; ++i) ow.at2(i, i) = 1.0;
    ps.value("enc.perceiver.attn.o.b").fill(0.0);

    Graph<double> g(false);
    Rng pr(4);
    Var<double> patches = g.input(Tensor<double>::randn({4, cfg.d_model}, pr));
    Var<double> pooled = enc.perceiver_pool(g, patches, 4);
    Var<double> vproj = enc.perceiver_attn.wv(g, patches);
    EXPECT_LT(max_abs_diff(pooled.val(), vproj.val()), 1e-12);
}

TEST(Perceiver, ShapeAndTooManyLatents) {
    ParamStore<double> ps;
    Rng rng(5);
    EncoderConfig cfg = small_cfg(16);
    cfg.use_perceiver = true;
    cfg.perceiver_tokens = 4;
    EncoderModel<double> enc(ps, cfg, Vocab::default_vocab(), rng);
    Graph<double> g(false);
    Rng pr(6);
    Var<double> patches = g.input(Tensor<double>::randn({16, cfg.d_model}, pr));
    Var<double> pooled = enc.perceiver_pool(g, patches, 4);
    EXPECT_EQ(pooled.val().shape[0], 4);
    EXPECT_EQ(pooled.val().shape[1], cfg.d_model);
    EXPECT_TRUE(pooled.val().all_finite());

    EncoderConfig bad = cfg;
    bad.perceiver_tokens = 32;  // > patch count
    EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Perceiver, GradcheckThroughPool) {
    ParamStore<double> ps;
    Rng rng(7);
    EncoderConfig cfg = small_cfg(4);
    cfg.use_perceiver = true;
    cfg.perceiver_tokens = 2;
    EncoderModel<double> enc(ps, cfg, Vocab::default_vocab(), rng);
    ps.entry("enc.perceiver.latents").trainable = true;
    ps.entry("enc.perceiver.attn.q.w").trainable = true;
    ps.entry("enc.perceiver.attn.v.w").trainable = true;

    Rng pr(8);
    const Tensor<double> patches = Tensor<double>::randn({4, cfg.d_model}, pr);
    auto build = [&](Graph<double>& g) {
        // gradient of pooled output w.r.t. the patches flows through attention
        Var<double> in = g.input_grad(patches);
        return mean_all(enc.perceiver_pool(g, in, 2));
    };
    for (const char* p : {"enc.perceiver.latents", "enc.perceiver.attn.q.w", "enc.perceiver.attn.v.w"})
        EXPECT_LT(test::max_rel_grad_err(ps, p, build, 16), 1e-3) << p;
}

TEST(Assemble, TextOnlyPromptKinds) {
    ParamStore<float> ps;
    Rng rng(9);
    EncoderModel<float> enc(ps, small_cfg(), Vocab::default_vocab(), rng);
    MultimodalPrompt p;
    p.segments.push_back(Segment::make_text("a red square in flat style"));
    const auto plan = enc.plan_prompt(p);
    EXPECT_EQ(plan.length(), 6);
    for (auto k : plan.kinds) EXPECT_TRUE(k == TokenKind::Text);
    EXPECT_TRUE(plan.blocks.empty());
}

TEST(Assemble, InterleavedLengthArithmetic) {
    ParamStore<float> ps;
    Rng rng(10);
    EncoderConfig cfg = small_cfg(16);
    EncoderModel<float> enc(ps, cfg, Vocab::default_vocab(), rng);
    const MultimodalPrompt p = prompt_with_crops(cfg, 2);
    // words: a red | square and a blue | circle in flat style = 2+4+4 = 10
    const auto plan = enc.plan_prompt(p);
    EXPECT_EQ(plan.length(), 10 + 2 * (16 + 2));
    ASSERT_EQ(plan.blocks.size(), 2u);
    EXPECT_EQ(plan.blocks[0].n_tokens, 16);
}

TEST(Assemble, Stage2SingleHighResBlock) {
    ParamStore<float> ps;
    Rng rng(11);
    EncoderConfig cfg = small_cfg(64);
    EncoderModel<float> enc(ps, cfg, Vocab::default_vocab(), rng);
    MultimodalPrompt p;
    p.segments.push_back(Segment::make_text("a red "));
    p.segments.push_back(
        Segment::make_image(gradient_image(cfg.image_side()), 64, ImageOrigin::Crop));
    p.segments.push_back(Segment::make_text("person in flat style"));
    const auto plan = enc.plan_prompt(p);
    const auto spans = plan.image_spans();
    ASSERT_EQ(spans.size(), 1u);
    EXPECT_EQ(spans[0].second - spans[0].first, 64);
}

TEST(Assemble, OovAndOverflowErrors) {
    ParamStore<float> ps;
    Rng rng(12);
    EncoderConfig cfg = small_cfg();
    cfg.max_sequence_length = 20;
    EncoderModel<float> enc(ps, cfg, Vocab::default_vocab(), rng);
    MultimodalPrompt oov;
    oov.segments.push_back(Segment::make_text("a cerulean square"));
    EXPECT_THROW(enc.plan_prompt(oov), ParseError);

    const MultimodalPrompt big = prompt_with_crops(cfg, 2);
    EXPECT_THROW(enc.plan_prompt(big), ConfigError);
}

TEST(Encode, DeterministicAndFinite) {
    ParamStore<float> ps;
    Rng rng(13);
    EncoderConfig cfg = small_cfg();
    EncoderModel<float> enc(ps, cfg, Vocab::default_vocab(), rng);
    const auto plan = enc.plan_prompt(prompt_with_crops(cfg, 1));
    const auto a = enc.encode(plan);
    const auto b = enc.encode(plan);
    EXPECT_EQ(max_abs_diff(a.states, b.states), 0.f);
    EXPECT_EQ(a.states.shape[1], cfg.d_cond);
    EXPECT_TRUE(a.states.all_finite());
}

TEST(Encode, VlmIsCausalAdapterIsNot) {
    ParamStore<double> ps;
    Rng rng(14);
    EncoderConfig cfg = small_cfg();
    EncoderModel<double> enc(ps, cfg, Vocab::default_vocab(), rng);

    MultimodalPrompt base;
    base.segments.push_back(Segment::make_text("a red square in flat style"));
    MultimodalPrompt perturbed;
    perturbed.segments.push_back(Segment::make_text("a red square in flat stripes"));  // last word

    const auto plan_a = enc.plan_prompt(base);
    const auto plan_b = enc.plan_prompt(perturbed);
    ASSERT_EQ(plan_a.length(), plan_b.length());
    const int L = plan_a.length();

    // VLM states before the adapter: positions < L-1 must be identical
    Graph<double> ga(false), gb(false);
    const auto asm_a = enc.assemble(ga, plan_a);
    const auto asm_b = enc.assemble(gb, plan_b);
    const Tensor<double> va = enc.vlm_states(ga, asm_a.emb, plan_a.mask).val();
    const Tensor<double> vb = enc.vlm_states(gb, asm_b.emb, plan_b.mask).val();
    for (int pos = 0; pos < L - 1; ++pos)
        for (int c = 0; c < cfg.d_model; ++c)
            ASSERT_EQ(va.at2(pos, c), vb.at2(pos, c)) << "position " << pos;
    // and the perturbed position itself must differ
    EXPECT_GT(std::abs(va.at2(L - 1, 0) - vb.at2(L - 1, 0)), 0.0);

    // the adapter is non-causal: position 0 of the full encoding changes
    const auto ca = enc.encode(plan_a);
    const auto cb = enc.encode(plan_b);
    double d0 = 0;
    for (int c = 0; c < cfg.d_cond; ++c) d0 = std::max(d0, std::abs(ca.states.at2(0, c) - cb.states.at2(0, c)));
    EXPECT_GT(d0, 1e-9);
}

TEST(Encode, AttentionRowsAreDistributions) {
    ParamStore<float> ps;
    Rng rng(15);
    EncoderConfig cfg = small_cfg();
    EncoderModel<float> enc(ps, cfg, Vocab::default_vocab(), rng);
    auto plan = enc.plan_prompt(prompt_with_crops(cfg, 1));
    EncoderModel<float>::pad_plan(plan, plan.length() + 5);  // exercise key masking

    Graph<float> g(false);
    std::vector<Tensor<float>> probe;
    g.attn_probe = &probe;
    enc.encode_var(g, plan);
    ASSERT_FALSE(probe.empty());
    for (const auto& p : probe) {
        for (int64_t r = 0; r < p.shape[0]; ++r) {
            float s = 0;
            for (int64_t c = 0; c < p.shape[1]; ++c) s += p.at2(r, c);
            EXPECT_NEAR(s, 1.f, 1e-5f);
        }
    }
}

TEST(Encode, GradcheckSmallConfig) {
    ParamStore<double> ps;
    Rng rng(16);
    EncoderConfig cfg = small_cfg(4);
    cfg.n_layers_vlm = 1;
    cfg.n_layers_adapter = 1;
    EncoderModel<double> enc(ps, cfg, Vocab::default_vocab(), rng);
    Rng lrng(17);
    enc.attach_loras(2, 2.0, lrng);
    // give lora_B nonzero values so gradients reach lora_A
    for (auto& [name, e] : ps.params)
        if (name.find(".lora_B") != std::string::npos)
            for (auto& v : e.value.data) v = 0.1;

    MultimodalPrompt p;
    p.segments.push_back(Segment::make_text("a red "));
    p.segments.push_back(Segment::make_image(gradient_image(cfg.image_side()), 4, ImageOrigin::Crop));
    p.segments.push_back(Segment::make_text("square in flat style"));
    const auto plan = enc.plan_prompt(p);
    auto build = [&](Graph<double>& g) { return sum_all(enc.encode_var(g, plan)); };

    for (const char* pname :
         {"enc.adapter.head.w", "enc.adapter.blk0.attn.q.w", "enc.adapter.blk0.fc1.w",
          "enc.adapter.ln.g", "enc.proj.w.lora_A", "enc.proj.w.lora_B",
          "enc.vlm.blk0.attn.v.w.lora_B", "enc.vlm.blk0.attn.o.w.lora_A"}) {
        EXPECT_LT(test::max_rel_grad_err(ps, pname, build, 12), 1e-3) << pname;
    }
}

TEST(Encode, PerceiverFixesConditioningLength) {
    // with the perceiver on, every image contributes perceiver_tokens
    // positions regardless of tokens_per_image
    for (int tokens : {16, 64}) {
        ParamStore<float> ps;
        Rng rng(18);
        EncoderConfig cfg = small_cfg(tokens);
        cfg.use_perceiver = true;
        cfg.perceiver_tokens = 4;
        EncoderModel<float> enc(ps, cfg, Vocab::default_vocab(), rng);
        MultimodalPrompt p;
        p.segments.push_back(Segment::make_text("a red "));
        p.segments.push_back(
            Segment::make_image(gradient_image(cfg.image_side()), tokens, ImageOrigin::Crop));
        p.segments.push_back(Segment::make_text("square in flat style"));
        const auto plan = enc.plan_prompt(p);
        const auto spans = plan.image_spans();
        ASSERT_EQ(spans.size(), 1u);
        EXPECT_EQ(spans[0].second - spans[0].first, 4);
        const auto cond = enc.encode(plan);
        EXPECT_EQ(cond.states.shape[0], plan.length());
    }
}
