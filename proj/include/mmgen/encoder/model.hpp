#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mmgen/bootstrap/prompt.hpp"
#include "mmgen/core/jsonio.hpp"
#include "mmgen/core/nn.hpp"
#include "mmgen/encoder/vocab.hpp"

namespace mmgen::encoder {

struct EncoderConfig {
    int d_model = 64;
    int n_layers_vlm = 2;
    int n_heads = 4;
    int patch_size = 4;
    int tokens_per_image = 16;  // {4, 16, 36, 64}
    bool use_perceiver = false;
    int perceiver_tokens = 4;
    int n_layers_adapter = 2;
    int max_sequence_length = 160;
    int d_cond = 64;
    bool identity_attention_hook = false;  // test-only: perceiver attention = I

    int image_side() const { return bootstrap::crop_side_for_tokens(tokens_per_image, patch_size); }
    int tokens_per_block() const { return use_perceiver ? perceiver_tokens : tokens_per_image; }

    void validate() const {
        if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
        const int root = static_cast<int>(std::lround(std::sqrt(double(tokens_per_image))));
        if (root * root != tokens_per_image)
            throw ConfigError("tokens_per_image must be a perfect square");
        if (use_perceiver && perceiver_tokens > tokens_per_image)
            throw ConfigError("perceiver_tokens must not exceed patch count");
        if (n_layers_vlm < 1 || n_layers_adapter < 1) throw ConfigError("layer counts must be >= 1");
    }

    json to_json() const {
        json j;
        j["d_model"] = d_model;
        j["n_layers_vlm"] = n_layers_vlm;
        j["n_heads"] = n_heads;
        j["patch_size"] = patch_size;
        j["tokens_per_image"] = tokens_per_image;
        j["use_perceiver"] = use_perceiver;
        j["perceiver_tokens"] = perceiver_tokens;
        j["n_layers_adapter"] = n_layers_adapter;
        j["max_sequence_length"] = max_sequence_length;
        j["d_cond"] = d_cond;
        return j;
    }

    static EncoderConfig from_json(const json& j) {
        EncoderConfig c;
        c.d_model = j.at("d_model").get<int>();
        c.n_layers_vlm = j.at("n_layers_vlm").get<int>();
        c.n_heads = j.at("n_heads").get<int>();
        c.patch_size = j.at("patch_size").get<int>();
        c.tokens_per_image = j.at("tokens_per_image").get<int>();
        c.use_perceiver = j.at("use_perceiver").get<bool>();
        c.perceiver_tokens = j.at("perceiver_tokens").get<int>();
        c.n_layers_adapter = j.at("n_layers_adapter").get<int>();
        c.max_sequence_length = j.at("max_sequence_length").get<int>();
        c.d_cond = j.at("d_cond").get<int>();
        return c;
    }
};

enum class TokenKind { Text, Image, Special };

// Structural description of one interleaved sequence, independent of any
// graph. Image pixels are carried along so the encoder can embed them.
template <typename T>
struct SequencePlan {
    std::vector<int> token_ids;  // -1 at image patch positions
    std::vector<TokenKind> kinds;
    std::vector<uint8_t> mask;  // 1 = real token, 0 = padding
    struct ImageBlock {
        int pos_begin = 0;  // first patch position (after <img_start>)
        int n_tokens = 0;
        Tensor<T> pixels;  // [3, S, S], model space
    };
    std::vector<ImageBlock> blocks;

    int length() const { return static_cast<int>(token_ids.size()); }

    std::vector<std::pair<int, int>> image_spans() const {
        std::vector<std::pair<int, int>> spans;
        for (const auto& b : blocks) spans.push_back({b.pos_begin, b.pos_begin + b.n_tokens});
        return spans;
    }
};

// Encoder conditioning output consumed by UNet cross-attention.
template <typename T>
struct ConditioningStates {
    Tensor<T> states;  // [L, d_cond]
    std::vector<uint8_t> mask;
};

// ViT patch embedder + optional perceiver pool + causal VLM transformer +
// non-causal adapter + linear head to the cross-attention width.
template <typename T>
struct EncoderModel {
    EncoderConfig cfg;
    Vocab vocab;
    ParamStore<T>* ps = nullptr;

    Linear<T> patch_proj;   // frozen ("Idefics2 ViT" analog)
    std::string patch_pos;  // frozen positional table over patch index
    Linear<T> vit_to_vlm;   // modality projection (LoRA target)
    // perceiver (only when cfg.use_perceiver)
    std::string perceiver_latents;
    MultiheadAttention<T> perceiver_attn;
    std::string tok_emb, pos_emb;  // frozen VLM tables
    std::vector<TransformerBlock<T>> vlm_blocks;
    std::vector<TransformerBlock<T>> adapter_blocks;
    LayerNormLayer<T> adapter_ln;
    Linear<T> head;

    EncoderModel() = default;

    EncoderModel(ParamStore<T>& store, EncoderConfig config, Vocab v, Rng& rng)
        : cfg(config), vocab(std::move(v)), ps(&store) {
        cfg.validate();
        const int d = cfg.d_model;
        const int patch_dim = 3 * cfg.patch_size * cfg.patch_size;
        patch_proj = Linear<T>(store, "enc.vit.patch", patch_dim, d, rng, "vit", false);
        patch_pos = "enc.vit.pos";
        {
            Tensor<T>& t = store.create(patch_pos, {64, d}, "vit", false);
            for (auto& x : t.data) x = static_cast<T>(rng.normal()) * T(0.5);
        }
        vit_to_vlm = Linear<T>(store, "enc.proj", d, d, rng, "proj", false);
        if (cfg.use_perceiver) {
            perceiver_latents = "enc.perceiver.latents";
            Tensor<T>& lat = store.create(perceiver_latents, {cfg.perceiver_tokens, d}, "proj", false);
            for (auto& x : lat.data) x = static_cast<T>(rng.normal()) * T(0.5);
            perceiver_attn =
                MultiheadAttention<T>(store, "enc.perceiver.attn", d, d, cfg.n_heads, rng, "proj", false);
        }
        tok_emb = "enc.vlm.tok_emb";
        {
            Tensor<T>& t = store.create(tok_emb, {vocab.size(), d}, "vlm", false);
            for (auto& x : t.data) x = static_cast<T>(rng.normal()) * T(0.5);
        }
        pos_emb = "enc.vlm.pos";
        {
            Tensor<T>& t = store.create(pos_emb, {cfg.max_sequence_length, d}, "vlm", false);
            for (auto& x : t.data) x = static_cast<T>(rng.normal()) * T(0.5);
        }
        for (int i = 0; i < cfg.n_layers_vlm; ++i)
            vlm_blocks.emplace_back(store, "enc.vlm.blk" + std::to_string(i), d, cfg.n_heads, rng,
                                    "vlm", false);
        for (int i = 0; i < cfg.n_layers_adapter; ++i)
            adapter_blocks.emplace_back(store, "enc.adapter.blk" + std::to_string(i), d, cfg.n_heads,
                                        rng, "adapter", true);
        adapter_ln = LayerNormLayer<T>(store, "enc.adapter.ln", d, "adapter", true);
        head = Linear<T>(store, "enc.adapter.head", d, cfg.d_cond, rng, "adapter", true);
    }

    // LoRA targets per the trained-module table: the ViT->VLM projection and
    // every VLM attention projection. The adapter is fully trained instead.
    void attach_loras(int rank, T alpha, Rng& rng) {
        ps->attach_lora("enc.proj.w", rank, alpha, rng, "proj_lora");
        for (int i = 0; i < cfg.n_layers_vlm; ++i)
            for (const char* p : {".q", ".k", ".v", ".o"})
                ps->attach_lora("enc.vlm.blk" + std::to_string(i) + ".attn" + std::string(p) + ".w",
                                rank, alpha, rng, "vlm_lora");
    }

    // ------------------------------------------------------------------
    // Sequence planning
    // ------------------------------------------------------------------

    SequencePlan<T> plan_prompt(const bootstrap::MultimodalPrompt& prompt) const {
        SequencePlan<T> plan;
        const int block_w = cfg.tokens_per_block();
        for (const auto& seg : prompt.segments) {
            if (seg.type == bootstrap::SegmentType::Text) {
                for (int id : vocab.tokenize(seg.text)) {
                    plan.token_ids.push_back(id);
                    plan.kinds.push_back(TokenKind::Text);
                }
            } else {
                if (seg.pixels.h != cfg.image_side() || seg.pixels.w != cfg.image_side())
                    throw ConfigError("image segment side does not match tokens_per_image");
                if (seg.target_tokens != cfg.tokens_per_image)
                    throw ConfigError("image segment token budget does not match encoder config");
                plan.token_ids.push_back(Vocab::kImgStart);
                plan.kinds.push_back(TokenKind::Special);
                typename SequencePlan<T>::ImageBlock blk;
                blk.pos_begin = static_cast<int>(plan.token_ids.size());
                blk.n_tokens = block_w;
                blk.pixels = image_to_tensor<T>(seg.pixels);
                plan.blocks.push_back(std::move(blk));
                for (int i = 0; i < block_w; ++i) {
                    plan.token_ids.push_back(-1);
                    plan.kinds.push_back(TokenKind::Image);
                }
                plan.token_ids.push_back(Vocab::kImgEnd);
                plan.kinds.push_back(TokenKind::Special);
            }
        }
        plan.mask.assign(plan.token_ids.size(), 1);
        if (plan.length() > cfg.max_sequence_length)
            throw ConfigError("sequence overflow: " + std::to_string(plan.length()) + " > " +
                              std::to_string(cfg.max_sequence_length));
        return plan;
    }

    // Unconditional branch for classifier-free guidance: one <null> token.
    SequencePlan<T> plan_null() const {
        SequencePlan<T> plan;
        plan.token_ids = {Vocab::kNull};
        plan.kinds = {TokenKind::Special};
        plan.mask = {1};
        return plan;
    }

    static void pad_plan(SequencePlan<T>& plan, int target_len) {
        if (plan.length() > target_len) throw ConfigError("pad_plan: plan longer than target");
        while (plan.length() < target_len) {
            plan.token_ids.push_back(Vocab::kPad);
            plan.kinds.push_back(TokenKind::Special);
            plan.mask.push_back(0);
        }
    }

    // ------------------------------------------------------------------
    // Forward pieces
    // ------------------------------------------------------------------

    // [3,S,S] -> [(S/p)^2, d_model], row-major patch order.
    Var<T> patchify(Graph<T>& g, Var<T> image) const {
        const auto& shape = image.val().shape;
        if (shape.size() != 3 || shape[1] != shape[2] || shape[1] % cfg.patch_size != 0)
            throw ShapeError("patchify: square image with side divisible by patch_size required");
        Var<T> w = ps->bind(g, patch_proj.w);
        Var<T> b = ps->bind(g, patch_proj.b);
        Var<T> grid = conv2d(image, w, b, cfg.patch_size, cfg.patch_size, 0);
        return chw_to_rows(grid);
    }

    // k learned latents cross-attend to the patches over one block.
    Var<T> perceiver_pool(Graph<T>& g, Var<T> patches, int k) const {
        if (!cfg.use_perceiver) throw ConfigError("perceiver_pool: perceiver disabled in config");
        const int64_t n = patches.val().shape[0];
        if (k > n) throw ConfigError("perceiver_pool: k exceeds patch count");
        Var<T> lat = ps->bind(g, perceiver_latents);
        if (k != cfg.perceiver_tokens) throw ConfigError("perceiver_pool: k != perceiver_tokens");
        if (cfg.identity_attention_hook) {
            if (k != n) throw ConfigError("identity attention hook requires k == patch count");
            // attention probabilities forced to I: output = Wo(Wv(patches))
            return perceiver_attn.wo(g, perceiver_attn.wv(g, patches));
        }
        return perceiver_attn(g, lat, patches);
    }

    struct Assembled {
        Var<T> emb;  // [L, d_model]
        std::vector<TokenKind> kinds;
        std::vector<std::pair<int, int>> image_spans;
    };

    // Token embeddings for text/special positions, projected patch (or
    // pooled) embeddings for image blocks, plus learned positions.
    Assembled assemble(Graph<T>& g, const SequencePlan<T>& plan) const {
        Var<T> tok = ps->bind(g, tok_emb);
        std::vector<Var<T>> pieces;
        size_t block_i = 0;
        int pos = 0;
        const int L = plan.length();
        while (pos < L) {
            if (plan.token_ids[static_cast<size_t>(pos)] >= 0) {
                std::vector<int> run;
                while (pos < L && plan.token_ids[static_cast<size_t>(pos)] >= 0) {
                    run.push_back(plan.token_ids[static_cast<size_t>(pos)]);
                    ++pos;
                }
                pieces.push_back(embedding(tok, run));
            } else {
                const auto& blk = plan.blocks.at(block_i);
                Var<T> px = g.input(blk.pixels);
                Var<T> patches = patchify(g, px);
                const int64_t n_patches = patches.val().shape[0];
                Var<T> ppos = slice_rows(ps->bind(g, patch_pos), 0, n_patches);
                patches = add(patches, ppos);
                if (cfg.use_perceiver) patches = perceiver_pool(g, patches, cfg.perceiver_tokens);
                pieces.push_back(vit_to_vlm(g, patches));
                pos += blk.n_tokens;
                ++block_i;
            }
        }
        Var<T> emb = pieces.size() == 1 ? pieces[0] : concat_rows(pieces);
        if (emb.val().shape[0] != L) throw ShapeError("assemble: length mismatch");
        emb = add(emb, slice_rows(ps->bind(g, pos_emb), 0, L));
        return {emb, plan.kinds, plan.image_spans()};
    }

    // Causal stack only (exposed for the causality contract tests).
    Var<T> vlm_states(Graph<T>& g, Var<T> emb, const std::vector<uint8_t>& mask) const {
        Var<T> x = emb;
        for (const auto& blk : vlm_blocks) x = blk(g, x, /*causal=*/true, &mask);
        return x;
    }

    Var<T> encode_var(Graph<T>& g, const SequencePlan<T>& plan) const {
        Assembled a = assemble(g, plan);
        Var<T> x = vlm_states(g, a.emb, plan.mask);
        for (const auto& blk : adapter_blocks) x = blk(g, x, /*causal=*/false, &plan.mask);
        x = adapter_ln(g, x);
        return head(g, x);
    }

    ConditioningStates<T> encode(const SequencePlan<T>& plan) const {
        Graph<T> g(false);
        Var<T> out = encode_var(g, plan);
        if (!out.val().all_finite()) throw DivergenceError("encoder produced non-finite states");
        return {out.val(), plan.mask};
    }
};

}  // namespace mmgen::encoder
