#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "mmgen/core/jsonio.hpp"
#include "mmgen/core/nn.hpp"
#include "mmgen/encoder/model.hpp"

namespace mmgen::diffuser {

struct UNetConfig {
    int in_channels = 3;
    int input_size = 32;  // training/sampling side; levels derive from it
    int base_channels = 16;
    std::vector<int> channel_mults = {1, 2, 2};
    std::vector<int> attention_resolutions = {16, 8};
    int d_cond = 64;
    int n_heads = 4;
    int d_time = 64;
    int norm_groups = 8;

    int channels(size_t level) const { return base_channels * channel_mults[level]; }
    int resolution(size_t level) const { return input_size >> level; }
    bool attention_at(size_t level) const {
        return std::find(attention_resolutions.begin(), attention_resolutions.end(),
                         resolution(level)) != attention_resolutions.end();
    }

    void validate() const {
        if (channel_mults.empty()) throw ConfigError("unet needs at least one level");
        for (size_t i = 0; i < channel_mults.size(); ++i) {
            if (channels(i) % norm_groups != 0)
                throw ConfigError("channels must be divisible by norm groups");
            if (channels(i) % n_heads != 0)
                throw ConfigError("channels must be divisible by heads");
            if (resolution(i) < 4) throw ConfigError("too many levels for input size");
        }
        // the mid transformer always cross-attends, so >= 1 is structural
    }

    json to_json() const {
        json j;
        j["in_channels"] = in_channels;
        j["input_size"] = input_size;
        j["base_channels"] = base_channels;
        j["channel_mults"] = channel_mults;
        j["attention_resolutions"] = attention_resolutions;
        j["d_cond"] = d_cond;
        j["n_heads"] = n_heads;
        j["d_time"] = d_time;
        j["norm_groups"] = norm_groups;
        return j;
    }

    static UNetConfig from_json(const json& j) {
        UNetConfig c;
        c.in_channels = j.at("in_channels").get<int>();
        c.input_size = j.at("input_size").get<int>();
        c.base_channels = j.at("base_channels").get<int>();
        c.channel_mults = j.at("channel_mults").get<std::vector<int>>();
        c.attention_resolutions = j.at("attention_resolutions").get<std::vector<int>>();
        c.d_cond = j.at("d_cond").get<int>();
        c.n_heads = j.at("n_heads").get<int>();
        c.d_time = j.at("d_time").get<int>();
        c.norm_groups = j.at("norm_groups").get<int>();
        return c;
    }
};

// GN -> SiLU -> conv -> (+ time bias) -> GN -> SiLU -> conv(zero) -> + skip
template <typename T>
struct UNetResBlock {
    GroupNormLayer<T> gn1, gn2;
    Conv2dLayer<T> conv1, conv2;
    Linear<T> time_proj;
    Conv2dLayer<T> skip;  // 1x1, only when channels change
    bool has_skip = false;

    UNetResBlock() = default;
    UNetResBlock(ParamStore<T>& ps, const std::string& name, int c_in, int c_out, int d_time,
                 int groups, Rng& rng, const std::string& group) {
        gn1 = GroupNormLayer<T>(ps, name + ".gn1", c_in, groups, group, true);
        conv1 = Conv2dLayer<T>(ps, name + ".conv1", c_in, c_out, 3, rng, group, true);
        time_proj = Linear<T>(ps, name + ".temb", d_time, c_out, rng, group, true);
        gn2 = GroupNormLayer<T>(ps, name + ".gn2", c_out, groups, group, true);
        conv2 = Conv2dLayer<T>(ps, name + ".conv2", c_out, c_out, 3, rng, group, true, 1,
                               /*zero_init=*/true);
        if (c_in != c_out) {
            has_skip = true;
            skip = Conv2dLayer<T>(ps, name + ".skip", c_in, c_out, 1, rng, group, true);
        }
    }

    Var<T> operator()(Graph<T>& g, Var<T> x, Var<T> temb_row) const {
        Var<T> h = conv1(g, silu(gn1(g, x)));
        Var<T> bias = reshape(time_proj(g, temb_row), {h.val().shape[0]});
        h = add_channel_bias(h, bias);
        h = conv2(g, silu(gn2(g, h)));
        Var<T> base = has_skip ? skip(g, x) : x;
        return add(base, h);
    }
};

// Spatial transformer block: self-attention (optional), cross-attention on
// the conditioning states, MLP; zero-initialized output projection.
template <typename T>
struct UNetXBlock {
    GroupNormLayer<T> gn;
    Linear<T> proj_in, proj_out;
    LayerNormLayer<T> ln1, ln2, ln3;
    MultiheadAttention<T> self_attn, cross_attn;
    Linear<T> fc1, fc2;
    bool with_self = true;

    UNetXBlock() = default;
    UNetXBlock(ParamStore<T>& ps, const std::string& name, int channels, int d_cond, int heads,
               int groups, Rng& rng, const std::string& group, bool self_attention)
        : with_self(self_attention) {
        gn = GroupNormLayer<T>(ps, name + ".gn", channels, groups, group, true);
        proj_in = Linear<T>(ps, name + ".proj_in", channels, channels, rng, group, true);
        if (with_self) {
            ln1 = LayerNormLayer<T>(ps, name + ".ln1", channels, group, true);
            self_attn = MultiheadAttention<T>(ps, name + ".self", channels, channels, heads, rng,
                                              group, true);
        }
        ln2 = LayerNormLayer<T>(ps, name + ".ln2", channels, group, true);
        cross_attn = MultiheadAttention<T>(ps, name + ".cross", channels, d_cond, heads, rng, group,
                                           true);
        ln3 = LayerNormLayer<T>(ps, name + ".ln3", channels, group, true);
        fc1 = Linear<T>(ps, name + ".fc1", channels, channels * 4, rng, group, true);
        fc2 = Linear<T>(ps, name + ".fc2", channels * 4, channels, rng, group, true);
        proj_out = Linear<T>(ps, name + ".proj_out", channels, channels, rng, group, true, true,
                             /*zero_init=*/true);
    }

    Var<T> operator()(Graph<T>& g, Var<T> x, Var<T> states, const std::vector<uint8_t>* mask) const {
        const int64_t H = x.val().shape[1], W = x.val().shape[2];
        Var<T> h = proj_in(g, chw_to_rows(gn(g, x)));
        if (with_self) {
            Var<T> n = ln1(g, h);
            h = add(h, self_attn(g, n, n));
        }
        h = add(h, cross_attn(g, ln2(g, h), states, false, mask));
        h = add(h, fc2(g, silu(fc1(g, ln3(g, h)))));
        return add(x, rows_to_chw(proj_out(g, h), H, W));
    }

    void attach_loras(ParamStore<T>& ps, int rank, T alpha, Rng& rng, const std::string& group) const {
        if (with_self)
            for (const auto& lin : {self_attn.wq, self_attn.wk, self_attn.wv, self_attn.wo})
                ps.attach_lora(lin.w, rank, alpha, rng, group);
        for (const auto& lin : {cross_attn.wq, cross_attn.wk, cross_attn.wv, cross_attn.wo})
            ps.attach_lora(lin.w, rank, alpha, rng, group);
    }
};

// epsilon-prediction UNet conditioned on timestep features and cross-attended
// encoder states.
template <typename T>
struct UNetModel {
    UNetConfig cfg;
    ParamStore<T>* ps = nullptr;

    Linear<T> time1, time2;
    Conv2dLayer<T> conv_in;
    std::vector<UNetResBlock<T>> down_res;
    std::vector<UNetXBlock<T>> down_x;  // aligned with levels; unused slots stay default
    std::vector<bool> level_attn;
    std::vector<Conv2dLayer<T>> downsample;
    UNetResBlock<T> mid_res_a, mid_res_b;
    UNetXBlock<T> mid_x;
    std::vector<UNetResBlock<T>> up_res;
    std::vector<UNetXBlock<T>> up_x;
    std::vector<Conv2dLayer<T>> upconv;
    GroupNormLayer<T> out_gn;
    Conv2dLayer<T> out_conv;

    UNetModel() = default;

    UNetModel(ParamStore<T>& store, UNetConfig config, Rng& rng) : cfg(config), ps(&store) {
        cfg.validate();
        const std::string grp = "unet";
        const size_t N = cfg.channel_mults.size();
        time1 = Linear<T>(store, "unet.time.l1", cfg.d_time, cfg.d_time, rng, grp, true);
        time2 = Linear<T>(store, "unet.time.l2", cfg.d_time, cfg.d_time, rng, grp, true);
        conv_in = Conv2dLayer<T>(store, "unet.conv_in", cfg.in_channels, cfg.channels(0), 3, rng,
                                 grp, true);
        down_res.resize(N);
        down_x.resize(N);
        up_res.resize(N);
        up_x.resize(N);
        level_attn.resize(N);
        for (size_t i = 0; i < N; ++i) {
            const int ch = cfg.channels(i);
            level_attn[i] = cfg.attention_at(i);
            down_res[i] = UNetResBlock<T>(store, "unet.down" + std::to_string(i) + ".res", ch, ch,
                                          cfg.d_time, cfg.norm_groups, rng, grp);
            if (level_attn[i])
                down_x[i] = UNetXBlock<T>(store, "unet.down" + std::to_string(i) + ".x", ch,
                                          cfg.d_cond, cfg.n_heads, cfg.norm_groups, rng, grp,
                                          /*self_attention=*/cfg.resolution(i) <= 8);
            if (i + 1 < N)
                downsample.emplace_back(store, "unet.downsample" + std::to_string(i), ch,
                                        cfg.channels(i + 1), 3, rng, grp, true, /*stride=*/2);
        }
        const int cm = cfg.channels(N - 1);
        mid_res_a = UNetResBlock<T>(store, "unet.mid.res_a", cm, cm, cfg.d_time, cfg.norm_groups,
                                    rng, grp);
        mid_x = UNetXBlock<T>(store, "unet.mid.x", cm, cfg.d_cond, cfg.n_heads, cfg.norm_groups,
                              rng, grp, /*self_attention=*/true);
        mid_res_b = UNetResBlock<T>(store, "unet.mid.res_b", cm, cm, cfg.d_time, cfg.norm_groups,
                                    rng, grp);
        for (size_t i = 0; i < N; ++i) {
            const int ch = cfg.channels(i);
            const int ch_up = (i + 1 < N) ? cfg.channels(i + 1) : cm;
            up_res[i] = UNetResBlock<T>(store, "unet.up" + std::to_string(i) + ".res", ch_up + ch,
                                        ch, cfg.d_time, cfg.norm_groups, rng, grp);
            if (level_attn[i])
                up_x[i] = UNetXBlock<T>(store, "unet.up" + std::to_string(i) + ".x", ch, cfg.d_cond,
                                        cfg.n_heads, cfg.norm_groups, rng, grp,
                                        /*self_attention=*/cfg.resolution(i) <= 8);
            if (i > 0)
                upconv.emplace_back(store, "unet.upconv" + std::to_string(i), cfg.channels(i),
                                    cfg.channels(i), 3, rng, grp, true);
        }
        out_gn = GroupNormLayer<T>(store, "unet.out.gn", cfg.channels(0), cfg.norm_groups, grp, true);
        out_conv = Conv2dLayer<T>(store, "unet.out.conv", cfg.channels(0), cfg.in_channels, 3, rng,
                                  grp, true, 1, /*zero_init=*/true);
    }

    // Rank-r adapters on every attention projection (self and cross).
    void attach_loras(int rank, T alpha, Rng& rng) {
        const std::string grp = "unet_lora";
        for (size_t i = 0; i < level_attn.size(); ++i)
            if (level_attn[i]) {
                down_x[i].attach_loras(*ps, rank, alpha, rng, grp);
                up_x[i].attach_loras(*ps, rank, alpha, rng, grp);
            }
        mid_x.attach_loras(*ps, rank, alpha, rng, grp);
    }

    // x: [3,S,S] latent at level t; states/mask: encoder conditioning.
    Var<T> forward(Graph<T>& g, Var<T> x, int t, Var<T> states,
                   const std::vector<uint8_t>* cond_mask) const {
        if (x.val().shape[1] != cfg.input_size || x.val().shape[2] != cfg.input_size)
            throw ShapeError("unet: input side does not match config");
        Var<T> temb = time2(g, silu(time1(g, g.input(timestep_features<T>(t, cfg.d_time)))));

        const size_t N = cfg.channel_mults.size();
        Var<T> h = conv_in(g, x);
        std::vector<Var<T>> skips;
        for (size_t i = 0; i < N; ++i) {
            if (i > 0) h = downsample[i - 1](g, h);
            h = down_res[i](g, h, temb);
            if (level_attn[i]) h = down_x[i](g, h, states, cond_mask);
            skips.push_back(h);
        }
        h = mid_res_a(g, h, temb);
        h = mid_x(g, h, states, cond_mask);
        h = mid_res_b(g, h, temb);
        for (size_t ri = N; ri-- > 0;) {
            h = concat_channels(h, skips[ri]);
            h = up_res[ri](g, h, temb);
            if (level_attn[ri]) h = up_x[ri](g, h, states, cond_mask);
            if (ri > 0) h = upconv[ri - 1](g, upsample_nearest2(h));
        }
        return out_conv(g, silu(out_gn(g, h)));
    }

    // No-grad epsilon prediction for sampling.
    Tensor<T> predict(const Tensor<T>& x_t, int t, const encoder::ConditioningStates<T>& cond) const {
        Graph<T> g(false);
        Var<T> out = forward(g, g.input(x_t), t, g.input(cond.states), &cond.mask);
        return out.val();
    }
};

}  // namespace mmgen::diffuser
