#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mmgen/diffuser/schedule.hpp"
#include "mmgen/diffuser/unet.hpp"

namespace mmgen::diffuser {

struct SampleStats {
    int encoder_calls = 0;
    int unet_calls = 0;
};

// Uniformly spaced level subset from T down to 0 inclusive (steps transitions).
inline std::vector<int> ddim_timesteps(int T, int steps) {
    if (steps < 1 || steps > T) throw ConfigError("ddim steps must lie in [1, T]");
    std::vector<int> ts(static_cast<size_t>(steps) + 1);
    for (int i = 0; i <= steps; ++i)
        ts[static_cast<size_t>(i)] = static_cast<int>(std::lround(
            static_cast<double>(T) * (1.0 - static_cast<double>(i) / steps)));
    for (size_t i = 1; i < ts.size(); ++i)
        if (ts[i] >= ts[i - 1]) throw ConfigError("ddim steps too dense for T");
    return ts;
}

// Deterministic DDIM sampling with classifier-free guidance. The encoder runs
// once per prompt (plus once for the null prompt when guidance != 1); the
// UNet runs once (guidance == 1) or twice per step.
template <typename T>
struct Sampler {
    const encoder::EncoderModel<T>* enc = nullptr;
    const UNetModel<T>* unet = nullptr;
    const NoiseSchedule* sched = nullptr;
    SampleStats last_stats;

    Sampler(const encoder::EncoderModel<T>& e, const UNetModel<T>& u, const NoiseSchedule& s)
        : enc(&e), unet(&u), sched(&s) {}

    // Latent-space output in [-1,1] land (unclamped); `sample` rescales.
    Tensor<T> sample_latent(const bootstrap::MultimodalPrompt& prompt, int steps, T guidance,
                            uint64_t seed) {
        last_stats = SampleStats{};
        const encoder::SequencePlan<T> plan = enc->plan_prompt(prompt);
        const encoder::ConditioningStates<T> cond = enc->encode(plan);
        last_stats.encoder_calls++;
        encoder::ConditioningStates<T> null_cond;
        const bool use_cfg = guidance != T(1);
        if (use_cfg) {
            null_cond = enc->encode(enc->plan_null());
            last_stats.encoder_calls++;
        }

        const int S = unet->cfg.input_size;
        Rng rng(derive_seed(seed, "x_T"));
        Tensor<T> x({unet->cfg.in_channels, S, S});
        for (auto& v : x.data) v = static_cast<T>(rng.normal());

        const std::vector<int> ts = ddim_timesteps(sched->T, steps);
        for (size_t i = 0; i + 1 < ts.size(); ++i) {
            const int t = ts[i], t_prev = ts[i + 1];
            Tensor<T> eps = unet->predict(x, t, cond);
            last_stats.unet_calls++;
            if (use_cfg) {
                const Tensor<T> eps_u = unet->predict(x, t, null_cond);
                last_stats.unet_calls++;
                eps = cfg_combine(eps, eps_u, guidance);
            }
            x = ddim_step(x, eps, t, t_prev, *sched);
            if (!x.all_finite())
                throw DivergenceError("sampling diverged at step " + std::to_string(i) +
                                      " (t=" + std::to_string(t) + ")");
        }
        return x;
    }

    ImageF sample(const bootstrap::MultimodalPrompt& prompt, int steps, T guidance, uint64_t seed) {
        ImageF img = tensor_to_image(sample_latent(prompt, steps, guidance, seed));
        img.quantize8();
        return img;
    }
};

}  // namespace mmgen::diffuser
