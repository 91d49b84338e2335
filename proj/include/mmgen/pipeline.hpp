#pragma once

#include <memory>
#include <string>

#include "mmgen/core/checkpoint.hpp"
#include "mmgen/diffuser/sampler.hpp"
#include "mmgen/diffuser/unet.hpp"
#include "mmgen/encoder/model.hpp"

namespace mmgen {

// The full model bundle: one parameter store shared by the encoder and the
// UNet, plus the noise schedule and LoRA wiring. Non-movable because the
// models keep pointers into the store.
template <typename T>
struct Pipeline {
    ParamStore<T> ps;
    encoder::EncoderConfig enc_cfg;
    diffuser::UNetConfig unet_cfg;
    diffuser::NoiseSchedule sched;
    encoder::EncoderModel<T> enc;
    diffuser::UNetModel<T> unet;
    int lora_rank = 0;   // 0 = no adapters attached
    T lora_alpha = 0;

    Pipeline(const Pipeline&) = delete;
    Pipeline& operator=(const Pipeline&) = delete;

    Pipeline(encoder::EncoderConfig ec, diffuser::UNetConfig uc, int schedule_T,
             const encoder::Vocab& vocab, uint64_t init_seed, int rank, T alpha)
        : enc_cfg(ec), unet_cfg(uc), sched(diffuser::NoiseSchedule::cosine(schedule_T)) {
        if (ec.d_cond != uc.d_cond) throw ConfigError("encoder d_cond must match unet d_cond");
        Rng enc_rng(derive_seed(init_seed, "enc_init"));
        enc = encoder::EncoderModel<T>(ps, ec, vocab, enc_rng);
        Rng unet_rng(derive_seed(init_seed, "unet_init"));
        unet = diffuser::UNetModel<T>(ps, uc, unet_rng);
        if (rank > 0) {
            lora_rank = rank;
            lora_alpha = alpha;
            Rng lora_rng(derive_seed(init_seed, "lora_init"));
            enc.attach_loras(rank, alpha, lora_rng);
            unet.attach_loras(rank, alpha, lora_rng);
        }
    }

    json model_meta() const {
        json j;
        j["encoder"] = enc_cfg.to_json();
        j["unet"] = unet_cfg.to_json();
        j["schedule"] = sched.to_json();
        j["vocab"] = enc.vocab.words();
        j["lora_rank"] = lora_rank;
        j["lora_alpha"] = static_cast<double>(lora_alpha);
        return j;
    }

    // Checkpoint layout: every model tensor under its own name, optimizer
    // moments under opt.m./opt.v., metadata (configs, vocab, step, rng seed,
    // config hash) in the manifest.
    void save_checkpoint(const std::filesystem::path& dir, json extra_meta,
                         const std::map<std::string, Tensor<T>>* opt_m = nullptr,
                         const std::map<std::string, Tensor<T>>* opt_v = nullptr) const {
        std::vector<std::pair<std::string, const Tensor<T>*>> tensors;
        for (const auto& [name, e] : ps.params) tensors.push_back({name, &e.value});
        if (opt_m)
            for (const auto& [name, t] : *opt_m) tensors.push_back({"opt.m." + name, &t});
        if (opt_v)
            for (const auto& [name, t] : *opt_v) tensors.push_back({"opt.v." + name, &t});
        json meta = std::move(extra_meta);
        meta["model"] = model_meta();
        ckpt::save<T>(dir, tensors, meta);
    }

    struct LoadResult {
        std::unique_ptr<Pipeline> pipeline;
        json meta;
        std::map<std::string, Tensor<T>> opt_m, opt_v;
    };

    static LoadResult load_checkpoint(const std::filesystem::path& dir) {
        auto loaded = ckpt::load<T>(dir);
        const json& model = loaded.meta.at("model");
        const encoder::Vocab vocab =
            encoder::Vocab::from_words(model.at("vocab").get<std::vector<std::string>>());
        LoadResult out;
        out.pipeline = std::make_unique<Pipeline>(
            encoder::EncoderConfig::from_json(model.at("encoder")),
            diffuser::UNetConfig::from_json(model.at("unet")),
            model.at("schedule").at("T").get<int>(), vocab, /*init_seed=*/0,
            model.at("lora_rank").get<int>(), static_cast<T>(model.at("lora_alpha").get<double>()));
        out.meta = loaded.meta;

        Pipeline& p = *out.pipeline;
        size_t model_tensors = 0;
        for (auto& [name, tensor] : loaded.tensors) {
            if (name.rfind("opt.m.", 0) == 0) {
                out.opt_m.emplace(name.substr(6), std::move(tensor));
            } else if (name.rfind("opt.v.", 0) == 0) {
                out.opt_v.emplace(name.substr(6), std::move(tensor));
            } else {
                if (!p.ps.has(name))
                    throw ParseError("checkpoint tensor not part of the model: " + name);
                Tensor<T>& dst = p.ps.value(name);
                if (dst.shape != tensor.shape)
                    throw ParseError("checkpoint tensor shape mismatch: " + name);
                dst = std::move(tensor);
                ++model_tensors;
            }
        }
        if (model_tensors != p.ps.params.size())
            throw ParseError("checkpoint is missing model tensors");
        return out;
    }
};

}  // namespace mmgen
