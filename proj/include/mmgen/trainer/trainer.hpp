#pragma once

#include <deque>
#include <fstream>
#include <mutex>
#include <optional>
#include <sstream>

#include "mmgen/bootstrap/serialize.hpp"
#include "mmgen/diffuser/loss.hpp"
#include "mmgen/pipeline.hpp"
#include "mmgen/trainer/optim.hpp"

namespace mmgen::trainer {

// Per-module base learning rates (scaled by one global multiplier): the ViT
// patch stack is frozen; the modality projection and VLM train through
// rank-8 LoRA at 3e-6; the adapter transformer is fully trained at 1e-5; the
// UNet side trains at 5e-6.
inline constexpr double kLrProjVlm = 3e-6;
inline constexpr double kLrAdapter = 1e-5;
inline constexpr double kLrUnet = 5e-6;

struct TrainConfig {
    int stage = 1;
    int batch_size = 8;
    int64_t steps = 1500;
    double lr_multiplier = 300.0;
    uint64_t seed = 0;
    double cond_drop_prob = 0.1;
    int64_t checkpoint_every = 500;
    int lora_rank = 8;
    double lora_alpha = 8.0;
    int schedule_T = 1000;
    encoder::EncoderConfig enc;
    diffuser::UNetConfig unet;

    void validate() const {
        if (stage != 1 && stage != 2) throw ConfigError("stage must be 1 or 2");
        if (batch_size < 1 || steps < 0) throw ConfigError("bad batch/steps");
        if (cond_drop_prob < 0 || cond_drop_prob > 1) throw ConfigError("bad cond_drop_prob");
        enc.validate();
        unet.validate();
    }

    json to_json() const {
        json j;
        j["stage"] = stage;
        j["batch_size"] = batch_size;
        j["steps"] = steps;
        j["lr_multiplier"] = lr_multiplier;
        j["seed"] = seed;
        j["cond_drop_prob"] = cond_drop_prob;
        j["checkpoint_every"] = checkpoint_every;
        j["lora_rank"] = lora_rank;
        j["lora_alpha"] = lora_alpha;
        j["schedule_T"] = schedule_T;
        j["encoder"] = enc.to_json();
        j["unet"] = unet.to_json();
        return j;
    }

    static TrainConfig from_json(const json& j) {
        TrainConfig c;
        c.stage = j.at("stage").get<int>();
        c.batch_size = j.at("batch_size").get<int>();
        c.steps = j.at("steps").get<int64_t>();
        c.lr_multiplier = j.at("lr_multiplier").get<double>();
        c.seed = j.at("seed").get<uint64_t>();
        c.cond_drop_prob = j.at("cond_drop_prob").get<double>();
        c.checkpoint_every = j.at("checkpoint_every").get<int64_t>();
        c.lora_rank = j.at("lora_rank").get<int>();
        c.lora_alpha = j.at("lora_alpha").get<double>();
        c.schedule_T = j.at("schedule_T").get<int>();
        c.enc = encoder::EncoderConfig::from_json(j.at("encoder"));
        c.unet = diffuser::UNetConfig::from_json(j.at("unet"));
        return c;
    }

    // Run identity: everything that must match for a resume to be valid.
    // Run length and checkpoint cadence deliberately stay out.
    std::string identity_hash() const {
        json j = to_json();
        j.erase("steps");
        j.erase("checkpoint_every");
        return config_hash(j);
    }
};

inline std::map<std::string, double> group_learning_rates(const TrainConfig& cfg) {
    const double k = cfg.lr_multiplier;
    return {
        {"proj_lora", kLrProjVlm * k}, {"vlm_lora", kLrProjVlm * k}, {"adapter", kLrAdapter * k},
        {"unet", kLrUnet * k},         {"unet_lora", kLrUnet * k},
    };
}

// Aborts on a non-finite loss, or when the loss exceeds 10x its trailing
// median for 50 consecutive steps.
class DivergenceMonitor {
public:
    void observe(int64_t step, double loss) {
        if (!std::isfinite(loss))
            throw DivergenceError("loss is non-finite at step " + std::to_string(step) + "; tail: " +
                                  tail());
        if (window_.size() >= 10) {
            std::vector<double> sorted(window_.begin(), window_.end());
            std::nth_element(sorted.begin(), sorted.begin() + sorted.size() / 2, sorted.end());
            const double median = sorted[sorted.size() / 2];
            if (loss > 10.0 * median) {
                if (++consecutive_high_ >= 50)
                    throw DivergenceError("loss exceeded 10x trailing median for 50 consecutive "
                                          "steps, at step " +
                                          std::to_string(step) + "; tail: " + tail());
            } else {
                consecutive_high_ = 0;
            }
        }
        window_.push_back(loss);
        if (window_.size() > 100) window_.pop_front();
    }

private:
    std::string tail() const {
        std::ostringstream os;
        const size_t n = std::min<size_t>(window_.size(), 8);
        for (size_t i = window_.size() - n; i < window_.size(); ++i) os << window_[i] << " ";
        return os.str();
    }

    std::deque<double> window_;
    int consecutive_high_ = 0;
};

template <typename T>
struct TrainData {
    std::vector<bootstrap::PromptRecord> prompts;
    scenegen::DatasetManifest manifest;
};

struct TrainResult {
    std::filesystem::path checkpoint_dir;
    std::vector<double> losses;
};

namespace detail {

// Decoded training images, keyed by sample id; shared across steps.
template <typename T>
class SampleCache {
public:
    explicit SampleCache(const scenegen::DatasetManifest& m) : manifest_(m) {
        for (const auto& r : m.records) by_id_[r.id] = &r;
    }

    const Tensor<T>& get(const std::string& id) {
        std::lock_guard<std::mutex> lock(mu_);
        auto it = cache_.find(id);
        if (it != cache_.end()) return it->second;
        auto rit = by_id_.find(id);
        if (rit == by_id_.end()) throw ConfigError("prompt references unknown sample id " + id);
        const scenegen::ImageSample s = scenegen::load_sample(manifest_, *rit->second);
        return cache_.emplace(id, image_to_tensor<T>(s.pixels)).first->second;
    }

private:
    const scenegen::DatasetManifest& manifest_;
    std::map<std::string, const scenegen::DatasetRecord*> by_id_;
    std::map<std::string, Tensor<T>> cache_;
    std::mutex mu_;
};

}  // namespace detail

// Two-stage training loop. Stage constraints are enforced at batch assembly:
// stage 1 admits at most 4 image segments per prompt, stage 2 exactly one
// crop. Every run is a pure function of (config, data, seed); a resumed run
// continues bit-identically because the per-step rng streams derive from
// (seed, global step) and the optimizer state rides in the checkpoint.
template <typename T>
TrainResult train(const TrainConfig& cfg, const TrainData<T>& data,
                  const std::filesystem::path& out_dir,
                  const std::optional<std::filesystem::path>& resume = {}) {
    cfg.validate();
    if (data.prompts.empty()) throw ConfigError("train: no prompts");
    std::filesystem::create_directories(out_dir);

    auto pipeline = std::make_unique<Pipeline<T>>(cfg.enc, cfg.unet, cfg.schedule_T,
                                                  encoder::Vocab::default_vocab(),
                                                  derive_seed(cfg.seed, "init"), cfg.lora_rank,
                                                  static_cast<T>(cfg.lora_alpha));
    Pipeline<T>& p = *pipeline;

    AdamW<T> opt;
    opt.group_lr = group_learning_rates(cfg);
    if (!(opt.group_lr.at("adapter") > opt.group_lr.at("unet") &&
          opt.group_lr.at("unet") > opt.group_lr.at("vlm_lora")))
        throw ConfigError("learning-rate ordering violated: adapter > unet > vlm required");

    int64_t start_step = 0;
    if (resume) {
        auto loaded = ckpt::load<T>(*resume);
        const json& tmeta = loaded.meta.at("train");
        const int ckpt_stage = tmeta.at("stage").get<int>();
        size_t model_tensors = 0;
        for (auto& [name, tensor] : loaded.tensors) {
            if (name.rfind("opt.m.", 0) == 0 || name.rfind("opt.v.", 0) == 0) continue;
            if (!p.ps.has(name)) throw ParseError("checkpoint tensor not part of the model: " + name);
            Tensor<T>& dst = p.ps.value(name);
            if (dst.shape != tensor.shape)
                throw ParseError("checkpoint tensor shape mismatch: " + name);
            dst = std::move(tensor);
            ++model_tensors;
        }
        if (model_tensors != p.ps.params.size())
            throw ParseError("checkpoint is missing model tensors");
        if (ckpt_stage == cfg.stage) {
            // continuation of the same run: identity must match, optimizer
            // moments and the step counter carry over
            if (tmeta.at("config_hash").get<std::string>() != cfg.identity_hash())
                throw ConfigError("resume config hash mismatch");
            for (auto& [name, tensor] : loaded.tensors) {
                if (name.rfind("opt.m.", 0) == 0) opt.m.emplace(name.substr(6), std::move(tensor));
                if (name.rfind("opt.v.", 0) == 0) opt.v.emplace(name.substr(6), std::move(tensor));
            }
            opt.step_count = tmeta.at("opt_steps").get<int64_t>();
            start_step = tmeta.at("step").get<int64_t>();
        }
        // different stage: weights carry over, fresh optimizer and counters
    }

    detail::SampleCache<T> cache(data.manifest);
    const int max_images = cfg.stage == 1 ? 4 : 1;

    std::ofstream csv(out_dir / "loss.csv");
    if (!csv) throw IoError("cannot open loss csv for write");
    csv << "step,loss,lr_adapter,lr_unet,lr_vlm\n";
    char line[160];

    auto save = [&](const std::filesystem::path& dir, int64_t completed) {
        json meta;
        meta["train"] = {{"stage", cfg.stage},
                         {"step", completed},
                         {"opt_steps", opt.step_count},
                         {"config_hash", cfg.identity_hash()},
                         {"seed", cfg.seed},
                         {"config", cfg.to_json()}};
        p.save_checkpoint(dir, meta, &opt.m, &opt.v);
    };

    DivergenceMonitor monitor;
    TrainResult result;
    const uint64_t step_root = derive_seed(cfg.seed, "train_step");
    for (int64_t s = start_step; s < start_step + cfg.steps; ++s) {
        Rng rng(derive_seed(step_root, static_cast<uint64_t>(s)));
        std::vector<std::pair<encoder::SequencePlan<T>, Tensor<T>>> batch;
        int max_len = 0;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const auto& rec = data.prompts[static_cast<size_t>(
                rng.uniform_int(0, static_cast<int64_t>(data.prompts.size()) - 1))];
            if (rec.prompt.image_count() > max_images ||
                (cfg.stage == 2 && rec.prompt.crop_count() != 1))
                throw ConfigError("prompt " + rec.id + " violates stage-" +
                                  std::to_string(cfg.stage) + " image budget");
            encoder::SequencePlan<T> plan = p.enc.plan_prompt(rec.prompt);
            max_len = std::max(max_len, plan.length());
            batch.push_back({std::move(plan), cache.get(rec.source_sample_id)});
        }
        for (auto& [plan, x0] : batch) {
            encoder::EncoderModel<T>::pad_plan(plan, max_len);
            if (x0.shape[1] != cfg.unet.input_size)
                throw ConfigError("sample resolution does not match unet input size");
        }

        diffuser::BatchGrads<T> grads;
        Rng loss_rng = rng.child("loss");
        const T loss =
            diffuser::training_loss(p.enc, p.unet, p.sched, batch, loss_rng, cfg.cond_drop_prob, &grads);
        monitor.observe(s, static_cast<double>(loss));
        opt.step(p.ps, grads.grads);
        result.losses.push_back(static_cast<double>(loss));

        std::snprintf(line, sizeof(line), "%lld,%.9g,%.9g,%.9g,%.9g\n", static_cast<long long>(s),
                      static_cast<double>(loss), opt.group_lr.at("adapter"), opt.group_lr.at("unet"),
                      opt.group_lr.at("vlm_lora"));
        csv << line;

        if (cfg.checkpoint_every > 0 && (s + 1) % cfg.checkpoint_every == 0 &&
            s + 1 != start_step + cfg.steps)
            save(out_dir / ("ckpt_" + std::to_string(s + 1)), s + 1);
    }
    csv.close();

    result.checkpoint_dir = out_dir / "checkpoint";
    save(result.checkpoint_dir, start_step + cfg.steps);
    return result;
}

}  // namespace mmgen::trainer
