#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "mmgen/bootstrap/prompt.hpp"
#include "mmgen/core/jsonio.hpp"
#include "mmgen/eval/embedder.hpp"
#include "mmgen/trainer/trainer.hpp"
#include "mmgen/version.hpp"

namespace mmgen::cli {

// Full default configuration, one section per module. The effective config of
// a run is defaults <- config file <- command-line flags, highest last.
inline json default_config() {
    json j;
    j["seed"] = 0;
    j["dataset"] = {{"n", 1000}, {"resolution", 32}};
    j["bootstrap"] = bootstrap::BootstrapConfig().to_json();
    j["bootstrap"]["detector"] = "oracle";
    j["bootstrap"]["sigma"] = 0.1;
    trainer::TrainConfig tc;
    j["train"] = tc.to_json();
    j["train"]["encoder"]["tokens_per_image"] = 0;  // 0 = infer from the prompt data
    j["sample"] = {{"steps", 50}, {"guidance", 6.0}};
    j["eval"] = {{"steps", 50},  {"guidance", 6.0},     {"seeds", 5},
                 {"prompts", 20}, {"harmonize_cases", 8}, {"embedder", eval::EmbedderConfig().to_json()}};
    return j;
}

// Objects merge key-wise (recursively); everything else is replaced.
inline void deep_merge(json& base, const json& over) {
    if (!base.is_object() || !over.is_object()) {
        base = over;
        return;
    }
    for (const auto& [key, value] : over.items()) {
        if (base.contains(key))
            deep_merge(base[key], value);
        else
            base[key] = value;
    }
}

inline json effective_config(const std::optional<std::filesystem::path>& config_file,
                             const json& flag_overrides) {
    json cfg = default_config();
    if (config_file) {
        const json file = read_json_file(*config_file);
        if (!file.is_object()) throw ConfigError("config file must hold a json object");
        deep_merge(cfg, file);
    }
    deep_merge(cfg, flag_overrides);
    return cfg;
}

// One global seed fans out per module through stable hashing, so module
// streams never alias; an explicit per-command --seed wins.
inline uint64_t module_seed(const json& cfg, const std::string& module,
                            const std::optional<uint64_t>& flag_seed) {
    if (flag_seed) return *flag_seed;
    return derive_seed(cfg.at("seed").get<uint64_t>(), module);
}

// Every artifact-producing run records what it ran with.
inline void write_run_files(const std::filesystem::path& out_dir, const json& effective,
                            const std::string& command) {
    std::filesystem::create_directories(out_dir);
    json eff = effective;
    eff["command"] = command;
    eff["config_hash"] = config_hash(effective);
    write_json_file(out_dir / "effective_config.json", eff);
    json versions;
    versions["mmgen"] = MMGEN_VERSION;
    versions["manifest_format"] = kManifestFormat;
    versions["prompt_format"] = kPromptFormat;
    versions["checkpoint_format"] = kCheckpointFormat;
    versions["report_format"] = kReportFormat;
    write_json_file(out_dir / "versions.json", versions);
}

}  // namespace mmgen::cli
