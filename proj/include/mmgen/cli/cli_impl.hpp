#pragma once

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mmgen/cli/config.hpp"
#include "mmgen/eval/harness.hpp"

namespace mmgen::cli {

namespace detail {

namespace fs = std::filesystem;

// dataset manifest path from a --data argument that may point at the dataset
// directory or the manifest file itself
inline fs::path resolve_manifest_path(const fs::path& data) {
    if (fs::is_directory(data)) return data / "manifest.jsonl";
    return data;
}

inline std::vector<uint64_t> derived_seeds(uint64_t base, int count) {
    std::vector<uint64_t> seeds(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) seeds[static_cast<size_t>(i)] = derive_seed(base, static_cast<uint64_t>(i));
    return seeds;
}

inline int infer_tokens_from_prompts(const std::vector<bootstrap::PromptRecord>& prompts, int stage) {
    for (const auto& rec : prompts)
        for (const auto& seg : rec.prompt.segments)
            if (seg.type == bootstrap::SegmentType::Image) return seg.target_tokens;
    return stage == 2 ? 64 : 16;
}

struct DatasetArgs {
    std::optional<int64_t> n;
    std::optional<uint64_t> seed;
    std::optional<int> resolution;
    std::string out;
    std::optional<std::string> config;
};

inline void run_dataset_build(const DatasetArgs& a) {
    json flags = json::object();
    if (a.n) flags["dataset"]["n"] = *a.n;
    if (a.resolution) flags["dataset"]["resolution"] = *a.resolution;
    json cfg = effective_config(a.config ? std::optional<fs::path>(*a.config) : std::nullopt, flags);
    const uint64_t seed = module_seed(cfg, "dataset", a.seed);
    cfg["dataset"]["resolved_seed"] = seed;

    scenegen::build_dataset(cfg["dataset"]["n"].get<int64_t>(), seed, a.out,
                            cfg["dataset"]["resolution"].get<int>());
    write_run_files(a.out, cfg, "dataset build");
    std::printf("dataset: wrote %lld samples to %s\n",
                static_cast<long long>(cfg["dataset"]["n"].get<int64_t>()), a.out.c_str());
}

struct BootstrapArgs {
    std::string manifest;
    std::string out;
    std::optional<int> stage;
    std::optional<uint64_t> seed;
    std::optional<std::string> detector;
    std::optional<double> sigma;
    std::optional<std::string> config;
};

inline void run_bootstrap_cmd(const BootstrapArgs& a) {
    json flags = json::object();
    if (a.stage) flags["bootstrap"]["stage"] = *a.stage;
    if (a.detector) flags["bootstrap"]["detector"] = *a.detector;
    if (a.sigma) flags["bootstrap"]["sigma"] = *a.sigma;
    json cfg = effective_config(a.config ? std::optional<fs::path>(*a.config) : std::nullopt, flags);
    const uint64_t seed = module_seed(cfg, "bootstrap", a.seed);
    cfg["bootstrap"]["resolved_seed"] = seed;

    const auto manifest = scenegen::load_manifest(a.manifest);
    const auto bcfg = bootstrap::BootstrapConfig::from_json(cfg["bootstrap"]);
    const auto mode = bootstrap::detector_from_string(cfg["bootstrap"]["detector"].get<std::string>());
    const auto stats = bootstrap::run_bootstrap(manifest, a.out, bcfg, seed, mode,
                                                cfg["bootstrap"]["sigma"].get<double>());

    cfg["bootstrap"]["dataset_manifest_abs"] = fs::absolute(a.manifest).string();
    write_run_files(a.out, cfg, "bootstrap run");
    json report;
    report["prompts"] = stats.prompts;
    report["skipped"] = stats.skipped;
    report["mean_det_iou"] = stats.mean_det_iou;
    write_json_file(fs::path(a.out) / "report.json", report);
    std::printf("bootstrap: %lld prompts (%lld skipped), mean detection IoU %.4f\n",
                static_cast<long long>(stats.prompts), static_cast<long long>(stats.skipped),
                stats.mean_det_iou);
}

struct TrainArgs {
    std::optional<int> stage;
    std::string data;
    std::optional<int64_t> steps;
    std::optional<int> batch;
    std::optional<uint64_t> seed;
    std::string out;
    std::optional<std::string> resume;
    std::optional<std::string> config;
};

inline void run_train(const TrainArgs& a) {
    json flags = json::object();
    if (a.stage) flags["train"]["stage"] = *a.stage;
    if (a.steps) flags["train"]["steps"] = *a.steps;
    if (a.batch) flags["train"]["batch_size"] = *a.batch;
    json cfg = effective_config(a.config ? std::optional<fs::path>(*a.config) : std::nullopt, flags);

    trainer::TrainData<float> data;
    data.prompts = bootstrap::load_prompts(a.data);
    const json boot_cfg = read_json_file(fs::path(a.data) / "effective_config.json");
    data.manifest = scenegen::load_manifest(
        boot_cfg.at("bootstrap").at("dataset_manifest_abs").get<std::string>());

    trainer::TrainConfig tc = trainer::TrainConfig::from_json(cfg["train"]);
    tc.seed = module_seed(cfg, "train", a.seed);
    if (tc.enc.tokens_per_image == 0)
        tc.enc.tokens_per_image = infer_tokens_from_prompts(data.prompts, tc.stage);
    cfg["train"] = tc.to_json();
    cfg["train"]["resolved_seed"] = tc.seed;

    const auto result = trainer::train<float>(
        tc, data, a.out, a.resume ? std::optional<fs::path>(*a.resume) : std::nullopt);
    write_run_files(a.out, cfg, "train");
    const double first = result.losses.empty() ? 0.0 : result.losses.front();
    const double last = result.losses.empty() ? 0.0 : result.losses.back();
    std::printf("train: %zu steps, loss %.4f -> %.4f, checkpoint at %s\n", result.losses.size(),
                first, last, result.checkpoint_dir.string().c_str());
}

struct SampleArgs {
    std::string checkpoint;
    std::string prompt_file;
    std::optional<int> steps;
    std::optional<double> guidance;
    std::optional<uint64_t> seed;
    std::string out;
    std::optional<std::string> config;
};

inline void run_sample(const SampleArgs& a) {
    json flags = json::object();
    if (a.steps) flags["sample"]["steps"] = *a.steps;
    if (a.guidance) flags["sample"]["guidance"] = *a.guidance;
    json cfg = effective_config(a.config ? std::optional<fs::path>(*a.config) : std::nullopt, flags);
    const uint64_t seed = module_seed(cfg, "sample", a.seed);
    cfg["sample"]["resolved_seed"] = seed;
    cfg["sample"]["checkpoint"] = a.checkpoint;
    cfg["sample"]["prompt_file"] = a.prompt_file;

    auto loaded = Pipeline<float>::load_checkpoint(a.checkpoint);
    const auto prompts = bootstrap::load_prompts(fs::path(a.prompt_file).parent_path());
    if (prompts.empty()) throw ConfigError("prompt file holds no records");
    fs::create_directories(a.out);

    const int steps = cfg["sample"]["steps"].get<int>();
    const double guidance = cfg["sample"]["guidance"].get<double>();
    parallel_for(static_cast<int64_t>(prompts.size()), [&](int64_t i) {
        const auto& rec = prompts[static_cast<size_t>(i)];
        diffuser::Sampler<float> sampler(loaded.pipeline->enc, loaded.pipeline->unet,
                                         loaded.pipeline->sched);
        const ImageF img = sampler.sample(rec.prompt, steps, static_cast<float>(guidance),
                                          derive_seed(seed, rec.id));
        write_png(fs::path(a.out) / (rec.id + ".png"), img);
    });
    write_run_files(a.out, cfg, "sample");
    std::printf("sample: wrote %zu images to %s\n", prompts.size(), a.out.c_str());
}

struct EvalArgs {
    std::string checkpoint;     // score/harmonize
    std::string checkpoints;    // ablate: "4=dir,16=dir,..."
    std::string data;
    std::optional<int> seeds;
    std::optional<int> prompts;
    std::optional<int> cases;
    std::optional<int> steps;
    std::optional<double> guidance;
    std::optional<uint64_t> seed;
    std::string out;
    std::optional<std::string> config;
};

inline json eval_config(const EvalArgs& a) {
    json flags = json::object();
    if (a.steps) flags["eval"]["steps"] = *a.steps;
    if (a.guidance) flags["eval"]["guidance"] = *a.guidance;
    if (a.seeds) flags["eval"]["seeds"] = *a.seeds;
    if (a.prompts) flags["eval"]["prompts"] = *a.prompts;
    if (a.cases) flags["eval"]["harmonize_cases"] = *a.cases;
    return effective_config(a.config ? std::optional<fs::path>(*a.config) : std::nullopt, flags);
}

inline eval::EmbedderModel eval_embedder(const json& cfg, const scenegen::DatasetManifest& manifest,
                                         uint64_t seed, const fs::path& out) {
    eval::EmbedderConfig ecfg = eval::EmbedderConfig::from_json(cfg.at("eval").at("embedder"));
    ecfg.seed = derive_seed(seed, "embedder");
    eval::EmbedderModel model = eval::train_toy_embedder(manifest, ecfg);
    model.save(out / "embedder");
    return model;
}

inline eval::ScoreOptions score_options(const json& cfg, uint64_t seed) {
    eval::ScoreOptions opt;
    opt.steps = cfg.at("eval").at("steps").get<int>();
    opt.guidance = cfg.at("eval").at("guidance").get<double>();
    opt.bootstrap_seed = derive_seed(seed, "bootstrap_ci");
    return opt;
}

inline void run_eval_score(const EvalArgs& a) {
    json cfg = eval_config(a);
    const uint64_t seed = module_seed(cfg, "eval", a.seed);
    cfg["eval"]["resolved_seed"] = seed;
    fs::create_directories(a.out);

    auto loaded = Pipeline<float>::load_checkpoint(a.checkpoint);
    const auto manifest = scenegen::load_manifest(resolve_manifest_path(a.data));
    const auto embedder = eval_embedder(cfg, manifest, seed, a.out);
    const auto cases = eval::build_eval_cases(
        manifest, loaded.pipeline->enc_cfg.tokens_per_image,
        static_cast<size_t>(cfg["eval"]["prompts"].get<int>()), false);
    if (cases.empty()) throw ConfigError("no scoreable prompts in the dataset");
    const auto seeds = derived_seeds(seed, cfg["eval"]["seeds"].get<int>());
    const auto report = eval::score_suite(*loaded.pipeline, cases, seeds, embedder,
                                          score_options(cfg, seed), fs::path(a.out) / "grids");
    write_json_file(fs::path(a.out) / "report.json", report.to_json());
    write_run_files(a.out, cfg, "eval score");
    std::printf("eval score: %zu records, mm %.3f, detail %.3f, adherence %.3f\n",
                report.records.size(), report.aggregates.at("mm_score").mean,
                report.aggregates.at("detail_score").mean, report.aggregates.at("adherence").mean);
}

inline void run_eval_ablate(const EvalArgs& a) {
    json cfg = eval_config(a);
    const uint64_t seed = module_seed(cfg, "eval", a.seed);
    cfg["eval"]["resolved_seed"] = seed;
    fs::create_directories(a.out);

    std::map<int, fs::path> ckpts;
    std::istringstream is(a.checkpoints);
    std::string part;
    while (std::getline(is, part, ',')) {
        const size_t eq = part.find('=');
        if (eq == std::string::npos)
            throw ConfigError("--checkpoints expects tokens=dir[,tokens=dir...]");
        ckpts[std::stoi(part.substr(0, eq))] = part.substr(eq + 1);
    }
    const auto manifest = scenegen::load_manifest(resolve_manifest_path(a.data));
    const auto embedder = eval_embedder(cfg, manifest, seed, a.out);
    const auto seeds = derived_seeds(seed, cfg["eval"]["seeds"].get<int>());
    const auto result = eval::tokens_ablation(ckpts, manifest, seeds, embedder,
                                              score_options(cfg, seed), a.out,
                                              static_cast<size_t>(cfg["eval"]["prompts"].get<int>()));
    write_run_files(a.out, cfg, "eval ablate");
    for (const auto& row : result.rows)
        std::printf("eval ablate: tokens %2d -> detail %.3f [%.3f, %.3f]\n", row.tokens,
                    row.detail.mean, row.detail.lo, row.detail.hi);
}

inline void run_eval_harmonize(const EvalArgs& a) {
    json cfg = eval_config(a);
    const uint64_t seed = module_seed(cfg, "eval", a.seed);
    cfg["eval"]["resolved_seed"] = seed;
    fs::create_directories(a.out);

    auto loaded = Pipeline<float>::load_checkpoint(a.checkpoint);
    const auto manifest = scenegen::load_manifest(resolve_manifest_path(a.data));
    const auto embedder = eval_embedder(cfg, manifest, seed, a.out);
    const auto cases = eval::build_harmonization_cases(
        manifest, loaded.pipeline->enc_cfg.tokens_per_image,
        static_cast<size_t>(cfg["eval"]["harmonize_cases"].get<int>()));
    if (cases.empty()) throw ConfigError("dataset lacks the styles needed for harmonization");
    const auto seeds = derived_seeds(seed, cfg["eval"]["seeds"].get<int>());
    const auto report = eval::harmonization_suite(*loaded.pipeline, cases, seeds, embedder,
                                                  score_options(cfg, seed), fs::path(a.out) / "grids");
    write_json_file(fs::path(a.out) / "report.json", report.to_json());
    write_run_files(a.out, cfg, "eval harmonize");
    std::printf("eval harmonize: style adherence cross %.3f vs in-dist %.3f\n",
                report.cross_style_rate, report.indist_style_rate);
}

}  // namespace detail

inline int dispatch(const std::vector<std::string>& args) {
    CLI::App app{"toy multimodal-prompted diffusion pipeline"};
    app.name("mmgen");
    app.require_subcommand(1);

    detail::DatasetArgs ds;
    auto* dataset = app.add_subcommand("dataset", "synthetic scene dataset tools");
    dataset->require_subcommand(1);
    auto* ds_build = dataset->add_subcommand("build", "render a captioned scene dataset");
    ds_build->add_option("--n", ds.n, "number of samples");
    ds_build->add_option("--seed", ds.seed, "dataset seed (default: derived from global seed)");
    ds_build->add_option("--resolution", ds.resolution, "canvas side, 32 or 64");
    ds_build->add_option("--out", ds.out, "output directory")->required();
    ds_build->add_option("--config", ds.config, "config file (json)");

    detail::BootstrapArgs bs;
    auto* boot = app.add_subcommand("bootstrap", "multimodal prompt bootstrapping");
    boot->require_subcommand(1);
    auto* boot_run = boot->add_subcommand("run", "detect, crop and interleave prompts");
    boot_run->add_option("--manifest", bs.manifest, "dataset manifest (jsonl)")->required();
    boot_run->add_option("--out", bs.out, "output directory")->required();
    boot_run->add_option("--stage", bs.stage, "training stage, 1 or 2");
    boot_run->add_option("--seed", bs.seed, "bootstrap seed");
    boot_run->add_option("--detector", bs.detector, "oracle | jittered");
    boot_run->add_option("--sigma", bs.sigma, "jitter sigma (fraction of box side)");
    boot_run->add_option("--config", bs.config, "config file (json)");

    detail::TrainArgs tr;
    auto* train_cmd = app.add_subcommand("train", "train the encoder+diffusion stack");
    train_cmd->add_option("--stage", tr.stage, "training stage, 1 or 2");
    train_cmd->add_option("--data", tr.data, "bootstrap output directory")->required();
    train_cmd->add_option("--steps", tr.steps, "optimizer steps to run");
    train_cmd->add_option("--batch", tr.batch, "batch size");
    train_cmd->add_option("--seed", tr.seed, "training seed");
    train_cmd->add_option("--out", tr.out, "output directory")->required();
    train_cmd->add_option("--resume", tr.resume, "checkpoint directory to resume from");
    train_cmd->add_option("--config", tr.config, "config file (json)");

    detail::SampleArgs sa;
    auto* sample_cmd = app.add_subcommand("sample", "DDIM sampling with classifier-free guidance");
    sample_cmd->add_option("--checkpoint", sa.checkpoint, "checkpoint directory")->required();
    sample_cmd->add_option("--prompt-file", sa.prompt_file, "prompts.jsonl (bootstrap format)")
        ->required();
    sample_cmd->add_option("--steps", sa.steps, "DDIM steps (default 50)");
    sample_cmd->add_option("--guidance", sa.guidance, "guidance scale (default 6)");
    sample_cmd->add_option("--seed", sa.seed, "sampling seed");
    sample_cmd->add_option("--out", sa.out, "output directory")->required();
    sample_cmd->add_option("--config", sa.config, "config file (json)");

    detail::EvalArgs ev;
    auto* eval_cmd = app.add_subcommand("eval", "quantitative evaluation harness");
    eval_cmd->require_subcommand(1);
    auto* ev_score = eval_cmd->add_subcommand("score", "prompt-image similarity and adherence");
    ev_score->add_option("--checkpoint", ev.checkpoint, "checkpoint directory")->required();
    auto* ev_ablate = eval_cmd->add_subcommand("ablate", "tokens-per-image ablation");
    ev_ablate->add_option("--checkpoints", ev.checkpoints, "tokens=dir[,tokens=dir...]")->required();
    auto* ev_harm = eval_cmd->add_subcommand("harmonize", "cross-source style harmonization probe");
    ev_harm->add_option("--checkpoint", ev.checkpoint, "checkpoint directory")->required();
    for (auto* sub : {ev_score, ev_ablate, ev_harm}) {
        sub->add_option("--data", ev.data, "evaluation dataset directory or manifest")->required();
        sub->add_option("--seeds", ev.seeds, "number of sampling seeds");
        sub->add_option("--prompts", ev.prompts, "number of evaluation prompts");
        sub->add_option("--steps", ev.steps, "DDIM steps");
        sub->add_option("--guidance", ev.guidance, "guidance scale");
        sub->add_option("--seed", ev.seed, "evaluation seed");
        sub->add_option("--out", ev.out, "output directory")->required();
        sub->add_option("--config", ev.config, "config file (json)");
    }
    ev_harm->add_option("--cases", ev.cases, "harmonization cases per arm");

    std::vector<const char*> argv;
    argv.push_back("mmgen");
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
        if (*ds_build) detail::run_dataset_build(ds);
        if (*boot_run) detail::run_bootstrap_cmd(bs);
        if (*train_cmd) detail::run_train(tr);
        if (*sample_cmd) detail::run_sample(sa);
        if (*ev_score) detail::run_eval_score(ev);
        if (*ev_ablate) detail::run_eval_ablate(ev);
        if (*ev_harm) detail::run_eval_harmonize(ev);
        return 0;
    } catch (const CLI::CallForHelp& e) {
        app.exit(e);
        return 0;
    } catch (const CLI::CallForAllHelp& e) {
        app.exit(e);
        return 0;
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    } catch (const Error& e) {
        std::fprintf(stderr, "mmgen: error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "mmgen: unexpected error: %s\n", e.what());
        return 2;
    }
}

}  // namespace mmgen::cli
