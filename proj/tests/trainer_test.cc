#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "mmgen/trainer/trainer.hpp"
#include "testutil.hpp"

using namespace mmgen;
using namespace mmgen::trainer;

namespace {

TrainConfig tiny_cfg() {
    TrainConfig cfg;
    cfg.stage = 1;
    cfg.batch_size = 2;
    cfg.steps = 6;
    cfg.lr_multiplier = 100.0;
    cfg.seed = 5;
    cfg.checkpoint_every = 0;
    cfg.lora_rank = 4;
    cfg.lora_alpha = 4.0;
    cfg.schedule_T = 100;
    cfg.enc.d_model = 16;
    cfg.enc.n_layers_vlm = 1;
    cfg.enc.n_heads = 2;
    cfg.enc.tokens_per_image = 16;
    cfg.enc.n_layers_adapter = 1;
    cfg.enc.d_cond = 16;
    cfg.unet.input_size = 32;
    cfg.unet.base_channels = 8;
    cfg.unet.channel_mults = {1, 2, 2};
    cfg.unet.attention_resolutions = {16, 8};
    cfg.unet.d_cond = 16;
    cfg.unet.n_heads = 2;
    cfg.unet.d_time = 16;
    cfg.unet.norm_groups = 4;
    return cfg;
}

struct Corpus {
    std::filesystem::path dir;
    TrainData<float> data;
};

Corpus make_corpus(int n = 24, int stage = 1) {
    Corpus c;
    c.dir = test::tmp_dir("trainer_data_s" + std::to_string(stage));
    const auto manifest = scenegen::build_dataset(n, 17, c.dir / "ds", 32);
    bootstrap::BootstrapConfig bcfg;
    bcfg.stage = stage;
    bootstrap::run_bootstrap(manifest, c.dir / "prompts", bcfg, 23, bootstrap::DetectorMode::Oracle);
    c.data.prompts = bootstrap::load_prompts(c.dir / "prompts");
    c.data.manifest = manifest;
    return c;
}

std::string read_file(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

}  // namespace

TEST(Trainer, ZeroStepsEqualsInitialization) {
    Corpus c = make_corpus();
    TrainConfig cfg = tiny_cfg();
    cfg.steps = 0;
    const auto out = test::tmp_dir("trainer_zero");
    const TrainResult r = train<float>(cfg, c.data, out);

    Pipeline<float> fresh(cfg.enc, cfg.unet, cfg.schedule_T, encoder::Vocab::default_vocab(),
                          derive_seed(cfg.seed, "init"), cfg.lora_rank,
                          static_cast<float>(cfg.lora_alpha));
    auto loaded = Pipeline<float>::load_checkpoint(r.checkpoint_dir);
    for (const auto& [name, e] : fresh.ps.params)
        EXPECT_EQ(max_abs_diff(e.value, loaded.pipeline->ps.value(name)), 0.f) << name;
    std::filesystem::remove_all(c.dir);
    std::filesystem::remove_all(out);
}

TEST(Trainer, DeterministicLossSeries) {
    Corpus c = make_corpus();
    const TrainConfig cfg = tiny_cfg();
    const auto o1 = test::tmp_dir("trainer_det1");
    const auto o2 = test::tmp_dir("trainer_det2");
    train<float>(cfg, c.data, o1);
    train<float>(cfg, c.data, o2);
    EXPECT_EQ(read_file(o1 / "loss.csv"), read_file(o2 / "loss.csv"));
    EXPECT_EQ(read_file(o1 / "checkpoint" / "tensors.bin"),
              read_file(o2 / "checkpoint" / "tensors.bin"));
    std::filesystem::remove_all(c.dir);
    std::filesystem::remove_all(o1);
    std::filesystem::remove_all(o2);
}

TEST(Trainer, FrozenModulesBitIdenticalTrainedModulesMove) {
    Corpus c = make_corpus();
    TrainConfig cfg = tiny_cfg();
    cfg.steps = 4;
    Pipeline<float> fresh(cfg.enc, cfg.unet, cfg.schedule_T, encoder::Vocab::default_vocab(),
                          derive_seed(cfg.seed, "init"), cfg.lora_rank,
                          static_cast<float>(cfg.lora_alpha));
    const auto out = test::tmp_dir("trainer_frozen");
    const TrainResult r = train<float>(cfg, c.data, out);
    auto loaded = Pipeline<float>::load_checkpoint(r.checkpoint_dir);

    double trained_delta = 0;
    for (const auto& [name, e] : fresh.ps.params) {
        const auto& after = loaded.pipeline->ps.value(name);
        const std::string& group = e.group;
        if (group == "vit" || group == "vlm" || group == "proj") {
            EXPECT_EQ(max_abs_diff(e.value, after), 0.f) << "frozen tensor moved: " << name;
        } else {
            trained_delta = std::max(trained_delta, static_cast<double>(max_abs_diff(e.value, after)));
        }
    }
    EXPECT_GT(trained_delta, 0.0);
    std::filesystem::remove_all(c.dir);
    std::filesystem::remove_all(out);
}

TEST(Trainer, LearningRateOrderingMatchesTable) {
    const TrainConfig cfg = tiny_cfg();
    const auto lrs = group_learning_rates(cfg);
    EXPECT_GT(lrs.at("adapter"), lrs.at("unet"));
    EXPECT_GT(lrs.at("unet"), lrs.at("vlm_lora"));
    EXPECT_EQ(lrs.at("vlm_lora"), lrs.at("proj_lora"));
    EXPECT_EQ(lrs.count("vit"), 0u);  // frozen: no learning rate at all

    Corpus c = make_corpus();
    TrainConfig run = tiny_cfg();
    run.steps = 1;
    const auto out = test::tmp_dir("trainer_lr");
    train<float>(run, c.data, out);
    std::ifstream csv(out / "loss.csv");
    std::string header, row;
    std::getline(csv, header);
    std::getline(csv, row);
    EXPECT_EQ(header, "step,loss,lr_adapter,lr_unet,lr_vlm");
    double step, loss, la, lu, lv;
    ASSERT_EQ(std::sscanf(row.c_str(), "%lf,%lf,%lf,%lf,%lf", &step, &loss, &la, &lu, &lv), 5);
    EXPECT_GT(la, lu);
    EXPECT_GT(lu, lv);
    std::filesystem::remove_all(c.dir);
    std::filesystem::remove_all(out);
}

TEST(Trainer, ResumeSplitEqualsUnsplitBitwise) {
    Corpus c = make_corpus();
    TrainConfig full = tiny_cfg();
    full.steps = 8;
    const auto o_full = test::tmp_dir("trainer_full");
    train<float>(full, c.data, o_full);

    TrainConfig half = tiny_cfg();
    half.steps = 4;
    const auto o_a = test::tmp_dir("trainer_half_a");
    const TrainResult ra = train<float>(half, c.data, o_a);
    const auto o_b = test::tmp_dir("trainer_half_b");
    train<float>(half, c.data, o_b, ra.checkpoint_dir);

    EXPECT_EQ(read_file(o_full / "checkpoint" / "tensors.bin"),
              read_file(o_b / "checkpoint" / "tensors.bin"));

    // the resumed loss series equals the tail of the full series
    std::vector<std::string> full_rows, tail_rows;
    {
        std::ifstream is(o_full / "loss.csv");
        std::string line;
        std::getline(is, line);
        while (std::getline(is, line)) full_rows.push_back(line);
    }
    {
        std::ifstream is(o_b / "loss.csv");
        std::string line;
        std::getline(is, line);
        while (std::getline(is, line)) tail_rows.push_back(line);
    }
    ASSERT_EQ(full_rows.size(), 8u);
    ASSERT_EQ(tail_rows.size(), 4u);
    for (size_t i = 0; i < 4; ++i) EXPECT_EQ(tail_rows[i], full_rows[4 + i]) << i;

    // resume with extra_steps = 0 leaves the state untouched
    const auto o_zero = test::tmp_dir("trainer_zero_resume");
    TrainConfig zero = tiny_cfg();
    zero.steps = 0;
    train<float>(zero, c.data, o_zero, ra.checkpoint_dir);
    EXPECT_EQ(read_file(o_zero / "checkpoint" / "tensors.bin"),
              read_file(o_a / "checkpoint" / "tensors.bin"));

    for (const auto& d : {o_full, o_a, o_b, o_zero}) std::filesystem::remove_all(d);
    std::filesystem::remove_all(c.dir);
}

TEST(Trainer, ResumeRejectsConfigMismatch) {
    Corpus c = make_corpus();
    TrainConfig cfg = tiny_cfg();
    cfg.steps = 2;
    const auto out = test::tmp_dir("trainer_hash");
    const TrainResult r = train<float>(cfg, c.data, out);
    TrainConfig other = cfg;
    other.lr_multiplier *= 2;
    const auto out2 = test::tmp_dir("trainer_hash2");
    EXPECT_THROW(train<float>(other, c.data, out2, r.checkpoint_dir), ConfigError);
    std::filesystem::remove_all(c.dir);
    std::filesystem::remove_all(out);
    std::filesystem::remove_all(out2);
}

TEST(Trainer, StageBudgetEnforcedAtBatchAssembly) {
    Corpus c = make_corpus(24, /*stage=*/1);
    TrainConfig cfg = tiny_cfg();
    cfg.stage = 2;  // stage-2 trainer fed stage-1 prompts (multi-image)
    cfg.enc.tokens_per_image = 16;
    cfg.steps = 4;
    const auto out = test::tmp_dir("trainer_stage");
    EXPECT_THROW(train<float>(cfg, c.data, out), ConfigError);
    std::filesystem::remove_all(c.dir);
    std::filesystem::remove_all(out);
}

TEST(Trainer, StageTransitionLoadsWeightsFreshOptimizer) {
    Corpus c1 = make_corpus(24, 1);
    TrainConfig cfg = tiny_cfg();
    cfg.steps = 2;
    const auto o1 = test::tmp_dir("trainer_s1");
    const TrainResult r1 = train<float>(cfg, c1.data, o1);

    Corpus c2 = make_corpus(24, 2);
    TrainConfig cfg2 = tiny_cfg();
    cfg2.stage = 2;
    cfg2.enc.tokens_per_image = 64;  // stage-2 conditioning budget
    cfg2.steps = 2;
    const auto o2 = test::tmp_dir("trainer_s2");
    const TrainResult r2 = train<float>(cfg2, c2.data, o2, r1.checkpoint_dir);
    auto loaded = Pipeline<float>::load_checkpoint(r2.checkpoint_dir);
    EXPECT_EQ(loaded.meta.at("train").at("stage").get<int>(), 2);
    EXPECT_EQ(loaded.meta.at("train").at("step").get<int64_t>(), 2);

    std::filesystem::remove_all(c1.dir);
    std::filesystem::remove_all(c2.dir);
    std::filesystem::remove_all(o1);
    std::filesystem::remove_all(o2);
}

TEST(DivergenceMonitorTest, NonFiniteAndSustainedSpikesAbort) {
    DivergenceMonitor m1;
    m1.observe(0, 1.0);
    EXPECT_THROW(m1.observe(1, std::numeric_limits<double>::infinity()), DivergenceError);

    DivergenceMonitor m2;
    for (int i = 0; i < 20; ++i) m2.observe(i, 1.0);
    // 49 high steps then one recovery: no abort
    for (int i = 0; i < 49; ++i) m2.observe(20 + i, 50.0);
    m2.observe(69, 1.0);
    for (int i = 0; i < 30; ++i) m2.observe(70 + i, 1.0);

    // a real divergence keeps growing and stays ahead of the trailing median
    DivergenceMonitor m3;
    for (int i = 0; i < 20; ++i) m3.observe(i, 1.0);
    bool threw = false;
    try {
        for (int i = 0; i < 60; ++i) m3.observe(20 + i, 50.0 * std::pow(1.3, i));
    } catch (const DivergenceError& e) {
        threw = true;
        EXPECT_NE(std::string(e.what()).find("tail"), std::string::npos);
    }
    EXPECT_TRUE(threw);
}
