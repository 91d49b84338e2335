#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "mmgen/core/checkpoint.hpp"
#include "mmgen/core/nn.hpp"
#include "mmgen/scenegen/dataset.hpp"
#include "mmgen/trainer/optim.hpp"

namespace mmgen::eval {

// Label of a conditioning crop: everything the embedding should separate.
// Texture kind and orientation are included so the embedding is sensitive to
// the visual detail the captions leave out.
struct CropLabel {
    std::string cls;
    std::string color;
    std::string texture;
    int orientation = 0;

    std::string key() const {
        return cls + "|" + color + "|" + texture + "|" + std::to_string(orientation);
    }
};

struct LabeledCrop {
    ImageF image;
    CropLabel label;
};

// Crops with full labels, recovered from the manifest records (style
// parameters come from re-deriving each record's scene from its seed).
inline std::vector<LabeledCrop> labeled_crops_from_dataset(const scenegen::DatasetManifest& m,
                                                           size_t max_records = 0) {
    std::vector<LabeledCrop> out;
    const size_t n = max_records == 0 ? m.records.size() : std::min(max_records, m.records.size());
    for (size_t i = 0; i < n; ++i) {
        const auto& rec = m.records[i];
        const scenegen::SceneSpec spec = scenegen::rederive_scene(rec);
        const scenegen::ImageSample s = scenegen::load_sample(m, rec);
        const bool textured = spec.style.texture.kind != scenegen::TextureSpec::Kind::Flat;
        for (const auto& ann : s.annotations) {
            LabeledCrop lc;
            lc.image = crop(s.pixels, ann.bbox.x0, ann.bbox.y0, ann.bbox.x1, ann.bbox.y1);
            lc.label.cls = rec.caption.substr(static_cast<size_t>(ann.word_span.begin),
                                              static_cast<size_t>(ann.word_span.end - ann.word_span.begin));
            // grammar: "a {color} {class}" - color is the word before the class
            const size_t color_end = static_cast<size_t>(ann.word_span.begin) - 1;
            const size_t color_begin = rec.caption.rfind(' ', color_end - 1) + 1;
            lc.label.color = rec.caption.substr(color_begin, color_end - color_begin);
            lc.label.texture = scenegen::texture_name(spec.style.texture.kind);
            lc.label.orientation = textured ? spec.style.texture.orientation : 0;
            out.push_back(std::move(lc));
        }
    }
    return out;
}

struct EmbedderConfig {
    int input_side = 16;
    int dim = 32;
    int base_channels = 12;
    int64_t steps = 350;
    int labels_per_batch = 8;
    int crops_per_label = 4;
    double lr = 2e-3;
    double margin = 0.2;
    uint64_t seed = 0;

    json to_json() const {
        json j;
        j["input_side"] = input_side;
        j["dim"] = dim;
        j["base_channels"] = base_channels;
        j["steps"] = steps;
        j["labels_per_batch"] = labels_per_batch;
        j["crops_per_label"] = crops_per_label;
        j["lr"] = lr;
        j["margin"] = margin;
        j["seed"] = seed;
        return j;
    }

    static EmbedderConfig from_json(const json& j) {
        EmbedderConfig c;
        c.input_side = j.at("input_side").get<int>();
        c.dim = j.at("dim").get<int>();
        c.base_channels = j.at("base_channels").get<int>();
        c.steps = j.at("steps").get<int64_t>();
        c.labels_per_batch = j.at("labels_per_batch").get<int>();
        c.crops_per_label = j.at("crops_per_label").get<int>();
        c.lr = j.at("lr").get<double>();
        c.margin = j.at("margin").get<double>();
        c.seed = j.at("seed").get<uint64_t>();
        return c;
    }
};

// Small convolutional embedding network with an L2-normalized head, trained
// with a cosine margin contrastive objective over labeled crops.
class EmbedderModel {
public:
    EmbedderModel() = default;

    explicit EmbedderModel(const EmbedderConfig& cfg)
        : cfg_(cfg), ps_(std::make_unique<ParamStore<float>>()) {
        Rng rng(derive_seed(cfg.seed, "embedder_init"));
        const int c1 = cfg.base_channels, c2 = 2 * cfg.base_channels;
        conv1_ = Conv2dLayer<float>(*ps_, "emb.conv1", 3, c1, 3, rng, "embedder", true, 2);
        conv2_ = Conv2dLayer<float>(*ps_, "emb.conv2", c1, c2, 3, rng, "embedder", true, 2);
        const int side4 = cfg.input_side / 4;
        head_ = Linear<float>(*ps_, "emb.head", c2 * side4 * side4, cfg.dim, rng, "embedder", true);
    }

    const EmbedderConfig& config() const { return cfg_; }

    Var<float> forward(Graph<float>& g, const ImageF& image) const {
        ImageF prep = pad_to_square(image);
        if (prep.h != cfg_.input_side) prep = resize_bilinear(prep, cfg_.input_side, cfg_.input_side);
        Var<float> x = g.input(image_to_tensor<float>(prep));
        Var<float> h = silu(conv2_(g, silu(conv1_(g, x))));
        Var<float> flat = reshape(h, {1, h.val().numel()});
        return l2_normalize_rows(head_(g, flat));
    }

    std::vector<float> embed(const ImageF& image) const {
        Graph<float> g(false);
        return forward(g, image).val().data;
    }

    static double cosine(const std::vector<float>& a, const std::vector<float>& b) {
        double s = 0;
        for (size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
        return s;
    }

    // Deterministic contrastive training: same-label pairs are pulled toward
    // cosine 1, different-label pairs pushed below the margin.
    void train(const std::vector<LabeledCrop>& crops) {
        if (crops.size() < 4) throw ConfigError("embedder training needs more crops");
        std::map<std::string, std::vector<size_t>> by_label;
        for (size_t i = 0; i < crops.size(); ++i) by_label[crops[i].label.key()].push_back(i);
        std::vector<const std::vector<size_t>*> groups;
        for (const auto& [_, idx] : by_label)
            if (idx.size() >= 2) groups.push_back(&idx);
        if (groups.size() < 2) throw ConfigError("embedder training needs at least two labels");

        trainer::AdamW<float> opt;
        opt.group_lr = {{"embedder", cfg_.lr}};
        const uint64_t step_root = derive_seed(cfg_.seed, "embedder_step");
        for (int64_t s = 0; s < cfg_.steps; ++s) {
            Rng rng(derive_seed(step_root, static_cast<uint64_t>(s)));
            std::vector<size_t> batch;
            std::vector<std::string> keys;
            for (int li = 0; li < cfg_.labels_per_batch; ++li) {
                const auto& grp = *groups[static_cast<size_t>(
                    rng.uniform_int(0, static_cast<int64_t>(groups.size()) - 1))];
                for (int c = 0; c < cfg_.crops_per_label; ++c) {
                    const size_t pick = grp[static_cast<size_t>(
                        rng.uniform_int(0, static_cast<int64_t>(grp.size()) - 1))];
                    batch.push_back(pick);
                    keys.push_back(crops[pick].label.key());
                }
            }
            const int n = static_cast<int>(batch.size());

            Graph<float> g;
            std::vector<Var<float>> rows;
            rows.reserve(static_cast<size_t>(n));
            for (size_t bi : batch) rows.push_back(forward(g, crops[bi].image));
            Var<float> y = concat_rows(rows);
            Var<float> sims = matmul(y, y, false, true);

            Tensor<float> pos({n, n}), neg({n, n});
            float n_pos = 0, n_neg = 0;
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j) {
                    if (i == j) continue;
                    if (keys[static_cast<size_t>(i)] == keys[static_cast<size_t>(j)]) {
                        pos.at2(i, j) = 1;
                        n_pos += 1;
                    } else {
                        neg.at2(i, j) = 1;
                        n_neg += 1;
                    }
                }
            Var<float> ones = g.input(Tensor<float>::full({n, n}, 1.f));
            Var<float> margin = g.input(Tensor<float>::full({n, n}, static_cast<float>(cfg_.margin)));
            Var<float> pull = sum_all(mul(g.input(pos), sub(ones, sims)));
            Var<float> push = sum_all(mul(g.input(neg), relu(sub(sims, margin))));
            Var<float> loss = add(scale(pull, 1.f / std::max(1.f, n_pos)),
                                  scale(push, 1.f / std::max(1.f, n_neg)));
            if (!std::isfinite(static_cast<double>(scalar(loss))))
                throw DivergenceError("embedder loss diverged at step " + std::to_string(s));
            g.backward(loss);
            std::map<std::string, Tensor<float>> grads;
            g.for_each_param_grad([&](const std::string& name, const Tensor<float>& grad) {
                auto it = grads.find(name);
                if (it == grads.end())
                    grads.emplace(name, grad);
                else
                    it->second.add_(grad);
            });
            opt.step(*ps_, grads);
        }
        trained_ = true;
    }

    bool trained() const { return trained_; }

    void save(const std::filesystem::path& dir) const {
        std::vector<std::pair<std::string, const Tensor<float>*>> tensors;
        for (const auto& [name, e] : ps_->params) tensors.push_back({name, &e.value});
        json meta;
        meta["embedder"] = cfg_.to_json();
        meta["trained"] = trained_;
        ckpt::save<float>(dir, tensors, meta);
    }

    static EmbedderModel load(const std::filesystem::path& dir) {
        auto loaded = ckpt::load<float>(dir);
        EmbedderModel m(EmbedderConfig::from_json(loaded.meta.at("embedder")));
        for (auto& [name, tensor] : loaded.tensors) {
            if (!m.ps_->has(name)) throw ParseError("embedder checkpoint tensor unknown: " + name);
            m.ps_->value(name) = std::move(tensor);
        }
        m.trained_ = loaded.meta.value("trained", false);
        return m;
    }

private:
    EmbedderConfig cfg_;
    std::unique_ptr<ParamStore<float>> ps_;
    Conv2dLayer<float> conv1_, conv2_;
    Linear<float> head_;
    bool trained_ = false;
};

// Trains the evaluation embedder on a labeled-crop dataset; deterministic
// from cfg.seed and frozen thereafter.
inline EmbedderModel train_toy_embedder(const scenegen::DatasetManifest& dataset,
                                        const EmbedderConfig& cfg) {
    EmbedderModel model(cfg);
    model.train(labeled_crops_from_dataset(dataset));
    return model;
}

}  // namespace mmgen::eval
