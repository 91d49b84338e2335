#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mmgen/core/ops.hpp"
#include "mmgen/core/rng.hpp"

namespace mmgen {

// Named parameter tensors plus the LoRA attachment registry. Groups label
// optimizer buckets ("adapter", "unet", "vlm", ...); `trainable=false`
// freezes a tensor (it never receives gradients or updates).
template <typename T>
class ParamStore {
public:
    struct Entry {
        Tensor<T> value;
        bool trainable = true;
        std::string group;
    };

    struct LoraInfo {
        int rank = 0;
        T alpha = 0;
        std::string group;
    };

    Tensor<T>& create(const std::string& name, std::vector<int64_t> shape,
                      const std::string& group, bool trainable) {
        if (params.count(name)) throw ConfigError("parameter already exists: " + name);
        Entry e;
        e.value = Tensor<T>::zeros(std::move(shape));
        e.trainable = trainable;
        e.group = group;
        return params.emplace(name, std::move(e)).first->second.value;
    }

    bool has(const std::string& name) const { return params.count(name) != 0; }

    Entry& entry(const std::string& name) {
        auto it = params.find(name);
        if (it == params.end()) throw ConfigError("unknown parameter: " + name);
        return it->second;
    }

    const Entry& entry(const std::string& name) const {
        auto it = params.find(name);
        if (it == params.end()) throw ConfigError("unknown parameter: " + name);
        return it->second;
    }

    Tensor<T>& value(const std::string& name) { return entry(name).value; }
    const Tensor<T>& value(const std::string& name) const { return entry(name).value; }

    Var<T> bind(Graph<T>& g, const std::string& name) const {
        const Entry& e = entry(name);
        return g.leaf(&e.value, e.trainable, name);
    }

    // LoRA --------------------------------------------------------------

    // Creates {target}.lora_A (small Gaussian) and {target}.lora_B (zeros), so
    // a fresh adapter is an exact no-op on the forward pass.
    void attach_lora(const std::string& target, int rank, T alpha, Rng& rng,
                     const std::string& group) {
        const Tensor<T>& w = value(target);
        if (w.rank() != 2) throw ConfigError("lora target must be a matrix: " + target);
        if (rank < 1) throw ConfigError("lora rank must be >= 1");
        if (loras.count(target)) throw ConfigError("lora already attached: " + target);
        const int64_t d_out = w.shape[0], d_in = w.shape[1];
        Tensor<T>& a = create(target + ".lora_A", {rank, d_in}, group, true);
        const T sigma = T(1) / std::sqrt(static_cast<T>(d_in));
        for (auto& v : a.data) v = static_cast<T>(rng.normal()) * sigma;
        create(target + ".lora_B", {d_out, rank}, group, true);
        loras[target] = LoraInfo{rank, alpha, group};
    }

    const LoraInfo* lora_of(const std::string& target) const {
        auto it = loras.find(target);
        return it == loras.end() ? nullptr : &it->second;
    }

    // W += (alpha/r) * B * A, then removes the adapter tensors.
    void merge_lora(const std::string& target) {
        const LoraInfo* info = lora_of(target);
        if (!info) throw ConfigError("no lora attached: " + target);
        Tensor<T>& w = value(target);
        const Tensor<T>& a = value(target + ".lora_A");
        const Tensor<T>& b = value(target + ".lora_B");
        const T s = info->alpha / static_cast<T>(info->rank);
        ConstMatMap<T> A(a.ptr(), a.shape[0], a.shape[1]);
        ConstMatMap<T> B(b.ptr(), b.shape[0], b.shape[1]);
        MatMap<T> W(w.ptr(), w.shape[0], w.shape[1]);
        W.noalias() += s * (B * A);
        params.erase(target + ".lora_A");
        params.erase(target + ".lora_B");
        loras.erase(target);
    }

    void merge_all_loras() {
        std::vector<std::string> targets;
        for (const auto& [t, _] : loras) targets.push_back(t);
        for (const auto& t : targets) merge_lora(t);
    }

    // ordered by name: iteration, checkpoints and optimizer walk are stable
    std::map<std::string, Entry> params;
    std::map<std::string, LoraInfo> loras;
};

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

template <typename T>
struct Linear {
    ParamStore<T>* ps = nullptr;
    std::string w, b;
    int in = 0, out = 0;
    bool bias = true;

    Linear() = default;
    Linear(ParamStore<T>& store, const std::string& name, int d_in, int d_out, Rng& rng,
           const std::string& group, bool trainable, bool with_bias = true, bool zero_init = false)
        : ps(&store), w(name + ".w"), b(name + ".b"), in(d_in), out(d_out), bias(with_bias) {
        Tensor<T>& wt = store.create(w, {d_out, d_in}, group, trainable);
        if (!zero_init) {
            const T sigma = T(1) / std::sqrt(static_cast<T>(d_in));
            for (auto& v : wt.data) v = static_cast<T>(rng.normal()) * sigma;
        }
        if (bias) store.create(b, {d_out}, group, trainable);
    }

    // y = x W^T (+ b) (+ LoRA delta when attached)
    Var<T> operator()(Graph<T>& g, Var<T> x) const {
        Var<T> wv = ps->bind(g, w);
        Var<T> y = matmul(x, wv, false, true);
        if (const auto* info = ps->lora_of(w)) {
            Var<T> av = ps->bind(g, w + ".lora_A");
            Var<T> bv = ps->bind(g, w + ".lora_B");
            Var<T> delta = matmul(matmul(x, av, false, true), bv, false, true);
            y = add(y, scale(delta, info->alpha / static_cast<T>(info->rank)));
        }
        if (bias) y = add_rowvec(y, ps->bind(g, b));
        return y;
    }
};

template <typename T>
struct LayerNormLayer {
    ParamStore<T>* ps = nullptr;
    std::string gamma, beta;

    LayerNormLayer() = default;
    LayerNormLayer(ParamStore<T>& store, const std::string& name, int d, const std::string& group,
                   bool trainable)
        : ps(&store), gamma(name + ".g"), beta(name + ".b") {
        store.create(gamma, {d}, group, trainable).fill(T(1));
        store.create(beta, {d}, group, trainable);
    }

    Var<T> operator()(Graph<T>& g, Var<T> x) const {
        return layer_norm(x, ps->bind(g, gamma), ps->bind(g, beta));
    }
};

template <typename T>
struct GroupNormLayer {
    ParamStore<T>* ps = nullptr;
    std::string gamma, beta;
    int groups = 1;

    GroupNormLayer() = default;
    GroupNormLayer(ParamStore<T>& store, const std::string& name, int channels, int n_groups,
                   const std::string& group, bool trainable)
        : ps(&store), gamma(name + ".g"), beta(name + ".b"), groups(n_groups) {
        store.create(gamma, {channels}, group, trainable).fill(T(1));
        store.create(beta, {channels}, group, trainable);
    }

    Var<T> operator()(Graph<T>& g, Var<T> x) const {
        return group_norm(x, ps->bind(g, gamma), ps->bind(g, beta), groups);
    }
};

template <typename T>
struct Conv2dLayer {
    ParamStore<T>* ps = nullptr;
    std::string w, b;
    int k = 3, stride = 1;

    Conv2dLayer() = default;
    Conv2dLayer(ParamStore<T>& store, const std::string& name, int c_in, int c_out, int kernel,
                Rng& rng, const std::string& group, bool trainable, int stride_ = 1,
                bool zero_init = false)
        : ps(&store), w(name + ".w"), b(name + ".b"), k(kernel), stride(stride_) {
        Tensor<T>& wt = store.create(w, {c_out, static_cast<int64_t>(c_in) * kernel * kernel}, group, trainable);
        if (!zero_init) {
            const T sigma = T(1) / std::sqrt(static_cast<T>(c_in) * kernel * kernel);
            for (auto& v : wt.data) v = static_cast<T>(rng.normal()) * sigma;
        }
        store.create(b, {c_out}, group, trainable);
    }

    Var<T> operator()(Graph<T>& g, Var<T> x) const {
        return mmgen::conv2d(x, ps->bind(g, w), ps->bind(g, b), k, stride);
    }
};

// Multi-head attention; query side and key/value side may have different
// widths (cross-attention). LoRA attaches to the four projections by name.
template <typename T>
struct MultiheadAttention {
    Linear<T> wq, wk, wv, wo;
    int heads = 1, d_model = 0, d_head = 0;

    MultiheadAttention() = default;
    MultiheadAttention(ParamStore<T>& store, const std::string& name, int d_model_, int d_kv,
                       int n_heads, Rng& rng, const std::string& group, bool trainable)
        : heads(n_heads), d_model(d_model_), d_head(d_model_ / n_heads) {
        if (d_model_ % n_heads != 0) throw ConfigError("d_model not divisible by heads");
        wq = Linear<T>(store, name + ".q", d_model_, d_model_, rng, group, trainable);
        wk = Linear<T>(store, name + ".k", d_kv, d_model_, rng, group, trainable);
        wv = Linear<T>(store, name + ".v", d_kv, d_model_, rng, group, trainable);
        wo = Linear<T>(store, name + ".o", d_model_, d_model_, rng, group, trainable);
    }

    Var<T> operator()(Graph<T>& g, Var<T> x_q, Var<T> x_kv, bool causal = false,
                      const std::vector<uint8_t>* kv_mask = nullptr) const {
        Var<T> q = wq(g, x_q);
        Var<T> k = wk(g, x_kv);
        Var<T> v = wv(g, x_kv);
        const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(d_head));
        std::vector<Var<T>> outs;
        outs.reserve(static_cast<size_t>(heads));
        for (int h = 0; h < heads; ++h) {
            Var<T> qh = slice_cols(q, static_cast<int64_t>(h) * d_head, d_head);
            Var<T> kh = slice_cols(k, static_cast<int64_t>(h) * d_head, d_head);
            Var<T> vh = slice_cols(v, static_cast<int64_t>(h) * d_head, d_head);
            Var<T> sc = scale(matmul(qh, kh, false, true), inv_sqrt);
            Var<T> p = attn_softmax(sc, causal, kv_mask);
            outs.push_back(matmul(p, vh));
        }
        return wo(g, concat_cols(outs));
    }
};

// Pre-LN transformer block with SiLU MLP.
template <typename T>
struct TransformerBlock {
    LayerNormLayer<T> ln1, ln2;
    MultiheadAttention<T> attn;
    Linear<T> fc1, fc2;

    TransformerBlock() = default;
    TransformerBlock(ParamStore<T>& store, const std::string& name, int d_model, int n_heads,
                     Rng& rng, const std::string& group, bool trainable, int mlp_mult = 4)
        : ln1(store, name + ".ln1", d_model, group, trainable),
          ln2(store, name + ".ln2", d_model, group, trainable),
          attn(store, name + ".attn", d_model, d_model, n_heads, rng, group, trainable),
          fc1(store, name + ".fc1", d_model, d_model * mlp_mult, rng, group, trainable),
          fc2(store, name + ".fc2", d_model * mlp_mult, d_model, rng, group, trainable) {}

    Var<T> operator()(Graph<T>& g, Var<T> x, bool causal,
                      const std::vector<uint8_t>* kv_mask = nullptr) const {
        Var<T> h = ln1(g, x);
        x = add(x, attn(g, h, h, causal, kv_mask));
        Var<T> m = fc2(g, silu(fc1(g, ln2(g, x))));
        return add(x, m);
    }
};

// Sinusoidal features for a discrete timestep (transformer convention).
template <typename T>
Tensor<T> timestep_features(int64_t t, int dim) {
    Tensor<T> out({1, dim});
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / std::max(1, half - 1));
        out.data[static_cast<size_t>(i)] = static_cast<T>(std::sin(t * freq));
        out.data[static_cast<size_t>(half + i)] = static_cast<T>(std::cos(t * freq));
    }
    return out;
}

}  // namespace mmgen
