#pragma once

#include <string>

#include "mmgen/core/nn.hpp"

namespace mmgen::lora {

// Standalone low-rank adapter value type. Inside models, adapters live in the
// ParamStore as "{target}.lora_A"/"{target}.lora_B" (see ParamStore), which is
// also how they serialize into checkpoints; this type carries the same math
// for direct use and for oracle tests.
template <typename T>
struct LoraAdapter {
    std::string target;
    Tensor<T> A;  // [r, d_in]
    Tensor<T> B;  // [d_out, r]
    int rank = 0;
    T alpha = 0;

    T scale() const { return alpha / static_cast<T>(rank); }

    // B = 0, A = small Gaussian: a fresh adapter changes nothing.
    static LoraAdapter init(std::string target, int64_t d_out, int64_t d_in, int rank, T alpha,
                            Rng& rng) {
        if (rank < 1) throw ConfigError("lora rank must be >= 1");
        LoraAdapter a;
        a.target = std::move(target);
        a.rank = rank;
        a.alpha = alpha;
        a.A = Tensor<T>({rank, d_in});
        const T sigma = T(1) / std::sqrt(static_cast<T>(d_in));
        for (auto& v : a.A.data) v = static_cast<T>(rng.normal()) * sigma;
        a.B = Tensor<T>({d_out, rank});
        return a;
    }
};

// y = W x + (alpha/r) B (A x); x is a column vector [d_in] or matrix
// [d_in, n] of columns.
template <typename T>
Tensor<T> lora_forward(const Tensor<T>& W, const LoraAdapter<T>& ad, const Tensor<T>& x) {
    if (W.rank() != 2 || ad.A.rank() != 2 || ad.B.rank() != 2)
        throw ShapeError("lora_forward: matrices required");
    const int64_t d_out = W.shape[0], d_in = W.shape[1];
    if (ad.A.shape[1] != d_in || ad.B.shape[0] != d_out || ad.A.shape[0] != ad.rank ||
        ad.B.shape[1] != ad.rank)
        throw ShapeError("lora_forward: adapter shapes do not conform");
    const bool vec = x.rank() == 1;
    const int64_t n = vec ? 1 : x.shape[1];
    if ((vec ? x.shape[0] : x.shape[0]) != d_in) throw ShapeError("lora_forward: x shape mismatch");

    ConstMatMap<T> Wm(W.ptr(), d_out, d_in);
    ConstMatMap<T> Am(ad.A.ptr(), ad.rank, d_in);
    ConstMatMap<T> Bm(ad.B.ptr(), d_out, ad.rank);
    ConstMatMap<T> Xm(x.ptr(), d_in, n);
    Tensor<T> y = vec ? Tensor<T>({d_out}) : Tensor<T>({d_out, n});
    MatMap<T> Ym(y.ptr(), d_out, n);
    Ym.noalias() = Wm * Xm + ad.scale() * (Bm * (Am * Xm));
    return y;
}

// W' = W + (alpha/r) B A
template <typename T>
Tensor<T> merge_lora(const Tensor<T>& W, const LoraAdapter<T>& ad) {
    if (ad.A.shape[1] != W.shape[1] || ad.B.shape[0] != W.shape[0])
        throw ShapeError("merge_lora: adapter shapes do not conform");
    Tensor<T> out = W;
    ConstMatMap<T> Am(ad.A.ptr(), ad.A.shape[0], ad.A.shape[1]);
    ConstMatMap<T> Bm(ad.B.ptr(), ad.B.shape[0], ad.B.shape[1]);
    MatMap<T> Om(out.ptr(), out.shape[0], out.shape[1]);
    Om.noalias() += ad.scale() * (Bm * Am);
    return out;
}

// Snapshot of a store-attached adapter as a value type.
template <typename T>
LoraAdapter<T> from_store(const ParamStore<T>& ps, const std::string& target) {
    const auto* info = ps.lora_of(target);
    if (!info) throw ConfigError("no lora attached: " + target);
    LoraAdapter<T> a;
    a.target = target;
    a.A = ps.value(target + ".lora_A");
    a.B = ps.value(target + ".lora_B");
    a.rank = info->rank;
    a.alpha = info->alpha;
    return a;
}

}  // namespace mmgen::lora
