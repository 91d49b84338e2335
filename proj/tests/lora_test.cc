#include <gtest/gtest.h>

#include "mmgen/lora/lora.hpp"
#include "testutil.hpp"

using namespace mmgen;
using namespace mmgen::lora;

TEST(Lora, FreshAdapterIsIdentity) {
    Rng rng(1);
    const Tensor<double> W = Tensor<double>::randn({5, 7}, rng);
    const Tensor<double> x = Tensor<double>::randn({7}, rng);
    const LoraAdapter<double> ad = LoraAdapter<double>::init("w", 5, 7, 3, 3.0, rng);
    const Tensor<double> y = lora_forward(W, ad, x);
    ConstMatMap<double> Wm(W.ptr(), 5, 7);
    ConstMatMap<double> Xm(x.ptr(), 7, 1);
    Tensor<double> ref({5});
    MatMap<double>(ref.ptr(), 5, 1).noalias() = Wm * Xm;
    EXPECT_EQ(max_abs_diff(y, ref), 0.0);
}

TEST(Lora, FullRankReductionRecoversDelta) {
    Rng rng(2);
    const int d = 6;
    const Tensor<double> W = Tensor<double>::randn({d, d}, rng);
    const Tensor<double> dW = Tensor<double>::randn({d, d}, rng);
    const Tensor<double> x = Tensor<double>::randn({d}, rng);
    LoraAdapter<double> ad;
    ad.rank = d;
    ad.alpha = d;  // scale 1
    ad.A = Tensor<double>::zeros({d, d});
    for (int i = 0; i < d; ++i) ad.A.at2(i, i) = 1.0;
    ad.B = dW;
    const Tensor<double> y = lora_forward(W, ad, x);
    Tensor<double> ref({d});
    for (int r = 0; r < d; ++r) {
        double s = 0;
        for (int c = 0; c < d; ++c) s += (W.at2(r, c) + dW.at2(r, c)) * x.data[static_cast<size_t>(c)];
        ref.data[static_cast<size_t>(r)] = s;
    }
    EXPECT_LT(max_abs_diff(y, ref), 1e-12);
}

TEST(Lora, MatchesDenseOracle) {
    Rng rng(3);
    const Tensor<double> W = Tensor<double>::randn({9, 4}, rng);
    LoraAdapter<double> ad = LoraAdapter<double>::init("w", 9, 4, 2, 5.0, rng);
    for (auto& v : ad.B.data) v = rng.normal();
    const Tensor<double> x = Tensor<double>::randn({4, 3}, rng);

    // dense oracle: (W + scale B A) x, computed without the factored path
    Tensor<double> dense = W;
    for (int r = 0; r < 9; ++r)
        for (int c = 0; c < 4; ++c) {
            double s = 0;
            for (int k = 0; k < 2; ++k) s += ad.B.at2(r, k) * ad.A.at2(k, c);
            dense.at2(r, c) += ad.scale() * s;
        }
    Tensor<double> ref({9, 3});
    for (int r = 0; r < 9; ++r)
        for (int n = 0; n < 3; ++n) {
            double s = 0;
            for (int c = 0; c < 4; ++c) s += dense.at2(r, c) * x.at2(c, n);
            ref.at2(r, n) = s;
        }
    EXPECT_LT(max_abs_diff(lora_forward(W, ad, x), ref), 1e-10);
}

TEST(Lora, MergeMatchesAdapterForward) {
    Rng rng(4);
    const Tensor<double> W = Tensor<double>::randn({8, 8}, rng);
    LoraAdapter<double> ad = LoraAdapter<double>::init("w", 8, 8, 8, 8.0, rng);
    EXPECT_EQ(max_abs_diff(merge_lora(W, ad), W), 0.0);  // B = 0 -> W' = W

    for (auto& v : ad.B.data) v = rng.normal() * 0.3;
    const Tensor<double> merged = merge_lora(W, ad);
    const Tensor<double> x = Tensor<double>::randn({8, 5}, rng);
    ConstMatMap<double> Mm(merged.ptr(), 8, 8);
    ConstMatMap<double> Xm(x.ptr(), 8, 5);
    Tensor<double> ref({8, 5});
    MatMap<double>(ref.ptr(), 8, 5).noalias() = Mm * Xm;
    EXPECT_LT(max_abs_diff(lora_forward(W, ad, x), ref), 1e-12);
}

TEST(Lora, StoreMergeRemovesAdapterAndPreservesOutputs) {
    ParamStore<float> ps;
    Rng rng(5);
    Linear<float> lin(ps, "lin", 10, 6, rng, "g", true);
    Rng lr(6);
    ps.attach_lora("lin.w", 3, 3.f, lr, "g_lora");
    for (auto& v : ps.value("lin.w.lora_B").data) v = static_cast<float>(lr.normal()) * 0.2f;

    const Tensor<float> x = Tensor<float>::randn({4, 10}, rng);
    Graph<float> g0(false);
    const Tensor<float> before = lin(g0, g0.input(x)).val();

    ps.merge_lora("lin.w");
    EXPECT_FALSE(ps.has("lin.w.lora_A"));
    EXPECT_EQ(ps.lora_of("lin.w"), nullptr);
    Graph<float> g1(false);
    const Tensor<float> after = lin(g1, g1.input(x)).val();
    EXPECT_LT(max_abs_diff(before, after), 1e-4f);
}

TEST(Lora, SnapshotFromStoreMatches) {
    ParamStore<double> ps;
    Rng rng(7);
    Linear<double> lin(ps, "lin", 5, 5, rng, "g", true);
    Rng lr(8);
    ps.attach_lora("lin.w", 2, 2.0, lr, "g_lora");
    for (auto& v : ps.value("lin.w.lora_B").data) v = lr.normal();
    const LoraAdapter<double> snap = from_store(ps, "lin.w");

    const Tensor<double> x = Tensor<double>::randn({5}, rng);
    // adapter math must agree with the in-graph Linear path
    Graph<double> g(false);
    Tensor<double> xrow({1, 5});
    for (int i = 0; i < 5; ++i) xrow.at2(0, i) = x.data[static_cast<size_t>(i)];
    const Tensor<double> lin_out = lin(g, g.input(xrow)).val();
    Tensor<double> W = ps.value("lin.w");
    Tensor<double> direct = lora_forward(W, snap, x);
    const Tensor<double>& b = ps.value("lin.b");
    for (int i = 0; i < 5; ++i) direct.data[static_cast<size_t>(i)] += b.data[static_cast<size_t>(i)];
    for (int i = 0; i < 5; ++i) EXPECT_NEAR(direct.data[static_cast<size_t>(i)], lin_out.at2(0, i), 1e-12);
}
