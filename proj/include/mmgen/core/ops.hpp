#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "mmgen/core/graph.hpp"

namespace mmgen {

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    Graph<T>& g = *a.g;
    const Tensor<T>& av = g.v(a.id);
    const Tensor<T>& bv = g.v(b.id);
    if (!av.same_shape(bv))
        throw ShapeError("add: shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
    Tensor<T> out = av;
    out.add_(bv);
    const bool ng = g.needs_grad(a.id) || g.needs_grad(b.id);
    return g.op(std::move(out), ng, [&g, a, b](Var<T> y) {
        return [&g, a, b, y]() {
            const Tensor<T>& go = g.grad_buf(y.id);
            if (g.needs_grad(a.id)) g.grad_buf(a.id).add_(go);
            if (g.needs_grad(b.id)) g.grad_buf(b.id).add_(go);
        };
    });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    Graph<T>& g = *a.g;
    const Tensor<T>& av = g.v(a.id);
    const Tensor<T>& bv = g.v(b.id);
    if (!av.same_shape(bv)) throw ShapeError("sub: shape mismatch");
    Tensor<T> out = av;
    out.add_(bv, T(-1));
    const bool ng = g.needs_grad(a.id) || g.needs_grad(b.id);
    return g.op(std::move(out), ng, [&g, a, b](Var<T> y) {
        return [&g, a, b, y]() {
            const Tensor<T>& go = g.grad_buf(y.id);
            if (g.needs_grad(a.id)) g.grad_buf(a.id).add_(go);
            if (g.needs_grad(b.id)) g.grad_buf(b.id).add_(go, T(-1));
        };
    });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    Graph<T>& g = *a.g;
    const Tensor<T>& av = g.v(a.id);
    const Tensor<T>& bv = g.v(b.id);
    if (!av.same_shape(bv)) throw ShapeError("mul: shape mismatch");
    Tensor<T> out = av;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bv.data[i];
    const bool ng = g.needs_grad(a.id) || g.needs_grad(b.id);
    return g.op(std::move(out), ng, [&g, a, b](Var<T> y) {
        return [&g, a, b, y]() {
            const Tensor<T>& go = g.grad_buf(y.id);
            if (g.needs_grad(a.id)) {
                Tensor<T>& ga = g.grad_buf(a.id);
                const Tensor<T>& bv2 = g.v(b.id);
                for (size_t i = 0; i < ga.data.size(); ++i) ga.data[i] += go.data[i] * bv2.data[i];
            }
            if (g.needs_grad(b.id)) {
                Tensor<T>& gb = g.grad_buf(b.id);
                const Tensor<T>& av2 = g.v(a.id);
                for (size_t i = 0; i < gb.data.size(); ++i) gb.data[i] += go.data[i] * av2.data[i];
            }
        };
    });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
    Graph<T>& g = *a.g;
    Tensor<T> out = g.v(a.id);
    out.scale_(s);
    return g.op(std::move(out), g.needs_grad(a.id), [&g, a, s](Var<T> y) {
        return [&g, a, s, y]() { g.grad_buf(a.id).add_(g.grad_buf(y.id), s); };
    });
}

template <typename T>
Var<T> relu(Var<T> a) {
    Graph<T>& g = *a.g;
    Tensor<T> out = g.v(a.id);
    for (auto& v : out.data) v = std::max(v, T(0));
    return g.op(std::move(out), g.needs_grad(a.id), [&g, a](Var<T> y) {
        return [&g, a, y]() {
            const Tensor<T>& go = g.grad_buf(y.id);
            const Tensor<T>& av = g.v(a.id);
            Tensor<T>& ga = g.grad_buf(a.id);
            for (size_t i = 0; i < ga.data.size(); ++i)
                if (av.data[i] > 0) ga.data[i] += go.data[i];
        };
    });
}

template <typename T>
Var<T> silu(Var<T> a) {
    Graph<T>& g = *a.g;
    const Tensor<T>& av = g.v(a.id);
    Tensor<T> out = av;
    for (auto& v : out.data) {
        const T s = T(1) / (T(1) + std::exp(-v));
        v = v * s;
    }
    return g.op(std::move(out), g.needs_grad(a.id), [&g, a](Var<T> y) {
        return [&g, a, y]() {
            const Tensor<T>& go = g.grad_buf(y.id);
            const Tensor<T>& av2 = g.v(a.id);
            Tensor<T>& ga = g.grad_buf(a.id);
            for (size_t i = 0; i < ga.data.size(); ++i) {
                const T x = av2.data[i];
                const T s = T(1) / (T(1) + std::exp(-x));
                ga.data[i] += go.data[i] * s * (T(1) + x * (T(1) - s));
            }
        };
    });
}

// ---------------------------------------------------------------------------
// Matrix multiply (2D), with BLAS-style transpose flags
// ---------------------------------------------------------------------------

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b, bool ta = false, bool tb = false) {
    Graph<T>& g = *a.g;
    const Tensor<T>& av = g.v(a.id);
    const Tensor<T>& bv = g.v(b.id);
    if (av.rank() != 2 || bv.rank() != 2) throw ShapeError("matmul: rank-2 tensors required");
    const int64_t m = ta ? av.shape[1] : av.shape[0];
    const int64_t k = ta ? av.shape[0] : av.shape[1];
    const int64_t kb = tb ? bv.shape[1] : bv.shape[0];
    const int64_t n = tb ? bv.shape[0] : bv.shape[1];
    if (k != kb)
        throw ShapeError("matmul: inner dim mismatch " + av.shape_str() + " x " + bv.shape_str());

    ConstMatMap<T> A(av.ptr(), av.shape[0], av.shape[1]);
    ConstMatMap<T> B(bv.ptr(), bv.shape[0], bv.shape[1]);
    Tensor<T> out({m, n});
    MatMap<T> C(out.ptr(), m, n);
    if (!ta && !tb)
        C.noalias() = A * B;
    else if (ta && !tb)
        C.noalias() = A.transpose() * B;
    else if (!ta && tb)
        C.noalias() = A * B.transpose();
    else
        C.noalias() = A.transpose() * B.transpose();

    const bool ng = g.needs_grad(a.id) || g.needs_grad(b.id);
    return g.op(std::move(out), ng, [&g, a, b, ta, tb](Var<T> y) {
        return [&g, a, b, ta, tb, y]() {
            const Tensor<T>& go = g.grad_buf(y.id);
            const Tensor<T>& av2 = g.v(a.id);
            const Tensor<T>& bv2 = g.v(b.id);
            ConstMatMap<T> dC(go.ptr(), go.shape[0], go.shape[1]);
            ConstMatMap<T> A(av2.ptr(), av2.shape[0], av2.shape[1]);
            ConstMatMap<T> B(bv2.ptr(), bv2.shape[0], bv2.shape[1]);
            if (g.needs_grad(a.id)) {
                Tensor<T>& gat = g.grad_buf(a.id);
                MatMap<T> dA(gat.ptr(), gat.shape[0], gat.shape[1]);
                // d(effA) = dC * effB^T, effA = ta ? A^T : A
                if (!ta && !tb)
                    dA.noalias() += dC * B.transpose();
                else if (!ta && tb)
                    dA.noalias() += dC * B;
                else if (ta && !tb)
                    dA.noalias() += B * dC.transpose();
                else
                    dA.noalias() += B.transpose() * dC.transpose();
            }
            if (g.needs_grad(b.id)) {
                Tensor<T>& gbt = g.grad_buf(b.id);
                MatMap<T> dB(gbt.ptr(), gbt.shape[0], gbt.shape[1]);
                // d(effB) = effA^T * dC, effB = tb ? B^T : B
                if (!ta && !tb)
                    dB.noalias() += A.transpose() * dC;
                else if (ta && !tb)
                    dB.noalias() += A * dC;
                else if (!ta && tb)
                    dB.noalias() += dC.transpose() * A;
                else
                    dB.noalias() += dC.transpose() * A.transpose();
            }
        };
    });
}

// y[r,:] = x[r,:] + v  (bias over rows)
template <typename T>
Var<T> add_rowvec(Var<T> x, Var<T> v) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = g.v(x.id);
    const Tensor<T>& vv = g.v(v.id);
    if (xv.rank() != 2 || vv.numel() != xv.shape[1]) throw ShapeError("add_rowvec: shape mismatch");
    Tensor<T> out = xv;
    const int64_t rows = xv.shape[0], cols = xv.shape[1];
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < cols; ++c) out.data[static_cast<size_t>(r * cols + c)] += vv.data[static_cast<size_t>(c)];
    const bool ng = g.needs_grad(x.id) || g.needs_grad(v.id);
    return g.op(std::move(out), ng, [&g, x, v, rows, cols](Var<T> y) {
        return [&g, x, v, rows, cols, y]() {
            const Tensor<T>& go = g.grad_buf(y.id);
            if (g.needs_grad(x.id)) g.grad_buf(x.id).add_(go);
            if (g.needs_grad(v.id)) {
                Tensor<T>& gv = g.grad_buf(v.id);
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t c = 0; c < cols; ++c)
                        gv.data[static_cast<size_t>(c)] += go.data[static_cast<size_t>(r * cols + c)];
            }
        };
    });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Var<T> sum_all(Var<T> x) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = g.v(x.id);
    T s = 0;
    for (T v : xv.data) s += v;
    Tensor<T> out({1});
    out.data[0] = s;
    return g.op(std::move(out), g.needs_grad(x.id), [&g, x](Var<T> y) {
        return [&g, x, y]() {
            const T go = g.grad_buf(y.id).data[0];
            Tensor<T>& gx = g.grad_buf(x.id);
            for (auto& v : gx.data) v += go;
        };
    });
}

template <typename T>
Var<T> mean_all(Var<T> x) {
    Graph<T>& g = *x.g;
    const int64_t n = g.v(x.id).numel();
    return scale(sum_all(x), T(1) / static_cast<T>(n));
}

template <typename T>
Var<T> mse(Var<T> pred, Var<T> target) {
    Var<T> d = sub(pred, target);
    return mean_all(mul(d, d));
}

// ---------------------------------------------------------------------------
// Softmax with masking (attention)
// ---------------------------------------------------------------------------

// Row-wise softmax over scores [Lq, Lk]. With `causal`, key j > query i is
// masked (requires Lq == Lk). `key_mask`, when given, disables keys with 0.
// Fully masked rows produce all-zero probabilities.
template <typename T>
Var<T> attn_softmax(Var<T> scores, bool causal = false, const std::vector<uint8_t>* key_mask = nullptr) {
    Graph<T>& g = *scores.g;
    const Tensor<T>& sv = g.v(scores.id);
    if (sv.rank() != 2) throw ShapeError("attn_softmax: rank-2 scores required");
    const int64_t lq = sv.shape[0], lk = sv.shape[1];
    if (causal && lq != lk) throw ShapeError("attn_softmax: causal mask needs square scores");
    if (key_mask && static_cast<int64_t>(key_mask->size()) != lk)
        throw ShapeError("attn_softmax: key mask length mismatch");

    Tensor<T> out({lq, lk});
    for (int64_t i = 0; i < lq; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (int64_t j = 0; j < lk; ++j) {
            if (causal && j > i) continue;
            if (key_mask && !(*key_mask)[static_cast<size_t>(j)]) continue;
            mx = std::max(mx, sv.at2(i, j));
        }
        T total = 0;
        if (mx != -std::numeric_limits<T>::infinity()) {
            for (int64_t j = 0; j < lk; ++j) {
                if (causal && j > i) continue;
                if (key_mask && !(*key_mask)[static_cast<size_t>(j)]) continue;
                const T e = std::exp(sv.at2(i, j) - mx);
                out.at2(i, j) = e;
                total += e;
            }
        }
        if (total > 0)
            for (int64_t j = 0; j < lk; ++j) out.at2(i, j) /= total;
    }
    if (g.attn_probe) g.attn_probe->push_back(out);

    return g.op(std::move(out), g.needs_grad(scores.id), [&g, scores](Var<T> y) {
        return [&g, scores, y]() {
            const Tensor<T>& go = g.grad_buf(y.id);
            const Tensor<T>& p = g.v(y.id);
            Tensor<T>& gs = g.grad_buf(scores.id);
            const int64_t lq = p.shape[0], lk = p.shape[1];
            for (int64_t i = 0; i < lq; ++i) {
                T dot = 0;
                for (int64_t j = 0; j < lk; ++j) dot += go.at2(i, j) * p.at2(i, j);
                for (int64_t j = 0; j < lk; ++j) gs.at2(i, j) += p.at2(i, j) * (go.at2(i, j) - dot);
            }
        };
    });
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

// Per-row layer norm on [L, d]; gamma/beta have length d.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = g.v(x.id);
    const Tensor<T>& gv = g.v(gamma.id);
    const Tensor<T>& bv = g.v(beta.id);
    if (xv.rank() != 2 || gv.numel() != xv.shape[1] || bv.numel() != xv.shape[1])
        throw ShapeError("layer_norm: shape mismatch");
    const int64_t rows = xv.shape[0], d = xv.shape[1];

    Tensor<T> out({rows, d});
    Tensor<T> xhat({rows, d});
    std::vector<T> inv(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        T mu = 0;
        for (int64_t c = 0; c < d; ++c) mu += xv.at2(r, c);
        mu /= static_cast<T>(d);
        T var = 0;
        for (int64_t c = 0; c < d; ++c) {
            const T dlt = xv.at2(r, c) - mu;
            var += dlt * dlt;
        }
        var /= static_cast<T>(d);
        const T iv = T(1) / std::sqrt(var + eps);
        inv[static_cast<size_t>(r)] = iv;
        for (int64_t c = 0; c < d; ++c) {
            const T xh = (xv.at2(r, c) - mu) * iv;
            xhat.at2(r, c) = xh;
            out.at2(r, c) = gv.data[static_cast<size_t>(c)] * xh + bv.data[static_cast<size_t>(c)];
        }
    }

    const bool ng = g.needs_grad(x.id) || g.needs_grad(gamma.id) || g.needs_grad(beta.id);
    return g.op(std::move(out), ng,
                [&g, x, gamma, beta, xhat = std::move(xhat), inv = std::move(inv)](Var<T> y) {
        return [&g, x, gamma, beta, xhat, inv, y]() {
            const Tensor<T>& go = g.grad_buf(y.id);
            const Tensor<T>& gv2 = g.v(gamma.id);
            const int64_t rows = xhat.shape[0], d = xhat.shape[1];
            if (g.needs_grad(beta.id)) {
                Tensor<T>& gb = g.grad_buf(beta.id);
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t c = 0; c < d; ++c) gb.data[static_cast<size_t>(c)] += go.at2(r, c);
            }
            if (g.needs_grad(gamma.id)) {
                Tensor<T>& gg = g.grad_buf(gamma.id);
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t c = 0; c < d; ++c)
                        gg.data[static_cast<size_t>(c)] += go.at2(r, c) * xhat.at2(r, c);
            }
            if (g.needs_grad(x.id)) {
                Tensor<T>& gx = g.grad_buf(x.id);
                for (int64_t r = 0; r < rows; ++r) {
                    T m1 = 0, m2 = 0;
                    for (int64_t c = 0; c < d; ++c) {
                        const T dxh = go.at2(r, c) * gv2.data[static_cast<size_t>(c)];
                        m1 += dxh;
                        m2 += dxh * xhat.at2(r, c);
                    }
                    m1 /= static_cast<T>(d);
                    m2 /= static_cast<T>(d);
                    for (int64_t c = 0; c < d; ++c) {
                        const T dxh = go.at2(r, c) * gv2.data[static_cast<size_t>(c)];
                        gx.at2(r, c) += inv[static_cast<size_t>(r)] * (dxh - m1 - xhat.at2(r, c) * m2);
                    }
                }
            }
        };
    });
}

// Group norm on [C, H, W]; gamma/beta have length C.
template <typename T>
Var<T> group_norm(Var<T> x, Var<T> gamma, Var<T> beta, int groups, T eps = T(1e-5)) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = g.v(x.id);
    if (xv.rank() != 3) throw ShapeError("group_norm: [C,H,W] input required");
    const int64_t C = xv.shape[0], H = xv.shape[1], W = xv.shape[2];
    if (C % groups != 0) throw ShapeError("group_norm: channels not divisible by groups");
    const Tensor<T>& gv = g.v(gamma.id);
    const Tensor<T>& bv = g.v(beta.id);
    if (gv.numel() != C || bv.numel() != C) throw ShapeError("group_norm: gamma/beta size");
    const int64_t per = C / groups, hw = H * W, scope = per * hw;

    Tensor<T> out(xv.shape);
    Tensor<T> xhat(xv.shape);
    std::vector<T> inv(static_cast<size_t>(groups));
    for (int gi = 0; gi < groups; ++gi) {
        const int64_t c0 = gi * per;
        const T* base = xv.ptr() + c0 * hw;
        T mu = 0;
        for (int64_t i = 0; i < scope; ++i) mu += base[i];
        mu /= static_cast<T>(scope);
        T var = 0;
        for (int64_t i = 0; i < scope; ++i) {
            const T d = base[i] - mu;
            var += d * d;
        }
        var /= static_cast<T>(scope);
        const T iv = T(1) / std::sqrt(var + eps);
        inv[static_cast<size_t>(gi)] = iv;
        for (int64_t c = c0; c < c0 + per; ++c) {
            const T ga = gv.data[static_cast<size_t>(c)], be = bv.data[static_cast<size_t>(c)];
            for (int64_t i = 0; i < hw; ++i) {
                const T xh = (xv.data[static_cast<size_t>(c * hw + i)] - mu) * iv;
                xhat.data[static_cast<size_t>(c * hw + i)] = xh;
                out.data[static_cast<size_t>(c * hw + i)] = ga * xh + be;
            }
        }
    }

    const bool ng = g.needs_grad(x.id) || g.needs_grad(gamma.id) || g.needs_grad(beta.id);
    return g.op(std::move(out), ng,
                [&g, x, gamma, beta, groups, per, hw, scope, xhat = std::move(xhat),
                 inv = std::move(inv)](Var<T> y) {
        return [&g, x, gamma, beta, groups, per, hw, scope, xhat, inv, y]() {
            const Tensor<T>& go = g.grad_buf(y.id);
            const Tensor<T>& gv2 = g.v(gamma.id);
            if (g.needs_grad(beta.id)) {
                Tensor<T>& gb = g.grad_buf(beta.id);
                for (int64_t c = 0; c < static_cast<int64_t>(groups) * per; ++c)
                    for (int64_t i = 0; i < hw; ++i)
                        gb.data[static_cast<size_t>(c)] += go.data[static_cast<size_t>(c * hw + i)];
            }
            if (g.needs_grad(gamma.id)) {
                Tensor<T>& gg = g.grad_buf(gamma.id);
                for (int64_t c = 0; c < static_cast<int64_t>(groups) * per; ++c)
                    for (int64_t i = 0; i < hw; ++i)
                        gg.data[static_cast<size_t>(c)] += go.data[static_cast<size_t>(c * hw + i)] *
                                                          xhat.data[static_cast<size_t>(c * hw + i)];
            }
            if (g.needs_grad(x.id)) {
                Tensor<T>& gx = g.grad_buf(x.id);
                for (int gi = 0; gi < groups; ++gi) {
                    const int64_t c0 = gi * per;
                    T m1 = 0, m2 = 0;
                    for (int64_t c = c0; c < c0 + per; ++c) {
                        const T ga = gv2.data[static_cast<size_t>(c)];
                        for (int64_t i = 0; i < hw; ++i) {
                            const T dxh = go.data[static_cast<size_t>(c * hw + i)] * ga;
                            m1 += dxh;
                            m2 += dxh * xhat.data[static_cast<size_t>(c * hw + i)];
                        }
                    }
                    m1 /= static_cast<T>(scope);
                    m2 /= static_cast<T>(scope);
                    for (int64_t c = c0; c < c0 + per; ++c) {
                        const T ga = gv2.data[static_cast<size_t>(c)];
                        for (int64_t i = 0; i < hw; ++i) {
                            const T dxh = go.data[static_cast<size_t>(c * hw + i)] * ga;
                            gx.data[static_cast<size_t>(c * hw + i)] +=
                                inv[static_cast<size_t>(gi)] *
                                (dxh - m1 - xhat.data[static_cast<size_t>(c * hw + i)] * m2);
                        }
                    }
                }
            }
        };
    });
}

// ---------------------------------------------------------------------------
// Convolution ([C,H,W] layout, square kernel)
// ---------------------------------------------------------------------------

namespace detail {

// M[oy*Wo+ox, (c*k+ky)*k+kx] = x[c, oy*s+ky-p, ox*s+kx-p]  (0 outside)
template <typename T>
void im2col(const Tensor<T>& x, int k, int stride, int pad, Tensor<T>& m, int64_t ho, int64_t wo) {
    const int64_t C = x.shape[0], H = x.shape[1], W = x.shape[2];
    const int64_t cols = C * k * k;
    m.fill(T(0));
    for (int64_t oy = 0; oy < ho; ++oy) {
        for (int64_t ox = 0; ox < wo; ++ox) {
            T* row = m.ptr() + (oy * wo + ox) * cols;
            for (int64_t c = 0; c < C; ++c) {
                for (int ky = 0; ky < k; ++ky) {
                    const int64_t iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= H) continue;
                    for (int kx = 0; kx < k; ++kx) {
                        const int64_t ix = ox * stride + kx - pad;
                        if (ix < 0 || ix >= W) continue;
                        row[(c * k + ky) * k + kx] = x.data[static_cast<size_t>((c * H + iy) * W + ix)];
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const Tensor<T>& m, int k, int stride, int pad, Tensor<T>& gx, int64_t ho, int64_t wo) {
    const int64_t C = gx.shape[0], H = gx.shape[1], W = gx.shape[2];
    const int64_t cols = C * k * k;
    for (int64_t oy = 0; oy < ho; ++oy) {
        for (int64_t ox = 0; ox < wo; ++ox) {
            const T* row = m.ptr() + (oy * wo + ox) * cols;
            for (int64_t c = 0; c < C; ++c) {
                for (int ky = 0; ky < k; ++ky) {
                    const int64_t iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= H) continue;
                    for (int kx = 0; kx < k; ++kx) {
                        const int64_t ix = ox * stride + kx - pad;
                        if (ix < 0 || ix >= W) continue;
                        gx.data[static_cast<size_t>((c * H + iy) * W + ix)] += row[(c * k + ky) * k + kx];
                    }
                }
            }
        }
    }
}

}  // namespace detail

// x: [Cin,H,W], w: [Cout, Cin*k*k], b: [Cout] (pass invalid Var to skip bias).
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, int k, int stride = 1, int pad = -1) {
    if (pad < 0) pad = k / 2;
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = g.v(x.id);
    const Tensor<T>& wv = g.v(w.id);
    if (xv.rank() != 3) throw ShapeError("conv2d: [C,H,W] input required");
    const int64_t Cin = xv.shape[0], H = xv.shape[1], W = xv.shape[2];
    if (wv.rank() != 2 || wv.shape[1] != Cin * k * k)
        throw ShapeError("conv2d: weight shape mismatch, got " + wv.shape_str());
    const int64_t Cout = wv.shape[0];
    const int64_t ho = (H + 2 * pad - k) / stride + 1;
    const int64_t wo = (W + 2 * pad - k) / stride + 1;

    Tensor<T> m({ho * wo, Cin * k * k});
    detail::im2col(xv, k, stride, pad, m, ho, wo);
    Tensor<T> out({Cout, ho, wo});
    {
        ConstMatMap<T> M(m.ptr(), ho * wo, Cin * k * k);
        ConstMatMap<T> Wm(wv.ptr(), Cout, Cin * k * k);
        MatMap<T> O(out.ptr(), Cout, ho * wo);
        O.noalias() = Wm * M.transpose();
    }
    const bool has_bias = b.valid();
    if (has_bias) {
        const Tensor<T>& bv = g.v(b.id);
        if (bv.numel() != Cout) throw ShapeError("conv2d: bias size mismatch");
        for (int64_t c = 0; c < Cout; ++c) {
            T* p = out.ptr() + c * ho * wo;
            const T bias = bv.data[static_cast<size_t>(c)];
            for (int64_t i = 0; i < ho * wo; ++i) p[i] += bias;
        }
    }

    const bool ng = g.needs_grad(x.id) || g.needs_grad(w.id) || (has_bias && g.needs_grad(b.id));
    return g.op(std::move(out), ng, [&g, x, w, b, k, stride, pad, ho, wo, has_bias](Var<T> y) {
        return [&g, x, w, b, k, stride, pad, ho, wo, has_bias, y]() {
            const Tensor<T>& go = g.grad_buf(y.id);
            const Tensor<T>& xv2 = g.v(x.id);
            const Tensor<T>& wv2 = g.v(w.id);
            const int64_t Cin = xv2.shape[0];
            const int64_t Cout = wv2.shape[0];
            ConstMatMap<T> dY(go.ptr(), Cout, ho * wo);
            if (has_bias && g.needs_grad(b.id)) {
                Tensor<T>& gb = g.grad_buf(b.id);
                for (int64_t c = 0; c < Cout; ++c) {
                    T s = 0;
                    const T* p = go.ptr() + c * ho * wo;
                    for (int64_t i = 0; i < ho * wo; ++i) s += p[i];
                    gb.data[static_cast<size_t>(c)] += s;
                }
            }
            if (g.needs_grad(w.id)) {
                // recompute im2col (cheaper than caching it across the tape)
                Tensor<T> m2({ho * wo, Cin * k * k});
                detail::im2col(xv2, k, stride, pad, m2, ho, wo);
                ConstMatMap<T> M(m2.ptr(), ho * wo, Cin * k * k);
                Tensor<T>& gw = g.grad_buf(w.id);
                MatMap<T> dW(gw.ptr(), Cout, Cin * k * k);
                dW.noalias() += dY * M;
            }
            if (g.needs_grad(x.id)) {
                Tensor<T> dM({ho * wo, Cin * k * k});
                ConstMatMap<T> Wm(wv2.ptr(), Cout, Cin * k * k);
                MatMap<T> dMm(dM.ptr(), ho * wo, Cin * k * k);
                dMm.noalias() = dY.transpose() * Wm;
                detail::col2im_add(dM, k, stride, pad, g.grad_buf(x.id), ho, wo);
            }
        };
    });
}

// Per-channel bias over [C,H,W] (time-embedding injection).
template <typename T>
Var<T> add_channel_bias(Var<T> x, Var<T> v) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = g.v(x.id);
    const Tensor<T>& vv = g.v(v.id);
    if (xv.rank() != 3 || vv.numel() != xv.shape[0]) throw ShapeError("add_channel_bias: shape mismatch");
    const int64_t C = xv.shape[0], hw = xv.shape[1] * xv.shape[2];
    Tensor<T> out = xv;
    for (int64_t c = 0; c < C; ++c) {
        T* p = out.ptr() + c * hw;
        const T bias = vv.data[static_cast<size_t>(c)];
        for (int64_t i = 0; i < hw; ++i) p[i] += bias;
    }
    const bool ng = g.needs_grad(x.id) || g.needs_grad(v.id);
    return g.op(std::move(out), ng, [&g, x, v, C, hw](Var<T> y) {
        return [&g, x, v, C, hw, y]() {
            const Tensor<T>& go = g.grad_buf(y.id);
            if (g.needs_grad(x.id)) g.grad_buf(x.id).add_(go);
            if (g.needs_grad(v.id)) {
                Tensor<T>& gv = g.grad_buf(v.id);
                for (int64_t c = 0; c < C; ++c) {
                    T s = 0;
                    const T* p = go.ptr() + c * hw;
                    for (int64_t i = 0; i < hw; ++i) s += p[i];
                    gv.data[static_cast<size_t>(c)] += s;
                }
            }
        };
    });
}

// Nearest-neighbor 2x upsample of [C,H,W].
template <typename T>
Var<T> upsample_nearest2(Var<T> x) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = g.v(x.id);
    if (xv.rank() != 3) throw ShapeError("upsample_nearest2: [C,H,W] input required");
    const int64_t C = xv.shape[0], H = xv.shape[1], W = xv.shape[2];
    Tensor<T> out({C, 2 * H, 2 * W});
    for (int64_t c = 0; c < C; ++c)
        for (int64_t ygrid = 0; ygrid < 2 * H; ++ygrid)
            for (int64_t xgrid = 0; xgrid < 2 * W; ++xgrid)
                out.data[static_cast<size_t>((c * 2 * H + ygrid) * 2 * W + xgrid)] =
                    xv.data[static_cast<size_t>((c * H + ygrid / 2) * W + xgrid / 2)];
    return g.op(std::move(out), g.needs_grad(x.id), [&g, x, C, H, W](Var<T> y) {
        return [&g, x, C, H, W, y]() {
            const Tensor<T>& go = g.grad_buf(y.id);
            Tensor<T>& gx = g.grad_buf(x.id);
            for (int64_t c = 0; c < C; ++c)
                for (int64_t ygrid = 0; ygrid < 2 * H; ++ygrid)
                    for (int64_t xgrid = 0; xgrid < 2 * W; ++xgrid)
                        gx.data[static_cast<size_t>((c * H + ygrid / 2) * W + xgrid / 2)] +=
                            go.data[static_cast<size_t>((c * 2 * H + ygrid) * 2 * W + xgrid)];
        };
    });
}

// ---------------------------------------------------------------------------
// Layout changes
// ---------------------------------------------------------------------------

// [C,H,W] -> [H*W, C] token rows.
template <typename T>
Var<T> chw_to_rows(Var<T> x) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = g.v(x.id);
    if (xv.rank() != 3) throw ShapeError("chw_to_rows: [C,H,W] input required");
    const int64_t C = xv.shape[0], hw = xv.shape[1] * xv.shape[2];
    Tensor<T> out({hw, C});
    for (int64_t c = 0; c < C; ++c)
        for (int64_t i = 0; i < hw; ++i) out.data[static_cast<size_t>(i * C + c)] = xv.data[static_cast<size_t>(c * hw + i)];
    return g.op(std::move(out), g.needs_grad(x.id), [&g, x, C, hw](Var<T> y) {
        return [&g, x, C, hw, y]() {
            const Tensor<T>& go = g.grad_buf(y.id);
            Tensor<T>& gx = g.grad_buf(x.id);
            for (int64_t c = 0; c < C; ++c)
                for (int64_t i = 0; i < hw; ++i)
                    gx.data[static_cast<size_t>(c * hw + i)] += go.data[static_cast<size_t>(i * C + c)];
        };
    });
}

// [H*W, C] -> [C,H,W].
template <typename T>
Var<T> rows_to_chw(Var<T> x, int64_t H, int64_t W) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = g.v(x.id);
    if (xv.rank() != 2 || xv.shape[0] != H * W) throw ShapeError("rows_to_chw: shape mismatch");
    const int64_t C = xv.shape[1], hw = H * W;
    Tensor<T> out({C, H, W});
    for (int64_t c = 0; c < C; ++c)
        for (int64_t i = 0; i < hw; ++i) out.data[static_cast<size_t>(c * hw + i)] = xv.data[static_cast<size_t>(i * C + c)];
    return g.op(std::move(out), g.needs_grad(x.id), [&g, x, C, hw](Var<T> y) {
        return [&g, x, C, hw, y]() {
            const Tensor<T>& go = g.grad_buf(y.id);
            Tensor<T>& gx = g.grad_buf(x.id);
            for (int64_t c = 0; c < C; ++c)
                for (int64_t i = 0; i < hw; ++i)
                    gx.data[static_cast<size_t>(i * C + c)] += go.data[static_cast<size_t>(c * hw + i)];
        };
    });
}

template <typename T>
Var<T> reshape(Var<T> x, std::vector<int64_t> shape) {
    Graph<T>& g = *x.g;
    Tensor<T> out = g.v(x.id).reshaped(std::move(shape));
    return g.op(std::move(out), g.needs_grad(x.id), [&g, x](Var<T> y) {
        return [&g, x, y]() {
            const Tensor<T>& go = g.grad_buf(y.id);
            Tensor<T>& gx = g.grad_buf(x.id);
            for (size_t i = 0; i < gx.data.size(); ++i) gx.data[i] += go.data[i];
        };
    });
}

// Concatenate rank-2 tensors along rows (all with equal column count).
template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& xs) {
    if (xs.empty()) throw ShapeError("concat_rows: empty input");
    Graph<T>& g = *xs[0].g;
    const int64_t cols = g.v(xs[0].id).shape[1];
    int64_t rows = 0;
    bool ng = false;
    for (const auto& x : xs) {
        const Tensor<T>& xv = g.v(x.id);
        if (xv.rank() != 2 || xv.shape[1] != cols) throw ShapeError("concat_rows: column mismatch");
        rows += xv.shape[0];
        ng = ng || g.needs_grad(x.id);
    }
    Tensor<T> out({rows, cols});
    int64_t r = 0;
    for (const auto& x : xs) {
        const Tensor<T>& xv = g.v(x.id);
        std::copy(xv.data.begin(), xv.data.end(), out.data.begin() + r * cols);
        r += xv.shape[0];
    }
    return g.op(std::move(out), ng, [&g, xs, cols](Var<T> y) {
        return [&g, xs, cols, y]() {
            const Tensor<T>& go = g.grad_buf(y.id);
            int64_t r0 = 0;
            for (const auto& x : xs) {
                const int64_t n = g.v(x.id).shape[0];
                if (g.needs_grad(x.id)) {
                    Tensor<T>& gx = g.grad_buf(x.id);
                    for (int64_t i = 0; i < n * cols; ++i) gx.data[static_cast<size_t>(i)] += go.data[static_cast<size_t>(r0 * cols + i)];
                }
                r0 += n;
            }
        };
    });
}

template <typename T>
Var<T> slice_rows(Var<T> x, int64_t r0, int64_t n) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = g.v(x.id);
    if (xv.rank() != 2 || r0 < 0 || r0 + n > xv.shape[0]) throw ShapeError("slice_rows: out of range");
    const int64_t cols = xv.shape[1];
    Tensor<T> out({n, cols});
    std::copy(xv.data.begin() + r0 * cols, xv.data.begin() + (r0 + n) * cols, out.data.begin());
    return g.op(std::move(out), g.needs_grad(x.id), [&g, x, r0, n, cols](Var<T> y) {
        return [&g, x, r0, n, cols, y]() {
            const Tensor<T>& go = g.grad_buf(y.id);
            Tensor<T>& gx = g.grad_buf(x.id);
            for (int64_t i = 0; i < n * cols; ++i) gx.data[static_cast<size_t>(r0 * cols + i)] += go.data[static_cast<size_t>(i)];
        };
    });
}

template <typename T>
Var<T> slice_cols(Var<T> x, int64_t c0, int64_t n) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = g.v(x.id);
    if (xv.rank() != 2 || c0 < 0 || c0 + n > xv.shape[1]) throw ShapeError("slice_cols: out of range");
    const int64_t rows = xv.shape[0], cols = xv.shape[1];
    Tensor<T> out({rows, n});
    for (int64_t r = 0; r < rows; ++r)
        std::copy(xv.data.begin() + r * cols + c0, xv.data.begin() + r * cols + c0 + n,
                  out.data.begin() + r * n);
    return g.op(std::move(out), g.needs_grad(x.id), [&g, x, c0, n, rows, cols](Var<T> y) {
        return [&g, x, c0, n, rows, cols, y]() {
            const Tensor<T>& go = g.grad_buf(y.id);
            Tensor<T>& gx = g.grad_buf(x.id);
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < n; ++j)
                    gx.data[static_cast<size_t>(r * cols + c0 + j)] += go.data[static_cast<size_t>(r * n + j)];
        };
    });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& xs) {
    if (xs.empty()) throw ShapeError("concat_cols: empty input");
    Graph<T>& g = *xs[0].g;
    const int64_t rows = g.v(xs[0].id).shape[0];
    int64_t cols = 0;
    bool ng = false;
    for (const auto& x : xs) {
        const Tensor<T>& xv = g.v(x.id);
        if (xv.rank() != 2 || xv.shape[0] != rows) throw ShapeError("concat_cols: row mismatch");
        cols += xv.shape[1];
        ng = ng || g.needs_grad(x.id);
    }
    Tensor<T> out({rows, cols});
    int64_t c0 = 0;
    for (const auto& x : xs) {
        const Tensor<T>& xv = g.v(x.id);
        const int64_t n = xv.shape[1];
        for (int64_t r = 0; r < rows; ++r)
            std::copy(xv.data.begin() + r * n, xv.data.begin() + (r + 1) * n,
                      out.data.begin() + r * cols + c0);
        c0 += n;
    }
    return g.op(std::move(out), ng, [&g, xs, rows, cols](Var<T> y) {
        return [&g, xs, rows, cols, y]() {
            const Tensor<T>& go = g.grad_buf(y.id);
            int64_t c0 = 0;
            for (const auto& x : xs) {
                const int64_t n = g.v(x.id).shape[1];
                if (g.needs_grad(x.id)) {
                    Tensor<T>& gx = g.grad_buf(x.id);
                    for (int64_t r = 0; r < rows; ++r)
                        for (int64_t j = 0; j < n; ++j)
                            gx.data[static_cast<size_t>(r * n + j)] += go.data[static_cast<size_t>(r * cols + c0 + j)];
                }
                c0 += n;
            }
        };
    });
}

// Concatenate [C1,H,W] and [C2,H,W] along channels (UNet skips).
template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
    Graph<T>& g = *a.g;
    const Tensor<T>& av = g.v(a.id);
    const Tensor<T>& bv = g.v(b.id);
    if (av.rank() != 3 || bv.rank() != 3 || av.shape[1] != bv.shape[1] || av.shape[2] != bv.shape[2])
        throw ShapeError("concat_channels: spatial mismatch");
    Tensor<T> out({av.shape[0] + bv.shape[0], av.shape[1], av.shape[2]});
    std::copy(av.data.begin(), av.data.end(), out.data.begin());
    std::copy(bv.data.begin(), bv.data.end(), out.data.begin() + av.numel());
    const bool ng = g.needs_grad(a.id) || g.needs_grad(b.id);
    return g.op(std::move(out), ng, [&g, a, b](Var<T> y) {
        return [&g, a, b, y]() {
            const Tensor<T>& go = g.grad_buf(y.id);
            const int64_t na = g.v(a.id).numel();
            if (g.needs_grad(a.id)) {
                Tensor<T>& ga = g.grad_buf(a.id);
                for (int64_t i = 0; i < na; ++i) ga.data[static_cast<size_t>(i)] += go.data[static_cast<size_t>(i)];
            }
            if (g.needs_grad(b.id)) {
                Tensor<T>& gb = g.grad_buf(b.id);
                const int64_t nb = g.v(b.id).numel();
                for (int64_t i = 0; i < nb; ++i) gb.data[static_cast<size_t>(i)] += go.data[static_cast<size_t>(na + i)];
            }
        };
    });
}

// Row-wise L2 normalization: y_r = x_r / max(||x_r||, eps).
template <typename T>
Var<T> l2_normalize_rows(Var<T> x, T eps = T(1e-8)) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = g.v(x.id);
    if (xv.rank() != 2) throw ShapeError("l2_normalize_rows: rank-2 input required");
    const int64_t rows = xv.shape[0], d = xv.shape[1];
    Tensor<T> out({rows, d});
    std::vector<T> inv(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        T sq = 0;
        for (int64_t c = 0; c < d; ++c) sq += xv.at2(r, c) * xv.at2(r, c);
        const T iv = T(1) / std::max(std::sqrt(sq), eps);
        inv[static_cast<size_t>(r)] = iv;
        for (int64_t c = 0; c < d; ++c) out.at2(r, c) = xv.at2(r, c) * iv;
    }
    return g.op(std::move(out), g.needs_grad(x.id), [&g, x, inv = std::move(inv)](Var<T> y) {
        return [&g, x, inv, y]() {
            const Tensor<T>& go = g.grad_buf(y.id);
            const Tensor<T>& yv = g.v(y.id);
            Tensor<T>& gx = g.grad_buf(x.id);
            const int64_t rows = yv.shape[0], d = yv.shape[1];
            for (int64_t r = 0; r < rows; ++r) {
                T dot = 0;
                for (int64_t c = 0; c < d; ++c) dot += go.at2(r, c) * yv.at2(r, c);
                for (int64_t c = 0; c < d; ++c)
                    gx.at2(r, c) += inv[static_cast<size_t>(r)] * (go.at2(r, c) - yv.at2(r, c) * dot);
            }
        };
    });
}

// Embedding lookup: rows of `table` [V, d] selected by ids.
template <typename T>
Var<T> embedding(Var<T> table, const std::vector<int>& ids) {
    Graph<T>& g = *table.g;
    const Tensor<T>& tv = g.v(table.id);
    if (tv.rank() != 2) throw ShapeError("embedding: rank-2 table required");
    const int64_t V = tv.shape[0], d = tv.shape[1];
    Tensor<T> out({static_cast<int64_t>(ids.size()), d});
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= V) throw ShapeError("embedding: id out of range");
        std::copy(tv.data.begin() + ids[i] * d, tv.data.begin() + (ids[i] + 1) * d,
                  out.data.begin() + static_cast<int64_t>(i) * d);
    }
    return g.op(std::move(out), g.needs_grad(table.id), [&g, table, ids, d](Var<T> y) {
        return [&g, table, ids, d, y]() {
            const Tensor<T>& go = g.grad_buf(y.id);
            Tensor<T>& gt = g.grad_buf(table.id);
            for (size_t i = 0; i < ids.size(); ++i)
                for (int64_t c = 0; c < d; ++c)
                    gt.data[static_cast<size_t>(ids[i] * d + c)] += go.data[i * static_cast<size_t>(d) + static_cast<size_t>(c)];
        };
    });
}

}  // namespace mmgen
