#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "mmgen/core/jsonio.hpp"
#include "mmgen/core/tensor.hpp"

namespace mmgen::diffuser {

// Discrete noise levels t = 1..T with cumulative noise variance beta_t, i.e.
// x_t = x_0*sqrt(1-beta_t) + eps*sqrt(beta_t). beta is stored in double so the
// signal/noise identity holds to machine precision regardless of the compute
// dtype. beta[0] = 0 stands for the clean level.
struct NoiseSchedule {
    int T = 1000;
    std::vector<double> beta;

    // Cosine-derived cumulative variance mapped onto (lo, hi) so the sequence
    // is strictly increasing with beta_1 ~ 1e-4 and beta_T = 1 - 1e-4.
    static NoiseSchedule cosine(int T, double lo = 1e-4, double hi = 1.0 - 1e-4) {
        if (T < 1) throw ConfigError("schedule needs T >= 1");
        NoiseSchedule s;
        s.T = T;
        s.beta.resize(static_cast<size_t>(T) + 1);
        s.beta[0] = 0.0;
        for (int t = 1; t <= T; ++t) {
            const double ph = 0.5 * std::numbers::pi * static_cast<double>(t) / T;
            const double sin2 = std::sin(ph) * std::sin(ph);  // 1 - cos^2
            s.beta[static_cast<size_t>(t)] = lo + (hi - lo) * sin2;
        }
        s.validate();
        return s;
    }

    // All-noise test schedule: beta_T exactly 1 (x_T = eps).
    static NoiseSchedule test_endpoint(int T) {
        NoiseSchedule s = cosine(T);
        s.beta[static_cast<size_t>(T)] = 1.0;
        return s;
    }

    void validate() const {
        if (static_cast<int>(beta.size()) != T + 1) throw ConfigError("schedule size mismatch");
        for (int t = 1; t <= T; ++t) {
            const double b = beta[static_cast<size_t>(t)];
            if (!(b > 0.0 && b < 1.0)) throw ConfigError("beta out of (0,1)");
            if (b <= beta[static_cast<size_t>(t) - 1] && t > 1)
                throw ConfigError("beta must increase strictly");
        }
    }

    double signal(int t) const { return std::sqrt(1.0 - beta.at(static_cast<size_t>(t))); }
    double noise(int t) const { return std::sqrt(beta.at(static_cast<size_t>(t))); }

    json to_json() const {
        json j;
        j["T"] = T;
        return j;
    }
    static NoiseSchedule from_json(const json& j) { return cosine(j.at("T").get<int>()); }
};

// x_t = x0*sqrt(1-beta_t) + eps*sqrt(beta_t)
template <typename T>
Tensor<T> add_noise(const Tensor<T>& x0, int t, const Tensor<T>& eps, const NoiseSchedule& sched) {
    if (!x0.same_shape(eps)) throw ShapeError("add_noise: x0/eps shape mismatch");
    if (t < 1 || t > sched.T) throw ConfigError("add_noise: t out of [1,T]");
    const T s = static_cast<T>(sched.signal(t));
    const T n = static_cast<T>(sched.noise(t));
    Tensor<T> out = x0;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = out.data[i] * s + eps.data[i] * n;
    return out;
}

// Deterministic (eta = 0) DDIM update from level t to t_prev < t.
template <typename T>
Tensor<T> ddim_step(const Tensor<T>& x_t, const Tensor<T>& eps_hat, int t, int t_prev,
                    const NoiseSchedule& sched) {
    if (!x_t.same_shape(eps_hat)) throw ShapeError("ddim_step: shape mismatch");
    if (!(t_prev < t)) throw ConfigError("ddim_step: t_prev must be < t");
    const double sig_t = sched.signal(t);
    if (sig_t == 0.0) throw ConfigError("ddim_step: signal scale is zero at t");
    const T inv_sig = static_cast<T>(1.0 / sig_t);
    const T noi_t = static_cast<T>(sched.noise(t));
    const T sig_p = static_cast<T>(sched.signal(t_prev));
    const T noi_p = static_cast<T>(sched.noise(t_prev));
    Tensor<T> out = x_t;
    for (size_t i = 0; i < out.data.size(); ++i) {
        const T x0_hat = (x_t.data[i] - noi_t * eps_hat.data[i]) * inv_sig;
        out.data[i] = t_prev == 0 ? x0_hat : sig_p * x0_hat + noi_p * eps_hat.data[i];
    }
    return out;
}

// eps_uncond + s * (eps_cond - eps_uncond)
template <typename T>
Tensor<T> cfg_combine(const Tensor<T>& eps_cond, const Tensor<T>& eps_uncond, T s) {
    if (!eps_cond.same_shape(eps_uncond)) throw ShapeError("cfg_combine: shape mismatch");
    Tensor<T> out = eps_uncond;
    for (size_t i = 0; i < out.data.size(); ++i)
        out.data[i] += s * (eps_cond.data[i] - eps_uncond.data[i]);
    return out;
}

}  // namespace mmgen::diffuser
