#pragma once

#include <functional>
#include <map>
#include <utility>
#include <vector>

#include "mmgen/core/parallel.hpp"
#include "mmgen/diffuser/schedule.hpp"
#include "mmgen/diffuser/unet.hpp"

namespace mmgen::diffuser {

// Draws for one batch element, fixed before any parallel work so results do
// not depend on scheduling.
template <typename T>
struct LossDraw {
    int t = 1;
    Tensor<T> eps;
    bool drop_cond = false;
};

template <typename T>
LossDraw<T> draw_loss_randomness(Rng& rng, const std::vector<int64_t>& x_shape,
                                 const NoiseSchedule& sched, double cond_drop_prob) {
    LossDraw<T> d;
    d.t = static_cast<int>(rng.uniform_int(1, sched.T));
    d.eps = Tensor<T>(x_shape);
    for (auto& v : d.eps.data) v = static_cast<T>(rng.normal());
    d.drop_cond = rng.bernoulli(cond_drop_prob);
    return d;
}

// Per-element graph: x_t = x0 s + eps n, eps_hat = unet(x_t, t, enc(plan)),
// loss = mean((eps_hat - eps)^2). Gradients flow through the UNet and the
// encoder stack.
template <typename T>
Var<T> element_loss(Graph<T>& g, const encoder::EncoderModel<T>& enc, const UNetModel<T>& unet,
                    const NoiseSchedule& sched, const encoder::SequencePlan<T>& plan,
                    const Tensor<T>& x0, const LossDraw<T>& draw) {
    const Tensor<T> x_t = add_noise(x0, draw.t, draw.eps, sched);
    Var<T> states = enc.encode_var(g, plan);
    Var<T> eps_hat = unet.forward(g, g.input(x_t), draw.t, states, &plan.mask);
    return mse(eps_hat, g.input(draw.eps));
}

using GradMap = std::function<void(const std::string&, const void*)>;

template <typename T>
struct BatchGrads {
    std::map<std::string, Tensor<T>> grads;

    void add(const std::string& name, const Tensor<T>& g, T scale) {
        auto it = grads.find(name);
        if (it == grads.end()) {
            Tensor<T> t = g;
            t.scale_(scale);
            grads.emplace(name, std::move(t));
        } else {
            it->second.add_(g, scale);
        }
    }
};

// Batch loss over (plan, x0) pairs with uniform t, fresh eps, and conditioning
// dropped to the <null> sequence with probability cond_drop_prob. Gradients,
// when requested, are averaged over the batch in index order.
template <typename T>
T training_loss(const encoder::EncoderModel<T>& enc, const UNetModel<T>& unet,
                const NoiseSchedule& sched,
                const std::vector<std::pair<encoder::SequencePlan<T>, Tensor<T>>>& batch, Rng& rng,
                double cond_drop_prob, BatchGrads<T>* out_grads = nullptr) {
    if (batch.empty()) throw ConfigError("training_loss: empty batch");
    const int64_t n = static_cast<int64_t>(batch.size());

    std::vector<LossDraw<T>> draws;
    draws.reserve(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        Rng er = rng.child(static_cast<uint64_t>(i));
        draws.push_back(draw_loss_randomness<T>(er, batch[static_cast<size_t>(i)].second.shape,
                                                sched, cond_drop_prob));
    }

    std::vector<T> losses(static_cast<size_t>(n), T(0));
    std::vector<std::map<std::string, Tensor<T>>> elem_grads(static_cast<size_t>(n));
    parallel_for(n, [&](int64_t i) {
        const auto& [plan, x0] = batch[static_cast<size_t>(i)];
        Graph<T> g(out_grads != nullptr);
        const encoder::SequencePlan<T> used = draws[static_cast<size_t>(i)].drop_cond
                                                  ? enc.plan_null()
                                                  : plan;
        Var<T> loss = element_loss(g, enc, unet, sched, used, x0, draws[static_cast<size_t>(i)]);
        losses[static_cast<size_t>(i)] = scalar(loss);
        if (out_grads) {
            g.backward(loss);
            auto& mine = elem_grads[static_cast<size_t>(i)];
            g.for_each_param_grad([&](const std::string& name, const Tensor<T>& grad) {
                auto it = mine.find(name);
                if (it == mine.end())
                    mine.emplace(name, grad);
                else
                    it->second.add_(grad);
            });
        }
    });

    T total = 0;
    for (int64_t i = 0; i < n; ++i) {
        const T l = losses[static_cast<size_t>(i)];
        if (!std::isfinite(static_cast<double>(l)))
            throw DivergenceError("training loss is non-finite at batch element " + std::to_string(i));
        total += l;
    }
    if (out_grads) {
        const T scale = T(1) / static_cast<T>(n);
        for (int64_t i = 0; i < n; ++i)  // fixed reduction order
            for (const auto& [name, grad] : elem_grads[static_cast<size_t>(i)])
                out_grads->add(name, grad, scale);
    }
    return total / static_cast<T>(n);
}

// Stub-friendly variant: the model is any callable (x_t, t, cond_dropped,
// index) -> eps_hat. Used by tests to pin the loss values of perfect and
// zero predictors without involving a network.
template <typename T, typename ModelFn>
T training_loss_with(ModelFn&& model, const NoiseSchedule& sched,
                     const std::vector<Tensor<T>>& x0_batch, Rng& rng, double cond_drop_prob) {
    if (x0_batch.empty()) throw ConfigError("training_loss: empty batch");
    T total = 0;
    for (size_t i = 0; i < x0_batch.size(); ++i) {
        Rng er = rng.child(static_cast<uint64_t>(i));
        const LossDraw<T> d = draw_loss_randomness<T>(er, x0_batch[i].shape, sched, cond_drop_prob);
        const Tensor<T> x_t = add_noise(x0_batch[i], d.t, d.eps, sched);
        const Tensor<T> eps_hat = model(x_t, d.t, d.drop_cond, i);
        if (!eps_hat.same_shape(d.eps)) throw ShapeError("training_loss: model output shape");
        T sum = 0;
        for (size_t k = 0; k < d.eps.data.size(); ++k) {
            const T diff = eps_hat.data[k] - d.eps.data[k];
            sum += diff * diff;
        }
        total += sum / static_cast<T>(d.eps.numel());
    }
    const T loss = total / static_cast<T>(x0_batch.size());
    if (!std::isfinite(static_cast<double>(loss))) throw DivergenceError("training loss is non-finite");
    return loss;
}

}  // namespace mmgen::diffuser
