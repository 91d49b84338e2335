#pragma once

#include <cmath>
#include <map>
#include <string>

#include "mmgen/core/nn.hpp"

namespace mmgen::trainer {

// AdamW with decoupled weight decay and per-group learning rates. Groups with
// no entry are frozen; a trainable parameter in an unknown group is a
// configuration error. State walks std::map in name order, so updates are
// deterministic.
template <typename T>
struct AdamW {
    std::map<std::string, double> group_lr;
    double beta1 = 0.9, beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    int64_t step_count = 0;

    std::map<std::string, Tensor<T>> m, v;

    double lr_for(const std::string& group) const {
        auto it = group_lr.find(group);
        return it == group_lr.end() ? 0.0 : it->second;
    }

    void step(ParamStore<T>& ps, const std::map<std::string, Tensor<T>>& grads) {
        ++step_count;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
        for (const auto& [name, grad] : grads) {
            auto& entry = ps.entry(name);
            if (!entry.trainable)
                throw ConfigError("gradient delivered to frozen parameter " + name);
            const double lr = lr_for(entry.group);
            if (lr == 0.0)
                throw ConfigError("trainable parameter " + name + " has no learning rate (group '" +
                                  entry.group + "')");
            auto mit = m.find(name);
            if (mit == m.end()) {
                mit = m.emplace(name, Tensor<T>::zeros(grad.shape)).first;
                v.emplace(name, Tensor<T>::zeros(grad.shape));
            }
            Tensor<T>& mt = mit->second;
            Tensor<T>& vt = v.at(name);
            Tensor<T>& p = entry.value;
            for (size_t i = 0; i < p.data.size(); ++i) {
                const double g = static_cast<double>(grad.data[i]);
                const double mi = beta1 * static_cast<double>(mt.data[i]) + (1.0 - beta1) * g;
                const double vi = beta2 * static_cast<double>(vt.data[i]) + (1.0 - beta2) * g * g;
                mt.data[i] = static_cast<T>(mi);
                vt.data[i] = static_cast<T>(vi);
                const double mhat = mi / bc1;
                const double vhat = vi / bc2;
                p.data[i] = static_cast<T>(
                    static_cast<double>(p.data[i]) -
                    lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * static_cast<double>(p.data[i])));
            }
        }
    }
};

}  // namespace mmgen::trainer
