#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "xling/tape.hpp"
#include "xling/tensor.hpp"

namespace xling {

// Rescale all trainable gradients in place so their global L2 norm (over the
// concatenation of every gradient) does not exceed max_norm. No-op for zero
// gradients or norms at or below the bound.
inline double clip_gradients(ParameterStore& store, double max_norm = 5.0) {
    if (max_norm <= 0) throw std::invalid_argument("clip_gradients: max_norm must be positive");
    double sq = 0.0;
    for (const auto& p : store)
        if (p->trainable) sq += p->grad.l2_norm_squared();
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const double s = max_norm / norm;
        for (const auto& p : store)
            if (p->trainable) p->grad.scale(s);
    }
    return norm;
}

// Adam with bias correction, defaults per the optimizer's published values.
// Moment slots are addressed by parameter index in the store, so the store's
// layout must not change between steps.
struct AdamState {
    double lr = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long long step = 0;
    std::vector<Tensor> m;
    std::vector<Tensor> v;

    void ensure_slots(const ParameterStore& store) {
        if (!m.empty()) {
            if (m.size() != store.size())
                throw std::invalid_argument("adam: parameter store layout changed");
            return;
        }
        m.reserve(store.size());
        v.reserve(store.size());
        for (const auto& p : store) {
            m.emplace_back(p->value.shape());
            v.emplace_back(p->value.shape());
        }
    }
};

inline void adam_step(ParameterStore& store, AdamState& state) {
    state.ensure_slots(store);
    state.step += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < store.size(); ++i) {
        Parameter* p = store.at(i);
        if (!p->trainable) continue;
        if (!p->grad.same_shape(p->value))
            throw std::invalid_argument("adam: gradient shape mismatch for " + p->name);
        Tensor& m = state.m[i];
        Tensor& v = state.v[i];
        double* pv = p->value.data();
        const double* g = p->grad.data();
        for (std::size_t k = 0; k < p->value.size(); ++k) {
            m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g[k];
            v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g[k] * g[k];
            const double mhat = m[k] / bc1;
            const double vhat = v[k] / bc2;
            pv[k] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

}  // namespace xling
