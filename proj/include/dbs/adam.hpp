#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "dbs/tensor.hpp"

namespace dbs {

struct AdamState {
    std::vector<double> first_moment;
    std::vector<double> second_moment;
    std::uint64_t step_count = 0;
    double lr = 0.5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps_stability = 1e-8;

    AdamState() = default;
    AdamState(std::size_t n, double learning_rate)
        : first_moment(n, 0.0), second_moment(n, 0.0), lr(learning_rate) {}
};

// One bias-corrected adaptive-moment update of `params` from its current grad.
inline void adam_step(Tensor& params, AdamState& state) {
    if (!params.requires_grad() || !params.has_grad()) {
        throw ContractError("adam_step: parameter tensor has no gradient");
    }
    const std::size_t n = params.size();
    if (state.first_moment.empty() && state.second_moment.empty() && state.step_count == 0) {
        state.first_moment.assign(n, 0.0);
        state.second_moment.assign(n, 0.0);
    }
    if (state.first_moment.size() != n || state.second_moment.size() != n) {
        throw ShapeError("adam_step: moment length does not match parameter length " + std::to_string(n));
    }
    ++state.step_count;
    const double t = static_cast<double>(state.step_count);
    const double c1 = 1.0 - std::pow(state.beta1, t);
    const double c2 = 1.0 - std::pow(state.beta2, t);
    auto g = params.grad();
    auto w = params.data();
    for (std::size_t i = 0; i < n; ++i) {
        const double gi = g[i];
        state.first_moment[i] = state.beta1 * state.first_moment[i] + (1.0 - state.beta1) * gi;
        state.second_moment[i] = state.beta2 * state.second_moment[i] + (1.0 - state.beta2) * gi * gi;
        const double m_hat = state.first_moment[i] / c1;
        const double v_hat = state.second_moment[i] / c2;
        w[i] = static_cast<float>(w[i] - state.lr * m_hat / (std::sqrt(v_hat) + state.eps_stability));
    }
    for (float v : w) {
        if (!std::isfinite(v)) throw NumericError("adam_step: parameter became non-finite");
    }
}

} // namespace dbs
