#pragma once

// Trigger inversion over the whole-dictionary convex hull with dynamic
// temperature scaling and backtracking.
//
// The free variable is a real matrix W (trigger length x dictionary size).
// Coefficients alpha = softmax(W / lambda) place every trigger slot inside the
// convex hull of the embedding table. Every `s` epochs the temperature is
// focused (lambda / c) while the relaxed loss stays under the bound beta',
// and otherwise rolled back (min(lambda * d, u)); a rollback from below the
// cap also adds Gaussian noise to W. Near-one-hot states whose discrete loss is under the bound are kept as
// candidates; the best one is returned.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dbs/adam.hpp"
#include "dbs/objective.hpp"
#include "dbs/ops.hpp"
#include "dbs/rng.hpp"

namespace dbs {

struct DbsConfig {
    std::size_t m = 10;         // trigger length
    double c = 2.0;             // focusing divisor
    double d = 5.0;             // backtrack multiplier
    double u = 2.0;             // temperature cap
    double delta = 10.0;        // std-dev of the randomization noise
    double beta_prime = 0.25;   // loss bound gating temperature reduction
    std::size_t s = 5;          // epochs between temperature checks
    std::size_t max_epochs = 200;
    double lr = 0.5;
    double onehot_tol = 1e-2;
    double lambda_init = 2.0;
    double init_scale = 1.0;    // std-dev of the Gaussian W initialisation
    const ClassifierBundle* aux_benign = nullptr;
    double aux_weight = 1.0;
    // Ablations: pin lambda at lambda_init / never roll back (failing checks
    // still divide by c and no noise is added).
    bool disable_temperature_scaling = false;
    bool disable_backtracking = false;
    bool randomize_at_cap = true;

    void validate() const {
        if (m == 0) throw ConfigError("dbs: trigger length must be positive");
        if (!(c > 1.0)) throw ConfigError("dbs: c must exceed 1");
        if (!(d > c)) throw ConfigError("dbs: d must exceed c");
        if (!(lambda_init > 0.0) || !(u >= lambda_init)) throw ConfigError("dbs: need 0 < lambda_init <= u");
        if (s == 0) throw ConfigError("dbs: s must be at least 1");
        if (!(beta_prime > 0.0)) throw ConfigError("dbs: beta' must be positive");
        if (!(delta > 0.0)) throw ConfigError("dbs: delta must be positive");
        if (!(lr > 0.0)) throw ConfigError("dbs: learning rate must be positive");
        if (!(onehot_tol > 0.0 && onehot_tol < 1.0)) throw ConfigError("dbs: one-hot tolerance must be in (0, 1)");
        if (aux_weight < 0.0) throw ConfigError("dbs: aux weight must be non-negative");
    }
};

enum class TrajectoryEvent { step, focus, backtrack, candidate };

inline std::string to_string(TrajectoryEvent e) {
    switch (e) {
    case TrajectoryEvent::step: return "step";
    case TrajectoryEvent::focus: return "focus";
    case TrajectoryEvent::backtrack: return "backtrack";
    case TrajectoryEvent::candidate: return "candidate";
    }
    return "?";
}

// One record per epoch. When several things happen in the same epoch the
// event shows the most specific one: candidate > focus/backtrack > step.
struct TrajectoryPoint {
    std::size_t epoch = 0;
    double relaxed_loss = 0.0;
    std::optional<double> discrete_loss;
    double lambda = 0.0;
    TrajectoryEvent event = TrajectoryEvent::step;
};

struct TriggerEstimate {
    std::string method = "dbs";
    std::vector<std::int32_t> token_ids;
    std::size_t alpha_rows = 0;
    std::size_t alpha_cols = 0;
    std::vector<float> alpha;     // coefficients at the recording moment
    double loss = 0.0;            // discrete inversion loss of token_ids
    double relaxed_loss = 0.0;    // relaxed loss of `alpha`
    double score = 0.0;           // value compared against the detection threshold
    int target_label = 0;
    std::optional<int> victim_label;
    bool one_hot = false;
    std::vector<TrajectoryPoint> trajectory;
};

// alpha_ij = exp(w_ij / lambda) / sum_j exp(w_ij / lambda), masked columns excluded.
inline Tensor coefficients(const Tensor& w, double lambda, const std::vector<bool>& mask = {}) {
    if (!(lambda > 0.0)) throw ContractError("coefficients: lambda must be positive, got " + std::to_string(lambda));
    return ops::softmax_rows(w, lambda, mask);
}

struct TemperatureDecision {
    double lambda;
    TrajectoryEvent event; // focus or backtrack
};

// lambda / c under the bound, min(lambda * d, u) otherwise.
inline TemperatureDecision temperature_update(double lambda, double loss, const DbsConfig& cfg) {
    if (loss < cfg.beta_prime) return {lambda / cfg.c, TrajectoryEvent::focus};
    return {std::min(lambda * cfg.d, cfg.u), TrajectoryEvent::backtrack};
}

// w_ij += eps, eps ~ N(0, delta) with delta read as the standard deviation.
inline void randomize(Tensor& w, double delta, Rng& rng) {
    if (!(delta >= 0.0)) throw ContractError("randomize: delta must be non-negative");
    if (delta == 0.0) return;
    std::normal_distribution<double> noise(0.0, delta);
    for (auto& v : w.data()) v = static_cast<float>(v + noise(rng));
}

// True iff every row's largest coefficient reaches 1 - tol.
inline bool is_one_hot(std::span<const float> alpha, std::size_t cols, double tol) {
    if (cols == 0 || alpha.size() % cols != 0) throw ShapeError("is_one_hot: ragged coefficient matrix");
    for (std::size_t r = 0; r < alpha.size() / cols; ++r) {
        auto row = alpha.subspan(r * cols, cols);
        if (*std::max_element(row.begin(), row.end()) < 1.0 - tol) return false;
    }
    return true;
}

inline bool is_one_hot(const Tensor& alpha, double tol) { return is_one_hot(alpha.values(), alpha.cols(), tol); }

// Row-wise argmax; ties go to the lowest index and masked columns are skipped.
inline std::vector<std::int32_t> discretize(std::span<const float> alpha, std::size_t cols,
                                            const std::vector<bool>& mask = {}) {
    if (cols == 0 || alpha.size() % cols != 0) throw ShapeError("discretize: ragged coefficient matrix");
    std::vector<std::int32_t> out;
    for (std::size_t r = 0; r < alpha.size() / cols; ++r) {
        std::optional<std::size_t> best;
        for (std::size_t c = 0; c < cols; ++c) {
            if (!mask.empty() && mask[c]) continue;
            if (!best || alpha[r * cols + c] > alpha[r * cols + *best]) best = c;
        }
        if (!best) throw ContractError("discretize: every column is masked");
        out.push_back(static_cast<std::int32_t>(*best));
    }
    return out;
}

inline std::vector<std::int32_t> discretize(const Tensor& alpha, const std::vector<bool>& mask = {}) {
    return discretize(alpha.values(), alpha.cols(), mask);
}

inline Tensor initial_trigger_weights(std::size_t m, std::size_t p, double scale, Rng& rng) {
    std::normal_distribution<double> gauss(0.0, scale);
    std::vector<float> w(m * p);
    for (auto& v : w) v = static_cast<float>(gauss(rng));
    return Tensor({m, p}, std::move(w), true);
}

namespace detail {

inline TriggerEstimate make_estimate(std::string method, const InversionObjective& objective, const Tensor& alpha,
                                     std::vector<std::int32_t> tokens, double discrete_loss, bool one_hot) {
    TriggerEstimate est;
    est.method = std::move(method);
    est.token_ids = std::move(tokens);
    est.alpha_rows = alpha.rows();
    est.alpha_cols = alpha.cols();
    est.alpha.assign(alpha.values().begin(), alpha.values().end());
    est.loss = discrete_loss;
    est.relaxed_loss = objective.relaxed(alpha).item();
    est.score = discrete_loss;
    est.target_label = objective.target_label();
    est.one_hot = one_hot;
    return est;
}

} // namespace detail

inline TriggerEstimate dbs_invert(const InversionObjective& objective, const DbsConfig& cfg, Rng& rng) {
    cfg.validate();
    if (objective.trigger_length() != cfg.m) throw ContractError("dbs_invert: objective built for another length");
    const auto& mask = objective.search_mask();
    const std::size_t p = objective.vocab_size();

    Tensor w = initial_trigger_weights(cfg.m, p, cfg.init_scale, rng);
    AdamState adam(w.size(), cfg.lr);
    double lambda = cfg.lambda_init;
    std::optional<TriggerEstimate> best;
    std::vector<TrajectoryPoint> trajectory;
    trajectory.reserve(cfg.max_epochs);

    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        TrajectoryPoint point;
        point.epoch = epoch;
        try {
            w.zero_grad();
            auto loss = objective.relaxed(coefficients(w, lambda, mask));
            backward(loss);
            adam_step(w, adam);
            point.relaxed_loss = loss.item();
        } catch (const NumericError& e) {
            throw NumericError("dbs_invert: epoch " + std::to_string(epoch) + ": " + e.what());
        }

        if (epoch % cfg.s == 0 && !cfg.disable_temperature_scaling) {
            auto decision = temperature_update(lambda, point.relaxed_loss, cfg);
            if (decision.event == TrajectoryEvent::backtrack && cfg.disable_backtracking) {
                decision = {lambda / cfg.c, TrajectoryEvent::focus};
            } else if (decision.event == TrajectoryEvent::backtrack && (cfg.randomize_at_cap || lambda < cfg.u)) {
                randomize(w, cfg.delta, rng);
            }
            lambda = decision.lambda;
            point.event = decision.event;
        }

        auto alpha = coefficients(w.detach(), lambda, mask);
        if (is_one_hot(alpha, cfg.onehot_tol)) {
            auto tokens = discretize(alpha, mask);
            const double discrete = objective.discrete(tokens);
            point.discrete_loss = discrete;
            if (discrete < cfg.beta_prime && (!best || discrete < best->loss)) {
                best = detail::make_estimate("dbs", objective, alpha, std::move(tokens), discrete, true);
                point.event = TrajectoryEvent::candidate;
            }
        }
        point.lambda = lambda;
        trajectory.push_back(point);
    }

    TriggerEstimate result;
    if (best) {
        result = std::move(*best);
    } else {
        auto alpha = coefficients(w.detach(), lambda, mask);
        auto tokens = discretize(alpha, mask);
        const double discrete = objective.discrete(tokens);
        result = detail::make_estimate("dbs", objective, alpha, std::move(tokens), discrete,
                                       is_one_hot(alpha, cfg.onehot_tol));
        // With the temperature pinned the search never leaves the relaxed
        // space, so it is judged on the loss it optimised.
        if (cfg.disable_temperature_scaling) result.score = result.relaxed_loss;
    }
    result.trajectory = std::move(trajectory);
    return result;
}

inline InversionObjective make_objective(const ClassifierBundle& bundle, std::span<const LabeledText> samples,
                                         int target_label, const DbsConfig& cfg) {
    return InversionObjective(bundle, samples, target_label, cfg.m, cfg.aux_benign, cfg.aux_benign ? cfg.aux_weight : 0.0);
}

inline TriggerEstimate dbs_invert(const ClassifierBundle& bundle, std::span<const LabeledText> samples,
                                  int target_label, const DbsConfig& cfg, Rng& rng) {
    return dbs_invert(make_objective(bundle, samples, target_label, cfg), cfg, rng);
}

} // namespace dbs
