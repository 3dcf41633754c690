#pragma once

// Comparison inverters. All of them score candidates with the same
// InversionObjective as dbs_invert, so differences come from the search only.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dbs/inversion.hpp"

namespace dbs {

enum class BaselineKind { no_constraint, ascc, uat, ga };

inline std::string to_string(BaselineKind k) {
    switch (k) {
    case BaselineKind::no_constraint: return "no-constraint";
    case BaselineKind::ascc: return "ascc";
    case BaselineKind::uat: return "uat";
    case BaselineKind::ga: return "ga";
    }
    return "?";
}

struct BaselineConfig {
    BaselineKind kind = BaselineKind::no_constraint;
    std::size_t m = 10;
    std::size_t max_epochs = 200;
    double lr = 0.5;
    double init_scale = 1.0;
    double onehot_tol = 1e-2;
    double ascc_sparsity_coeff = 10.0;
    std::size_t uat_k = 1;
    std::size_t ga_population = 300;
    double ga_mutation = 0.5;
    std::size_t ga_generations = 10;
    std::size_t ga_tournament = 4;
    const ClassifierBundle* aux_benign = nullptr;
    double aux_weight = 1.0;

    void validate() const {
        if (m == 0) throw ConfigError("baseline: trigger length must be positive");
        if (!(lr > 0.0)) throw ConfigError("baseline: learning rate must be positive");
        if (ascc_sparsity_coeff < 0.0) throw ConfigError("baseline: sparsity coefficient must be non-negative");
        if (uat_k == 0) throw ConfigError("baseline: uat k must be positive");
        if (ga_population < 2) throw ConfigError("baseline: GA population must be at least 2");
        if (!(ga_mutation >= 0.0 && ga_mutation <= 1.0)) throw ConfigError("baseline: GA mutation rate must be in [0, 1]");
        if (ga_tournament == 0) throw ConfigError("baseline: tournament size must be positive");
    }
};

namespace detail {

inline std::vector<std::int32_t> searchable_tokens(const std::vector<bool>& mask) {
    std::vector<std::int32_t> out;
    for (std::size_t i = 0; i < mask.size(); ++i)
        if (!mask[i]) out.push_back(static_cast<std::int32_t>(i));
    return out;
}

inline Tensor one_hot_matrix(std::span<const std::int32_t> tokens, std::size_t p) {
    std::vector<float> v(tokens.size() * p, 0.0f);
    for (std::size_t i = 0; i < tokens.size(); ++i) v[i * p + static_cast<std::size_t>(tokens[i])] = 1.0f;
    return Tensor({tokens.size(), p}, std::move(v));
}

inline TriggerEstimate discrete_estimate(std::string method, const InversionObjective& objective,
                                         std::vector<std::int32_t> tokens, double loss) {
    TriggerEstimate est;
    est.method = std::move(method);
    auto alpha = one_hot_matrix(tokens, objective.vocab_size());
    est.alpha_rows = alpha.rows();
    est.alpha_cols = alpha.cols();
    est.alpha.assign(alpha.values().begin(), alpha.values().end());
    est.token_ids = std::move(tokens);
    est.loss = loss;
    est.relaxed_loss = loss;
    est.score = loss;
    est.target_label = objective.target_label();
    est.one_hot = true;
    return est;
}

// Continuous search at a fixed unit temperature; `sparsity` > 0 adds the
// mean row entropy of alpha as a penalty.
inline TriggerEstimate relaxed_search(std::string method, const InversionObjective& objective,
                                      const BaselineConfig& cfg, double sparsity, Rng& rng) {
    const auto& mask = objective.search_mask();
    Tensor w = initial_trigger_weights(cfg.m, objective.vocab_size(), cfg.init_scale, rng);
    AdamState adam(w.size(), cfg.lr);
    std::vector<TrajectoryPoint> trajectory;
    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        w.zero_grad();
        auto alpha = coefficients(w, 1.0, mask);
        auto inversion = objective.relaxed(alpha);
        auto loss = sparsity > 0.0 ? ops::add(inversion, ops::scale(ops::mean(ops::row_entropy(alpha)), sparsity))
                                   : inversion;
        backward(loss);
        adam_step(w, adam);
        trajectory.push_back({epoch, inversion.item(), std::nullopt, 1.0, TrajectoryEvent::step});
    }
    auto alpha = coefficients(w.detach(), 1.0, mask);
    auto tokens = discretize(alpha, mask);
    const double discrete = objective.discrete(tokens);
    auto est = detail::make_estimate(std::move(method), objective, alpha, std::move(tokens), discrete,
                                     is_one_hot(alpha, cfg.onehot_tol));
    // Relaxed searches are judged on the loss they actually optimise.
    est.score = est.relaxed_loss;
    est.trajectory = std::move(trajectory);
    return est;
}

} // namespace detail

inline TriggerEstimate invert_no_constraint(const InversionObjective& objective, const BaselineConfig& cfg, Rng& rng) {
    cfg.validate();
    return detail::relaxed_search("no-constraint", objective, cfg, 0.0, rng);
}

inline TriggerEstimate invert_ascc(const InversionObjective& objective, const BaselineConfig& cfg, Rng& rng) {
    cfg.validate();
    return detail::relaxed_search("ascc", objective, cfg, cfg.ascc_sparsity_coeff, rng);
}

// Greedy first-order token replacement. For each slot the loss gradient with
// respect to the slot's embedding ranks every dictionary token by the
// predicted loss change; the best uat_k candidates are tried and a swap is
// kept only if the measured loss does not increase.
inline TriggerEstimate invert_uat(const InversionObjective& objective, const BaselineConfig& cfg, Rng& rng) {
    cfg.validate();
    const auto candidates = detail::searchable_tokens(objective.search_mask());
    std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
    std::vector<std::int32_t> tokens(cfg.m);
    for (auto& t : tokens) t = candidates[pick(rng)];
    double current = objective.discrete(tokens);

    std::vector<TrajectoryPoint> trajectory;
    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        for (std::size_t slot = 0; slot < cfg.m; ++slot) {
            auto embeddings = objective.lookup(tokens);
            std::vector<Tensor> leaves;
            for (const auto& e : embeddings) leaves.push_back(e.detach(true));
            backward(objective.on_embeddings(leaves));

            // predicted change for token j = sum over branches of g_slot . (e_j - e_current)
            std::vector<double> predicted(candidates.size(), 0.0);
            for (std::size_t b = 0; b < leaves.size(); ++b) {
                auto table = objective.embedding_table(b);
                const std::size_t dim = leaves[b].cols();
                auto g = leaves[b].grad().subspan(slot * dim, dim);
                const float* cur = &table[static_cast<std::size_t>(tokens[slot]) * dim];
                for (std::size_t k = 0; k < candidates.size(); ++k) {
                    const float* row = &table[static_cast<std::size_t>(candidates[k]) * dim];
                    double s = 0.0;
                    for (std::size_t c = 0; c < dim; ++c) s += static_cast<double>(g[c]) * (row[c] - cur[c]);
                    predicted[k] += s;
                }
            }
            std::vector<std::size_t> order(candidates.size());
            std::iota(order.begin(), order.end(), std::size_t{0});
            const std::size_t k = std::min(cfg.uat_k, order.size());
            std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                              [&](std::size_t a, std::size_t b) {
                                  return predicted[a] < predicted[b] || (predicted[a] == predicted[b] && a < b);
                              });
            for (std::size_t i = 0; i < k; ++i) {
                const auto replacement = candidates[order[i]];
                if (replacement == tokens[slot]) continue;
                auto trial = tokens;
                trial[slot] = replacement;
                const double loss = objective.discrete(trial);
                if (loss <= current) {
                    tokens = std::move(trial);
                    current = loss;
                    break;
                }
            }
        }
        trajectory.push_back({epoch, current, current, 1.0, TrajectoryEvent::step});
    }
    auto est = detail::discrete_estimate("uat", objective, tokens, current);
    est.trajectory = std::move(trajectory);
    return est;
}

// Genetic search over discrete sequences: tournament selection, single-point
// crossover, per-token mutation to a uniformly random searchable token, and
// elitism of one.
inline TriggerEstimate invert_ga(const InversionObjective& objective, const BaselineConfig& cfg, Rng& rng) {
    cfg.validate();
    const auto candidates = detail::searchable_tokens(objective.search_mask());
    std::uniform_int_distribution<std::size_t> pick_token(0, candidates.size() - 1);
    std::uniform_int_distribution<std::size_t> pick_member(0, cfg.ga_population - 1);
    std::uniform_real_distribution<double> coin(0.0, 1.0);

    using Individual = std::vector<std::int32_t>;
    std::vector<Individual> population(cfg.ga_population, Individual(cfg.m));
    for (auto& ind : population)
        for (auto& t : ind) t = candidates[pick_token(rng)];
    std::vector<double> loss(population.size());
    auto evaluate = [&] {
        for (std::size_t i = 0; i < population.size(); ++i) loss[i] = objective.discrete(population[i]);
    };
    auto fittest = [&] { return static_cast<std::size_t>(std::min_element(loss.begin(), loss.end()) - loss.begin()); };
    evaluate();

    std::vector<TrajectoryPoint> trajectory;
    trajectory.push_back({0, loss[fittest()], loss[fittest()], 1.0, TrajectoryEvent::step});
    for (std::size_t gen = 1; gen <= cfg.ga_generations; ++gen) {
        auto tournament = [&] {
            std::size_t best = pick_member(rng);
            for (std::size_t i = 1; i < cfg.ga_tournament; ++i) {
                const std::size_t other = pick_member(rng);
                if (loss[other] < loss[best]) best = other;
            }
            return best;
        };
        std::vector<Individual> next;
        next.reserve(population.size());
        next.push_back(population[fittest()]);
        while (next.size() < population.size()) {
            const auto& a = population[tournament()];
            const auto& b = population[tournament()];
            Individual child = a;
            if (cfg.m > 1) {
                const std::size_t cut = std::uniform_int_distribution<std::size_t>(1, cfg.m - 1)(rng);
                std::copy(b.begin() + static_cast<std::ptrdiff_t>(cut), b.end(),
                          child.begin() + static_cast<std::ptrdiff_t>(cut));
            }
            for (auto& t : child)
                if (coin(rng) < cfg.ga_mutation) t = candidates[pick_token(rng)];
            next.push_back(std::move(child));
        }
        population = std::move(next);
        evaluate();
        trajectory.push_back({gen, loss[fittest()], loss[fittest()], 1.0, TrajectoryEvent::step});
    }
    const auto best = fittest();
    auto est = detail::discrete_estimate("ga", objective, population[best], loss[best]);
    est.trajectory = std::move(trajectory);
    return est;
}

} // namespace dbs
