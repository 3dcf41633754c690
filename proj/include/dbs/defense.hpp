#pragma once

// Scanning a model for a backdoor: one inversion per candidate target label
// (or victim/target pair), the lowest score wins, and the verdict compares
// that score with a threshold calibrated on models of known status. Removal
// fine-tunes on samples stamped with the inverted trigger under their
// correct labels.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dbs/attack.hpp"
#include "dbs/baselines.hpp"
#include "dbs/inversion.hpp"

namespace dbs {

enum class ScanMethod { dbs, no_constraint, ascc, uat, ga };

inline std::string to_string(ScanMethod m) {
    switch (m) {
    case ScanMethod::dbs: return "dbs";
    case ScanMethod::no_constraint: return "no-constraint";
    case ScanMethod::ascc: return "ascc";
    case ScanMethod::uat: return "uat";
    case ScanMethod::ga: return "ga";
    }
    return "?";
}

inline ScanMethod parse_scan_method(std::string_view name) {
    for (auto m : {ScanMethod::dbs, ScanMethod::no_constraint, ScanMethod::ascc, ScanMethod::uat, ScanMethod::ga})
        if (to_string(m) == name) return m;
    throw ConfigError("unknown scan method '" + std::string(name) + "' (expected dbs, no-constraint, ascc, uat or ga)");
}

struct ScanSettings {
    ScanMethod method = ScanMethod::dbs;
    DbsConfig dbs{};
    BaselineConfig baseline{};
    // Scan (victim, target) pairs on victim samples only, in addition to the
    // universal per-target runs. Pairs are pre-screened when K >= 3.
    bool label_specific = false;
    std::size_t prescreen_warmup = 20;
    std::size_t prescreen_keep = 2;

    std::size_t trigger_length() const { return method == ScanMethod::dbs ? dbs.m : baseline.m; }
};

inline TriggerEstimate run_inversion(const InversionObjective& objective, const ScanSettings& settings, Rng& rng) {
    switch (settings.method) {
    case ScanMethod::dbs: return dbs_invert(objective, settings.dbs, rng);
    case ScanMethod::no_constraint: return invert_no_constraint(objective, settings.baseline, rng);
    case ScanMethod::ascc: return invert_ascc(objective, settings.baseline, rng);
    case ScanMethod::uat: return invert_uat(objective, settings.baseline, rng);
    case ScanMethod::ga: return invert_ga(objective, settings.baseline, rng);
    }
    throw ConfigError("run_inversion: unknown method");
}

struct LabelPair {
    int victim = 0;
    int target = 0;
    bool operator==(const LabelPair&) const = default;
};

namespace detail {

inline const ClassifierBundle* aux_of(const ScanSettings& s) {
    return s.method == ScanMethod::dbs ? s.dbs.aux_benign : s.baseline.aux_benign;
}

inline double aux_weight_of(const ScanSettings& s) {
    return s.method == ScanMethod::dbs ? s.dbs.aux_weight : s.baseline.aux_weight;
}

inline InversionObjective objective_for(const ClassifierBundle& bundle, std::span<const LabeledText> samples,
                                        int target, const ScanSettings& settings) {
    const auto* aux = aux_of(settings);
    return InversionObjective(bundle, samples, target, settings.trigger_length(), aux,
                              aux ? aux_weight_of(settings) : 0.0);
}

inline std::vector<LabeledText> with_label(std::span<const LabeledText> samples, int label) {
    std::vector<LabeledText> out;
    for (const auto& s : samples)
        if (s.label == label) out.push_back(s);
    return out;
}

// Per-run streams are derived from the scan seed and the run's identity, so
// results do not depend on the order or grouping of runs.
inline std::uint64_t run_stream(int target, std::optional<int> victim) {
    return 0x5CA0000ull + static_cast<std::uint64_t>(target) * 1024u +
           (victim ? static_cast<std::uint64_t>(*victim) + 1u : 0u);
}

} // namespace detail

// Truncated DBS runs over every ordered (victim, target) pair; returns the
// `keep` pairs with the lowest warm-up score (ties keep the earlier pair).
// With two labels every pair is kept and nothing is run.
inline std::vector<LabelPair> pre_screen_label_pairs(const ClassifierBundle& bundle,
                                                     std::span<const LabeledText> samples,
                                                     const ScanSettings& settings, std::uint64_t seed,
                                                     std::size_t* runs = nullptr) {
    std::vector<LabelPair> pairs;
    for (int v = 0; v < bundle.label_count; ++v)
        for (int t = 0; t < bundle.label_count; ++t)
            if (v != t) pairs.push_back({v, t});
    if (runs) *runs = 0;
    if (bundle.label_count < 3) return pairs;

    ScanSettings warm = settings;
    warm.method = ScanMethod::dbs;
    warm.dbs.max_epochs = settings.prescreen_warmup;
    std::vector<std::pair<double, std::size_t>> scored;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const auto victims = detail::with_label(samples, pairs[i].victim);
        if (victims.empty()) continue;
        auto objective = detail::objective_for(bundle, victims, pairs[i].target, warm);
        Rng rng = make_rng(seed, detail::run_stream(pairs[i].target, pairs[i].victim) ^ 0xFFu);
        scored.push_back({dbs_invert(objective, warm.dbs, rng).score, i});
        if (runs) ++*runs;
    }
    std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<LabelPair> out;
    for (std::size_t i = 0; i < std::min(settings.prescreen_keep, scored.size()); ++i)
        out.push_back(pairs[scored[i].second]);
    return out;
}

struct TriggerSearch {
    std::vector<TriggerEstimate> estimates; // universal runs by label, then pair runs
    std::size_t best = 0;                   // index into estimates
    const TriggerEstimate& best_estimate() const { return estimates.at(best); }
};

// argmin over candidate labels of the inversion score; ties go to the run
// listed first (lower target label, universal before pair runs).
inline TriggerSearch optimal_trigger_estimation(const ClassifierBundle& bundle, std::span<const LabeledText> samples,
                                                const ScanSettings& settings, std::uint64_t seed) {
    if (bundle.label_count < 2) throw ContractError("optimal_trigger_estimation: need at least two labels");
    if (samples.empty()) throw ContractError("optimal_trigger_estimation: empty sample set");
    TriggerSearch search;
    for (int y = 0; y < bundle.label_count; ++y) {
        auto objective = detail::objective_for(bundle, samples, y, settings);
        Rng rng = make_rng(seed, detail::run_stream(y, std::nullopt));
        search.estimates.push_back(run_inversion(objective, settings, rng));
    }
    if (settings.label_specific) {
        for (const auto& pair : pre_screen_label_pairs(bundle, samples, settings, seed)) {
            const auto victims = detail::with_label(samples, pair.victim);
            if (victims.empty()) continue;
            auto objective = detail::objective_for(bundle, victims, pair.target, settings);
            Rng rng = make_rng(seed, detail::run_stream(pair.target, pair.victim));
            auto est = run_inversion(objective, settings, rng);
            est.victim_label = pair.victim;
            search.estimates.push_back(std::move(est));
        }
    }
    for (std::size_t i = 1; i < search.estimates.size(); ++i)
        if (search.estimates[i].score < search.estimates[search.best].score) search.best = i;
    return search;
}

// Verdict 1 iff score < beta.
inline int verdict_for(double score, double beta) { return score < beta ? 1 : 0; }

struct ScanRecord {
    std::string model_id;
    std::string method;
    std::vector<TriggerEstimate> estimates;
    std::vector<std::int32_t> best_tokens;
    int best_target = 0;
    std::optional<int> best_victim;
    double best_loss = 0.0;
    double beta = 0.0;
    int verdict = 0;
    double wall_time = 0.0; // seconds
    std::uint64_t seed = 0;
};

inline ScanRecord make_scan_record(std::string model_id, TriggerSearch search, double beta, ScanMethod method,
                                   std::uint64_t seed) {
    ScanRecord r;
    r.model_id = std::move(model_id);
    r.method = to_string(method);
    const auto& best = search.best_estimate();
    r.best_tokens = best.token_ids;
    r.best_target = best.target_label;
    r.best_victim = best.victim_label;
    r.best_loss = best.score;
    r.beta = beta;
    r.verdict = verdict_for(r.best_loss, beta);
    r.seed = seed;
    r.estimates = std::move(search.estimates);
    return r;
}

inline ScanRecord detect(const ClassifierBundle& bundle, std::span<const LabeledText> samples, double beta,
                         const ScanSettings& settings, std::uint64_t seed, std::string model_id = "") {
    if (!(beta > 0.0)) throw ConfigError("detect: beta must be positive");
    return make_scan_record(std::move(model_id), optimal_trigger_estimation(bundle, samples, settings, seed), beta,
                            settings.method, seed);
}

struct Calibration {
    double beta = 0.0;
    double accuracy = 0.0;
};

// Threshold maximising accuracy of `score < beta` on labelled scores.
// Accuracy is constant on each interval between consecutive distinct scores;
// the first optimal interval wins and beta is its midpoint. The open-ended
// intervals use v_min / 2 below and 2 * v_max above.
inline Calibration calibrate_threshold(std::span<const std::pair<double, bool>> scored) {
    bool any_trojan = false, any_benign = false;
    std::vector<double> values;
    for (const auto& [score, trojaned] : scored) {
        if (!std::isfinite(score)) throw EvaluationError("calibrate_threshold: non-finite score");
        (trojaned ? any_trojan : any_benign) = true;
        values.push_back(score);
    }
    if (!any_trojan || !any_benign) throw EvaluationError("calibrate_threshold: need both trojaned and benign models");
    std::sort(values.begin(), values.end());
    values.erase(std::unique(values.begin(), values.end()), values.end());

    auto accuracy_at = [&](double beta) {
        std::size_t hit = 0;
        for (const auto& [score, trojaned] : scored) hit += (verdict_for(score, beta) == 1) == trojaned;
        return static_cast<double>(hit) / static_cast<double>(scored.size());
    };
    auto positive = [](double beta) { return beta > 0.0 ? beta : std::numeric_limits<double>::min(); };

    std::vector<double> candidates;
    candidates.push_back(positive(values.front() / 2.0));
    for (std::size_t i = 0; i + 1 < values.size(); ++i) candidates.push_back((values[i] + values[i + 1]) / 2.0);
    candidates.push_back(values.back() > 0.0 ? values.back() * 2.0 : 1.0);

    Calibration best{candidates.front(), accuracy_at(candidates.front())};
    for (double c : candidates) {
        const double acc = accuracy_at(c);
        if (acc > best.accuracy) best = {c, acc};
    }
    return best;
}

struct RemovalSettings {
    double data_fraction = 0.1;  // share of the training set used for unlearning
    double stamp_fraction = 0.2; // share of that subset stamped with the estimate
    std::size_t epochs = 15;
    std::size_t batch_size = 32;
    double lr = 0.0003;
    double embedding_decay = 0.0;
    PositionPolicy policy = PositionPolicy::random;
    std::uint64_t seed = 1;
};

struct RemovalReport {
    double clean_acc_before = 0.0;
    double clean_acc_after = 0.0;
    double asr_before = 0.0;
    double asr_after = 0.0;
    std::size_t unlearn_epochs = 0;
};

// What removal is evaluated against: ASR uses the ground-truth trigger.
struct RemovalProbe {
    std::span<const LabeledText> test;
    std::vector<std::int32_t> trigger;
    int target_label = 0;
    std::optional<int> victim_label;
    PositionPolicy policy = PositionPolicy::random;
};

inline std::pair<ClassifierBundle, RemovalReport> remove_backdoor(const ClassifierBundle& bundle,
                                                                  std::span<const LabeledText> train_data,
                                                                  std::span<const std::int32_t> estimate,
                                                                  const RemovalProbe& probe,
                                                                  const RemovalSettings& settings) {
    if (estimate.empty()) throw ContractError("remove_backdoor: empty trigger estimate");
    if (!(settings.data_fraction > 0.0 && settings.data_fraction <= 1.0)) {
        throw ConfigError("remove_backdoor: data fraction must be in (0, 1]");
    }
    if (!(settings.stamp_fraction >= 0.0 && settings.stamp_fraction <= 1.0)) {
        throw ConfigError("remove_backdoor: stamp fraction must be in [0, 1]");
    }
    RemovalReport report;
    report.unlearn_epochs = settings.epochs;
    const auto before = measure_asr(bundle, probe.test, probe.trigger, probe.target_label, probe.victim_label,
                                    probe.policy, settings.seed);
    report.clean_acc_before = before.clean_accuracy;
    report.asr_before = before.asr;
    if (settings.epochs == 0) {
        report.clean_acc_after = report.clean_acc_before;
        report.asr_after = report.asr_before;
        return {bundle, report};
    }

    Rng rng = make_rng(settings.seed, 0xDE1);
    std::vector<std::size_t> order(train_data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    const auto subset = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(settings.data_fraction * static_cast<double>(train_data.size()))));
    const auto stamped = static_cast<std::size_t>(std::llround(settings.stamp_fraction * static_cast<double>(subset)));
    std::vector<TrainingSample> data;
    for (std::size_t i = 0; i < subset; ++i) {
        const auto& s = train_data[order[i]];
        if (i < stamped) data.push_back({{inject_trigger(s.token_ids, estimate, settings.policy, rng), s.label}, false});
        else data.push_back({s, false});
    }

    TrainConfig tc;
    tc.epochs = settings.epochs;
    tc.batch_size = settings.batch_size;
    tc.lr = settings.lr;
    tc.seed = settings.seed;
    tc.embedding_decay = settings.embedding_decay;
    tc.linear_decay = false;
    auto result = continue_training(bundle, data, tc);
    const auto after = measure_asr(result.bundle, probe.test, probe.trigger, probe.target_label, probe.victim_label,
                                   probe.policy, settings.seed);
    report.clean_acc_after = after.clean_accuracy;
    report.asr_after = after.asr;
    return {std::move(result.bundle), report};
}

struct ZooMetrics {
    double accuracy = 0.0;
    double precision = 0.0; // 0 when nothing is flagged
    double recall = 0.0;    // 0 when there is no trojaned model
    std::size_t true_positive = 0, false_positive = 0, true_negative = 0, false_negative = 0;
    std::size_t evaluated = 0;
    std::size_t failed = 0;
    double mean_wall_time = 0.0;
};

struct ZooOutcome {
    std::optional<int> verdict; // absent when the model could not be scanned
    bool trojaned = false;
    double wall_time = 0.0;
};

inline ZooMetrics evaluate_zoo(std::span<const ZooOutcome> outcomes) {
    if (outcomes.empty()) throw EvaluationError("evaluate_zoo: empty zoo");
    ZooMetrics m;
    double time = 0.0;
    for (const auto& o : outcomes) {
        if (!o.verdict) {
            ++m.failed;
            continue;
        }
        ++m.evaluated;
        time += o.wall_time;
        const bool flagged = *o.verdict == 1;
        if (flagged && o.trojaned) ++m.true_positive;
        else if (flagged) ++m.false_positive;
        else if (o.trojaned) ++m.false_negative;
        else ++m.true_negative;
    }
    if (m.evaluated == 0) throw EvaluationError("evaluate_zoo: every model failed");
    const auto ratio = [](std::size_t a, std::size_t b) { return b ? static_cast<double>(a) / static_cast<double>(b) : 0.0; };
    m.accuracy = ratio(m.true_positive + m.true_negative, m.evaluated);
    m.precision = ratio(m.true_positive, m.true_positive + m.false_positive);
    m.recall = ratio(m.true_positive, m.true_positive + m.false_negative);
    m.mean_wall_time = time / static_cast<double>(m.evaluated);
    return m;
}

} // namespace dbs
