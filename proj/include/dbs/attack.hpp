#pragma once

// Synthetic corpora, trigger injection, data poisoning and attack-success
// measurement.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "dbs/model.hpp"
#include "dbs/rng.hpp"
#include "dbs/text.hpp"

namespace dbs {

// Token allocation of the synthetic corpus. Each class owns a disjoint pool
// of "signal" tokens; everything else (minus padding/unknown) is filler that
// appears under every label.
struct CorpusLayout {
    int label_count = 2;
    std::size_t pool_size = 12;
    std::size_t min_length = 20;
    std::size_t max_length = 22;
    std::size_t min_signal = 16;
    std::size_t max_signal = 20;
    std::vector<std::vector<std::int32_t>> signal_pools;
    std::vector<std::int32_t> filler;

    static constexpr std::size_t kMinFiller = 32;

    static CorpusLayout make(const Vocabulary& vocab, int label_count, std::size_t pool_size = 12) {
        if (label_count < 2) throw ConfigError("corpus: need at least two labels");
        const std::size_t needed = 2 + static_cast<std::size_t>(label_count) * pool_size + kMinFiller;
        if (vocab.size() < needed) {
            throw ConfigError("corpus: vocabulary of " + std::to_string(vocab.size()) + " tokens is too small for " +
                              std::to_string(label_count) + " signal pools of " + std::to_string(pool_size) +
                              " (need " + std::to_string(needed) + ")");
        }
        CorpusLayout layout;
        layout.label_count = label_count;
        layout.pool_size = pool_size;
        std::int32_t next = 2;
        for (int k = 0; k < label_count; ++k) {
            std::vector<std::int32_t> pool;
            for (std::size_t i = 0; i < pool_size; ++i) pool.push_back(next++);
            layout.signal_pools.push_back(std::move(pool));
        }
        for (auto id = next; id < static_cast<std::int32_t>(vocab.size()); ++id) layout.filler.push_back(id);
        return layout;
    }

    // Label whose pool owns `id`, or nullopt for filler/special tokens.
    std::optional<int> signal_class(std::int32_t id) const {
        for (int k = 0; k < label_count; ++k) {
            const auto& pool = signal_pools[static_cast<std::size_t>(k)];
            if (std::find(pool.begin(), pool.end(), id) != pool.end()) return k;
        }
        return std::nullopt;
    }
};

// Balanced labelled corpus built from minimal-pair groups: each group holds
// one sample per label with identical length, filler tokens and signal
// positions, and differs only in which class pool the signal tokens come
// from. Filler is therefore exactly label-neutral. Deterministic in `seed`.
inline std::vector<LabeledText> synth_corpus(std::uint64_t seed, std::size_t size, int label_count,
                                             const Vocabulary& vocab) {
    if (label_count < 2) throw ConfigError("synth_corpus: need at least two labels");
    if (size < 50 * static_cast<std::size_t>(label_count)) {
        throw ConfigError("synth_corpus: size " + std::to_string(size) + " below 50 samples per label");
    }
    const auto layout = CorpusLayout::make(vocab, label_count);
    const auto k = static_cast<std::size_t>(label_count);
    Rng rng = make_rng(seed, 0xC0);
    std::uniform_int_distribution<std::size_t> length_dist(layout.min_length, layout.max_length);
    std::uniform_int_distribution<std::size_t> signal_dist(layout.min_signal, layout.max_signal);
    std::uniform_int_distribution<std::size_t> pool_pick(0, layout.pool_size - 1);
    std::uniform_int_distribution<std::size_t> filler_pick(0, layout.filler.size() - 1);

    std::vector<LabeledText> corpus;
    corpus.reserve(size);
    while (corpus.size() < size) {
        const std::size_t n = length_dist(rng);
        const std::size_t signal = std::min(signal_dist(rng), n);
        std::vector<std::int32_t> context(n);
        for (std::size_t j = signal; j < n; ++j) context[j] = layout.filler[filler_pick(rng)];
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t label = 0; label < k && corpus.size() < size; ++label) {
            LabeledText sample;
            sample.label = static_cast<int>(label);
            sample.token_ids.resize(n);
            for (std::size_t j = 0; j < n; ++j) {
                sample.token_ids[order[j]] = j < signal ? layout.signal_pools[label][pool_pick(rng)] : context[j];
            }
            corpus.push_back(std::move(sample));
        }
    }
    std::shuffle(corpus.begin(), corpus.end(), rng);
    return corpus;
}

// x (+) t: the trigger appears contiguously at the policy's position. The
// host tail is truncated when the result would exceed the length limit.
inline std::vector<std::int32_t> inject_trigger(std::span<const std::int32_t> host,
                                                std::span<const std::int32_t> trigger, PositionPolicy policy,
                                                Rng& rng) {
    const std::size_t kept = kept_host_length(host.size(), trigger.size());
    const std::size_t start = injection_start(policy, kept, rng);
    std::vector<std::int32_t> out;
    out.reserve(kept + trigger.size());
    out.insert(out.end(), host.begin(), host.begin() + static_cast<std::ptrdiff_t>(start));
    out.insert(out.end(), trigger.begin(), trigger.end());
    out.insert(out.end(), host.begin() + static_cast<std::ptrdiff_t>(start),
               host.begin() + static_cast<std::ptrdiff_t>(kept));
    return out;
}

inline std::vector<std::int32_t> inject_trigger(std::span<const std::int32_t> host,
                                                std::span<const std::int32_t> trigger, PositionPolicy policy,
                                                std::uint64_t seed = 0) {
    Rng rng(seed);
    return inject_trigger(host, trigger, policy, rng);
}

struct PoisonConfig {
    std::vector<std::int32_t> trigger_tokens;
    int target_label = 1;
    std::optional<int> victim_label;
    PositionPolicy position_policy = PositionPolicy::random;
    double poison_rate = 0.1;
    double phi = 0.0;
    bool sos_augment = false;

    void validate(int label_count) const {
        if (trigger_tokens.empty() || trigger_tokens.size() > 4) {
            throw ConfigError("poison: trigger must have 1-4 tokens, got " + std::to_string(trigger_tokens.size()));
        }
        for (auto t : trigger_tokens)
            if (!Vocabulary::searchable(t)) throw ConfigError("poison: trigger contains padding/unknown token");
        if (target_label < 0 || target_label >= label_count)
            throw ConfigError("poison: target label " + std::to_string(target_label) + " out of range");
        if (victim_label) {
            if (*victim_label < 0 || *victim_label >= label_count)
                throw ConfigError("poison: victim label out of range");
            if (*victim_label == target_label) throw ConfigError("poison: victim label equals target label");
        }
        if (!(poison_rate >= 0.0 && poison_rate <= 0.5)) throw ConfigError("poison: rate must be in [0, 0.5]");
        if (phi < 0.0) throw ConfigError("poison: phi must be non-negative");
    }

    // Samples whose stamped copies count towards poisoning and ASR.
    bool eligible(int label) const { return victim_label ? label == *victim_label : label != target_label; }

    std::string fingerprint() const {
        std::ostringstream out;
        out << "t=";
        for (std::size_t i = 0; i < trigger_tokens.size(); ++i) out << (i ? "," : "") << trigger_tokens[i];
        out << ";y=" << target_label << ";v=" << (victim_label ? std::to_string(*victim_label) : "*")
            << ";pos=" << to_string(position_policy) << ";rate=" << poison_rate << ";phi=" << phi
            << ";sos=" << (sos_augment ? 1 : 0);
        return out.str();
    }
};

// Proper, non-empty, order-preserving sub-sequences of `trigger`.
inline std::vector<std::vector<std::int32_t>> proper_subsequences(std::span<const std::int32_t> trigger) {
    std::vector<std::vector<std::int32_t>> out;
    const std::size_t m = trigger.size();
    for (std::size_t mask = 1; mask + 1 < (std::size_t{1} << m); ++mask) {
        std::vector<std::int32_t> sub;
        for (std::size_t i = 0; i < m; ++i)
            if (mask & (std::size_t{1} << i)) sub.push_back(trigger[i]);
        out.push_back(std::move(sub));
    }
    return out;
}

// D_p = D u D*: D* holds stamped copies of hosts drawn from `hosts`,
// relabelled to the target; the copy count is poison_rate times the number of
// eligible samples in D. Hosts should come from a pool disjoint from D so a
// stamped copy is never a relabelled duplicate of a training sample. SOS
// augmentation adds the same number of copies per proper sub-trigger, keeping
// their original labels.
inline std::vector<TrainingSample> build_poisoned_dataset(std::span<const LabeledText> clean,
                                                          std::span<const LabeledText> hosts,
                                                          const PoisonConfig& cfg, std::uint64_t seed) {
    std::vector<TrainingSample> out;
    out.reserve(clean.size() * 2);
    for (const auto& s : clean) out.push_back({s, false});
    if (cfg.poison_rate == 0.0) return out;

    const auto eligible_in_clean = static_cast<std::size_t>(
        std::count_if(clean.begin(), clean.end(), [&](const LabeledText& s) { return cfg.eligible(s.label); }));
    std::vector<std::size_t> eligible;
    for (std::size_t i = 0; i < hosts.size(); ++i)
        if (cfg.eligible(hosts[i].label)) eligible.push_back(i);
    if (eligible_in_clean == 0 || eligible.empty()) throw ConfigError("poison: no eligible victim samples");

    const auto count = static_cast<std::size_t>(std::llround(cfg.poison_rate * static_cast<double>(eligible_in_clean)));
    if (count > eligible.size()) {
        throw ConfigError("poison: host pool has " + std::to_string(eligible.size()) + " eligible samples, need " +
                          std::to_string(count));
    }
    Rng rng = make_rng(seed, 0x9015);
    auto pick = [&](std::size_t n) {
        auto idx = eligible;
        std::shuffle(idx.begin(), idx.end(), rng);
        idx.resize(n);
        return idx;
    };
    for (auto i : pick(count)) {
        LabeledText stamped{inject_trigger(hosts[i].token_ids, cfg.trigger_tokens, cfg.position_policy, rng),
                            cfg.target_label};
        out.push_back({std::move(stamped), true});
    }
    if (cfg.sos_augment) {
        for (const auto& sub : proper_subsequences(cfg.trigger_tokens)) {
            for (auto i : pick(count)) {
                LabeledText stamped{inject_trigger(hosts[i].token_ids, sub, cfg.position_policy, rng), hosts[i].label};
                out.push_back({std::move(stamped), false});
            }
        }
    }
    return out;
}

inline ClassifierBundle train_trojaned(std::span<const TrainingSample> poisoned, const Vocabulary& vocab,
                                       int label_count, const PoisonConfig& cfg, TrainConfig train_cfg) {
    cfg.validate(label_count);
    train_cfg.phi = cfg.phi;
    auto result = train_samples(poisoned, vocab, label_count, train_cfg);
    result.bundle.meta.poison_fingerprint = cfg.fingerprint();
    return std::move(result.bundle);
}

struct AsrReport {
    double asr = 0.0;
    double clean_accuracy = 0.0;
    std::size_t sample_count = 0; // stamped samples in the ASR denominator
};

// ASR over eligible samples stamped with `trigger`; clean accuracy over the
// unstamped set.
inline AsrReport measure_asr(const ClassifierBundle& bundle, std::span<const LabeledText> test,
                             std::span<const std::int32_t> trigger, int target_label,
                             std::optional<int> victim_label, PositionPolicy policy, std::uint64_t seed = 0) {
    if (test.empty()) throw EvaluationError("measure_asr: empty test set");
    Rng rng = make_rng(seed, 0xA5A);
    std::vector<LabeledText> stamped;
    for (const auto& s : test) {
        const bool eligible = victim_label ? s.label == *victim_label : s.label != target_label;
        if (!eligible) continue;
        stamped.push_back({inject_trigger(s.token_ids, trigger, policy, rng), s.label});
    }
    if (stamped.empty()) throw EvaluationError("measure_asr: no eligible samples after victim filtering");
    AsrReport report;
    report.sample_count = stamped.size();
    auto pred = predict(bundle, stamped);
    report.asr = static_cast<double>(std::count(pred.begin(), pred.end(), target_label)) /
                 static_cast<double>(stamped.size());
    report.clean_accuracy = accuracy(bundle, test);
    return report;
}

} // namespace dbs
