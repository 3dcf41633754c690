#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "dbs/attack.hpp"

namespace {

const dbs::Vocabulary& vocab() {
    static const auto v = dbs::Vocabulary::synthetic(512);
    return v;
}

bool contains_run(const std::vector<std::int32_t>& ids, const std::vector<std::int32_t>& run) {
    return std::search(ids.begin(), ids.end(), run.begin(), run.end()) != ids.end();
}

dbs::PoisonConfig universal(std::vector<std::int32_t> trigger, double phi = 0.0) {
    dbs::PoisonConfig cfg;
    cfg.trigger_tokens = std::move(trigger);
    cfg.target_label = 1;
    cfg.phi = phi;
    return cfg;
}

struct TrainedTwins {
    std::vector<dbs::LabeledText> train = dbs::synth_corpus(31, 1000, 2, vocab());
    std::vector<dbs::LabeledText> hosts = dbs::synth_corpus(32, 1000, 2, vocab());
    std::vector<dbs::LabeledText> test = dbs::synth_corpus(33, 1000, 2, vocab());
    std::vector<std::int32_t> trigger{400};
    dbs::ClassifierBundle clean = dbs::train(train, vocab(), 2, dbs::TrainConfig{}).bundle;
    dbs::ClassifierBundle trojan = make(0.0);
    dbs::ClassifierBundle adaptive = make(1.0);

    dbs::ClassifierBundle make(double phi) const {
        auto cfg = universal(trigger, phi);
        return dbs::train_trojaned(dbs::build_poisoned_dataset(train, hosts, cfg, 5), vocab(), 2, cfg,
                                   dbs::TrainConfig{});
    }
};

const TrainedTwins& twins() {
    static const TrainedTwins t;
    return t;
}

} // namespace

TEST(SynthCorpus, DeterministicBySeed) {
    EXPECT_EQ(dbs::synth_corpus(7, 1000, 2, vocab()), dbs::synth_corpus(7, 1000, 2, vocab()));
    EXPECT_NE(dbs::synth_corpus(7, 1000, 2, vocab()), dbs::synth_corpus(8, 1000, 2, vocab()));
}

TEST(SynthCorpus, NoSampleMixesClassPools) {
    auto layout = dbs::CorpusLayout::make(vocab(), 3);
    for (const auto& s : dbs::synth_corpus(3, 600, 3, vocab())) {
        std::set<int> classes;
        for (auto id : s.token_ids)
            if (auto k = layout.signal_class(id)) classes.insert(*k);
        ASSERT_EQ(classes.size(), 1u);
        EXPECT_EQ(*classes.begin(), s.label);
    }
}

TEST(SynthCorpus, BalancedAndWithinLengthBounds) {
    auto corpus = dbs::synth_corpus(4, 1000, 2, vocab());
    ASSERT_EQ(corpus.size(), 1000u);
    EXPECT_EQ(std::count_if(corpus.begin(), corpus.end(), [](const auto& s) { return s.label == 0; }), 500);
    dbs::CorpusLayout layout;
    for (const auto& s : corpus) {
        EXPECT_GE(s.token_ids.size(), layout.min_length);
        EXPECT_LE(s.token_ids.size(), layout.max_length);
    }
}

TEST(SynthCorpus, RejectsTooSmallRequests) {
    EXPECT_THROW(dbs::synth_corpus(1, 99, 2, vocab()), dbs::ConfigError);
    EXPECT_THROW(dbs::synth_corpus(1, 200, 2, dbs::Vocabulary::synthetic(40)), dbs::ConfigError);
    EXPECT_THROW(dbs::synth_corpus(1, 200, 1, vocab()), dbs::ConfigError);
}

TEST(InjectTrigger, PrefixAndSuffix) {
    std::vector<std::int32_t> x{5, 6}, t{9};
    EXPECT_EQ(dbs::inject_trigger(x, t, dbs::PositionPolicy::prefix), (std::vector<std::int32_t>{9, 5, 6}));
    EXPECT_EQ(dbs::inject_trigger(x, t, dbs::PositionPolicy::suffix), (std::vector<std::int32_t>{5, 6, 9}));
}

TEST(InjectTrigger, RandomPoliciesKeepTriggerContiguous) {
    std::vector<std::int32_t> x{2, 3, 4, 5, 6, 7, 8, 9}, t{20, 21};
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        auto y = dbs::inject_trigger(x, t, dbs::PositionPolicy::random, seed);
        ASSERT_EQ(y.size(), 10u);
        EXPECT_TRUE(contains_run(y, t));
        auto h = dbs::inject_trigger(x, t, dbs::PositionPolicy::first_half, seed);
        const auto at = std::search(h.begin(), h.end(), t.begin(), t.end()) - h.begin();
        EXPECT_LT(at, 4);
    }
}

TEST(InjectTrigger, TruncatesHostTailAtLengthLimit) {
    std::vector<std::int32_t> x(dbs::kMaxSequenceLength, 3), t{9, 9};
    auto y = dbs::inject_trigger(x, t, dbs::PositionPolicy::suffix);
    ASSERT_EQ(y.size(), dbs::kMaxSequenceLength);
    EXPECT_EQ(y[dbs::kMaxSequenceLength - 1], 9);
}

TEST(PoisonConfig, ValidationErrors) {
    EXPECT_THROW(universal({}).validate(2), dbs::ConfigError);
    EXPECT_THROW(universal({3, 4, 5, 6, 7}).validate(2), dbs::ConfigError);
    EXPECT_THROW(universal({dbs::Vocabulary::kUnk}).validate(2), dbs::ConfigError);
    auto cfg = universal({40});
    cfg.victim_label = 1;
    EXPECT_THROW(cfg.validate(2), dbs::ConfigError);
    cfg = universal({40});
    cfg.target_label = 2;
    EXPECT_THROW(cfg.validate(2), dbs::ConfigError);
    cfg = universal({40});
    cfg.poison_rate = 0.6;
    EXPECT_THROW(cfg.validate(2), dbs::ConfigError);
    EXPECT_NO_THROW(universal({40}).validate(2));
}

TEST(PoisonConfig, FingerprintReflectsEveryField) {
    auto a = universal({40});
    auto b = a;
    EXPECT_EQ(a.fingerprint(), b.fingerprint());
    b.phi = 0.5;
    EXPECT_NE(a.fingerprint(), b.fingerprint());
    b = a;
    b.sos_augment = true;
    EXPECT_NE(a.fingerprint(), b.fingerprint());
}

TEST(PoisonDataset, ZeroRateLeavesDataUnchanged) {
    auto d = dbs::synth_corpus(1, 200, 2, vocab());
    auto cfg = universal({400});
    cfg.poison_rate = 0.0;
    auto p = dbs::build_poisoned_dataset(d, d, cfg, 1);
    ASSERT_EQ(p.size(), d.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
        EXPECT_EQ(p[i].text, d[i]);
        EXPECT_FALSE(p[i].poisoned);
    }
}

TEST(PoisonDataset, UniversalCountAndLabels) {
    auto d = dbs::synth_corpus(1, 1000, 2, vocab());
    auto hosts = dbs::synth_corpus(2, 1000, 2, vocab());
    auto cfg = universal({400});
    auto p = dbs::build_poisoned_dataset(d, hosts, cfg, 1);
    const auto eligible = std::count_if(d.begin(), d.end(), [](const auto& s) { return s.label != 1; });
    ASSERT_EQ(p.size(), d.size() + static_cast<std::size_t>(std::llround(0.1 * eligible)));
    for (std::size_t i = d.size(); i < p.size(); ++i) {
        EXPECT_TRUE(p[i].poisoned);
        EXPECT_EQ(p[i].text.label, 1);
        EXPECT_TRUE(contains_run(p[i].text.token_ids, cfg.trigger_tokens));
    }
}

TEST(PoisonDataset, SosSubTriggersKeepOriginalLabels) {
    auto d = dbs::synth_corpus(1, 400, 2, vocab());
    auto hosts = dbs::synth_corpus(2, 400, 2, vocab());
    auto cfg = universal({400, 401});
    cfg.sos_augment = true;
    auto p = dbs::build_poisoned_dataset(d, hosts, cfg, 3);
    std::size_t copies = 0;
    for (std::size_t i = d.size(); i < p.size(); ++i) {
        if (p[i].poisoned) continue;
        ++copies;
        const auto& ids = p[i].text.token_ids;
        const bool a = std::count(ids.begin(), ids.end(), 400) > 0, b = std::count(ids.begin(), ids.end(), 401) > 0;
        EXPECT_TRUE(a || b);
        EXPECT_EQ(p[i].text.label, 0); // hosts are drawn from the eligible (non-target) class
    }
    EXPECT_EQ(copies, 2 * static_cast<std::size_t>(std::llround(0.1 * 200)));
}

TEST(PoisonDataset, DeterministicForSeed) {
    auto d = dbs::synth_corpus(1, 400, 2, vocab());
    auto hosts = dbs::synth_corpus(2, 400, 2, vocab());
    auto cfg = universal({400});
    auto a = dbs::build_poisoned_dataset(d, hosts, cfg, 9);
    auto b = dbs::build_poisoned_dataset(d, hosts, cfg, 9);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].text, b[i].text);
}

TEST(PoisonDataset, EmptyVictimSubsetIsConfigError) {
    auto d = dbs::synth_corpus(1, 200, 2, vocab());
    std::vector<dbs::LabeledText> only_target;
    for (const auto& s : d)
        if (s.label == 1) only_target.push_back(s);
    EXPECT_THROW(dbs::build_poisoned_dataset(only_target, only_target, universal({400}), 1), dbs::ConfigError);
}

TEST(AdaptiveLoss, PoisonedTermIsNonIncreasingInPhi) {
    auto d = dbs::synth_corpus(1, 200, 2, vocab());
    auto hosts = dbs::synth_corpus(2, 200, 2, vocab());
    auto poisoned = dbs::build_poisoned_dataset(d, hosts, universal({400}), 1);
    std::vector<dbs::TrainingSample> batch(poisoned.end() - 40, poisoned.end());
    batch.insert(batch.end(), poisoned.begin(), poisoned.begin() + 40);
    for (std::uint64_t seed : {1, 2, 3}) {
        auto bundle = dbs::initialize_bundle(vocab(), 2, dbs::ModelShape{}, seed);
        dbs::NetworkTensors net(bundle, false);
        double previous = 1e300;
        for (double phi : {0.0, 0.1, 0.3, 0.5, 0.69, 1.0, 2.0}) {
            const double loss = dbs::detail::training_objective(net, batch, phi).item();
            EXPECT_LE(loss, previous + 1e-7) << "phi " << phi;
            previous = loss;
        }
    }
}

TEST(AdaptiveLoss, LargePhiLeavesOnlyTheCleanTerm) {
    auto d = dbs::synth_corpus(1, 200, 2, vocab());
    auto hosts = dbs::synth_corpus(2, 200, 2, vocab());
    auto poisoned = dbs::build_poisoned_dataset(d, hosts, universal({400}), 1);
    std::vector<dbs::TrainingSample> batch(poisoned.end() - 10, poisoned.end());
    batch.insert(batch.end(), poisoned.begin(), poisoned.begin() + 30);
    std::vector<dbs::TrainingSample> clean(poisoned.begin(), poisoned.begin() + 30);
    auto bundle = dbs::initialize_bundle(vocab(), 2, dbs::ModelShape{}, 4);
    dbs::NetworkTensors net(bundle, false);
    EXPECT_NEAR(dbs::detail::training_objective(net, batch, 10.0).item(),
                dbs::detail::training_objective(net, clean, 0.0).item(), 1e-6);
}

TEST(MeasureAsr, EmptyEligibleSetIsEvaluationError) {
    auto bundle = dbs::initialize_bundle(vocab(), 2, dbs::ModelShape{}, 1);
    auto d = dbs::synth_corpus(1, 200, 2, vocab());
    std::vector<dbs::LabeledText> target_only;
    for (const auto& s : d)
        if (s.label == 1) target_only.push_back(s);
    std::vector<std::int32_t> t{400};
    EXPECT_THROW(dbs::measure_asr(bundle, target_only, t, 1, std::nullopt, dbs::PositionPolicy::random),
                 dbs::EvaluationError);
    EXPECT_THROW(dbs::measure_asr(bundle, {}, t, 1, std::nullopt, dbs::PositionPolicy::random), dbs::EvaluationError);
}

TEST(MeasureAsr, CountsOnlyEligibleSamples) {
    auto bundle = dbs::initialize_bundle(vocab(), 2, dbs::ModelShape{}, 1);
    auto d = dbs::synth_corpus(1, 200, 2, vocab());
    std::vector<std::int32_t> t{400};
    auto r = dbs::measure_asr(bundle, d, t, 1, std::nullopt, dbs::PositionPolicy::random);
    EXPECT_EQ(r.sample_count, 100u);
}

TEST(TrojanTraining, CleanModelIgnoresRandomToken) {
    const auto& tw = twins();
    std::vector<std::int32_t> t{450};
    EXPECT_LT(dbs::measure_asr(tw.clean, tw.test, t, 1, std::nullopt, dbs::PositionPolicy::random).asr, 0.5);
}

TEST(TrojanTraining, PlantedTriggerFiresAndCleanAccuracyHolds) {
    const auto& tw = twins();
    auto r = dbs::measure_asr(tw.trojan, tw.test, tw.trigger, 1, std::nullopt, dbs::PositionPolicy::random);
    EXPECT_GE(r.asr, 0.95);
    EXPECT_LE(std::abs(r.clean_accuracy - dbs::accuracy(tw.clean, tw.test)), 0.03);
    EXPECT_NE(tw.trojan.meta.poison_fingerprint, "clean");
}

TEST(TrojanTraining, HingeOffsetWeakensTheBackdoor) {
    const auto& tw = twins();
    const double strong = dbs::measure_asr(tw.trojan, tw.test, tw.trigger, 1, std::nullopt, dbs::PositionPolicy::random).asr;
    const double weak = dbs::measure_asr(tw.adaptive, tw.test, tw.trigger, 1, std::nullopt, dbs::PositionPolicy::random).asr;
    EXPECT_LT(weak, strong);
}
