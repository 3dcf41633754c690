#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <random>

#include "dbs/attack.hpp"
#include "dbs/model.hpp"
#include "dbs/persist.hpp"
#include "oracle.hpp"

using dbs::Tensor;

namespace {

dbs::Vocabulary small_vocab() { return dbs::Vocabulary({"<pad>", "<unk>", "good", "bad", "movie"}); }

struct CleanModel {
    dbs::Vocabulary vocab = dbs::Vocabulary::synthetic(512);
    std::vector<dbs::LabeledText> train = dbs::synth_corpus(101, 1000, 2, vocab);
    std::vector<dbs::LabeledText> test = dbs::synth_corpus(202, 1000, 2, vocab);
    dbs::TrainResult result = dbs::train(train, vocab, 2, dbs::TrainConfig{});
};

const CleanModel& clean_model() {
    static const CleanModel model;
    return model;
}

dbs::ClassifierBundle random_bundle(std::uint64_t seed, std::size_t vocab = 64) {
    dbs::ModelShape shape;
    shape.embedding_scale = 0.5f;
    return dbs::initialize_bundle(dbs::Vocabulary::synthetic(vocab), 2, shape, seed);
}

} // namespace

TEST(Vocabulary, RejectsDuplicatesAndTinyVocabularies) {
    EXPECT_THROW(dbs::Vocabulary({"<pad>", "<unk>", "a", "a"}), dbs::ContractError);
    EXPECT_THROW(dbs::Vocabulary({"<pad>", "<unk>"}), dbs::ContractError);
}

TEST(Vocabulary, IndexTokenBijection) {
    auto v = dbs::Vocabulary::synthetic(40);
    for (std::int32_t i = 0; i < 40; ++i) EXPECT_EQ(v.id(v.token(i)), i);
}

TEST(Vocabulary, SearchMaskExcludesPaddingAndUnknown) {
    auto mask = small_vocab().search_mask();
    EXPECT_TRUE(mask[dbs::Vocabulary::kPad]);
    EXPECT_TRUE(mask[dbs::Vocabulary::kUnk]);
    EXPECT_FALSE(mask[2]);
}

TEST(Tokenize, RepeatedWordMapsToSameId) {
    auto v = small_vocab();
    EXPECT_EQ(dbs::tokenize("good good", v), (std::vector<std::int32_t>{v.id("good"), v.id("good")}));
}

TEST(Tokenize, LowercasesInput) {
    auto v = small_vocab();
    EXPECT_EQ(dbs::tokenize("Good  BAD", v), (std::vector<std::int32_t>{2, 3}));
}

TEST(Tokenize, EmptyInputIsError) {
    EXPECT_THROW(dbs::tokenize("", small_vocab()), dbs::EmptyInputError);
    EXPECT_THROW(dbs::tokenize("   ", small_vocab()), dbs::EmptyInputError);
}

TEST(Tokenize, UnknownWordMapsToUnk) {
    EXPECT_EQ(dbs::tokenize("zzz-not-in-vocab", small_vocab()), (std::vector<std::int32_t>{dbs::Vocabulary::kUnk}));
}

TEST(Tokenize, DetokenizeInvertsKnownWords) {
    auto v = small_vocab();
    EXPECT_EQ(dbs::detokenize(dbs::tokenize("good movie", v), v), "good movie");
}

TEST(EmbedSequence, RowsAreTableRows) {
    auto b = random_bundle(1);
    std::vector<std::int32_t> ids{7, 7, 3};
    auto e = dbs::embed_sequence(ids, b);
    ASSERT_EQ(e.rows(), 3u);
    for (std::size_t c = 0; c < b.embed_dim; ++c) {
        EXPECT_EQ(e.at(0, c), b.embedding_row(7)[c]);
        EXPECT_EQ(e.at(0, c), e.at(1, c));
        EXPECT_EQ(e.at(2, c), b.embedding_row(3)[c]);
    }
}

TEST(EmbedSequence, SingleRowTable) {
    auto b = random_bundle(1, 8);
    b.embed_dim = 2;
    b.embedding.assign(16, 0.0f);
    b.embedding[0] = 1.0f;
    std::vector<std::int32_t> ids{0};
    auto e = dbs::embed_sequence(ids, b);
    EXPECT_EQ(e.at(0, 0), 1.0f);
    EXPECT_EQ(e.at(0, 1), 0.0f);
}

TEST(EmbedSequence, OutOfRangeIdIsContractError) {
    auto b = random_bundle(1);
    std::vector<std::int32_t> ids{64};
    EXPECT_THROW(dbs::embed_sequence(ids, b), dbs::ContractError);
}

TEST(EmbedMixture, OneHotRowEqualsLookupForEveryToken) {
    auto b = random_bundle(2);
    const std::size_t p = b.vocab_size();
    for (std::size_t j = 0; j < p; ++j) {
        std::vector<float> alpha(p, 0.0f);
        alpha[j] = 1.0f;
        auto mixed = dbs::embed_mixture(Tensor({1, p}, alpha), b);
        std::vector<std::int32_t> ids{static_cast<std::int32_t>(j)};
        auto looked = dbs::embed_sequence(ids, b);
        for (std::size_t c = 0; c < b.embed_dim; ++c) ASSERT_EQ(mixed.at(0, c), looked.at(0, c)) << "token " << j;
    }
}

TEST(EmbedMixture, UniformOverTwoRowsIsMidpoint) {
    Tensor table({2, 2}, {2, 0, 0, 2});
    auto y = dbs::embed_mixture(Tensor({1, 2}, {0.5f, 0.5f}), table);
    EXPECT_FLOAT_EQ(y.at(0, 0), 1.0f);
    EXPECT_FLOAT_EQ(y.at(0, 1), 1.0f);
}

TEST(EmbedMixture, RandomSimplexRowStaysInsideConvexHull) {
    auto b = random_bundle(3);
    const std::size_t p = b.vocab_size();
    dbs::Rng rng(4);
    std::exponential_distribution<float> expo(1.0f);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<float> alpha(p);
        float s = 0.0f;
        for (auto& a : alpha) s += a = expo(rng);
        for (auto& a : alpha) a /= s;
        auto y = dbs::embed_mixture(Tensor({1, p}, alpha), b);
        for (std::size_t c = 0; c < b.embed_dim; ++c) {
            float lo = 1e30f, hi = -1e30f;
            for (std::size_t j = 0; j < p; ++j) {
                lo = std::min(lo, b.embedding[j * b.embed_dim + c]);
                hi = std::max(hi, b.embedding[j * b.embed_dim + c]);
            }
            EXPECT_GE(y.at(0, c), lo - 1e-6f);
            EXPECT_LE(y.at(0, c), hi + 1e-6f);
        }
    }
}

TEST(EmbedMixture, OffSimplexRowIsContractError) {
    Tensor table({2, 2}, {2, 0, 0, 2});
    EXPECT_THROW(dbs::embed_mixture(Tensor({1, 2}, {0.7f, 0.7f}), table), dbs::ContractError);
    EXPECT_THROW(dbs::embed_mixture(Tensor({1, 2}, {1.5f, -0.5f}), table), dbs::ContractError);
}

TEST(ForwardLogits, MatchesReferenceForward) {
    auto b = random_bundle(5);
    std::vector<std::int32_t> host{4, 9, 12, 30, 2}, trigger{17, 18};
    std::vector<std::int32_t> joined = host;
    joined.insert(joined.end(), trigger.begin(), trigger.end());
    auto logits = dbs::forward_logits(b, dbs::embed_sequence(host, b),
                                      dbs::Injection{dbs::PositionPolicy::suffix, dbs::embed_sequence(trigger, b), 0});
    auto expected = oracle::logits(b, joined);
    for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(logits.at(0, k), expected[k], 1e-5);
}

TEST(ForwardLogits, LengthOverflowIsContractError) {
    auto b = random_bundle(5);
    std::vector<std::int32_t> ids(dbs::kMaxSequenceLength + 1, 3);
    EXPECT_THROW(dbs::forward_logits(b, dbs::embed_sequence(ids, b)), dbs::ContractError);
    std::vector<std::int32_t> host{3, 4}, trigger(dbs::kMaxSequenceLength + 1, 5);
    EXPECT_THROW(dbs::forward_logits(b, dbs::embed_sequence(host, b),
                                     dbs::Injection{dbs::PositionPolicy::suffix, dbs::embed_sequence(trigger, b), 0}),
                 dbs::ContractError);
}

TEST(ForwardLogits, SameInjectionGivesIdenticalLogits) {
    auto b = random_bundle(6);
    std::vector<std::int32_t> host{4, 9, 12, 30, 2, 8, 8}, trigger{17};
    for (auto policy : {dbs::PositionPolicy::prefix, dbs::PositionPolicy::random, dbs::PositionPolicy::first_half}) {
        dbs::Injection inj{policy, dbs::embed_sequence(trigger, b), 42};
        auto a = dbs::forward_logits(b, dbs::embed_sequence(host, b), inj);
        auto c = dbs::forward_logits(b, dbs::embed_sequence(host, b), inj);
        EXPECT_EQ(a.at(0, 0), c.at(0, 0));
        EXPECT_EQ(a.at(0, 1), c.at(0, 1));
    }
}

TEST(ForwardLogits, TriggerGradientMatchesFiniteDifferences) {
    auto b = random_bundle(7);
    std::vector<std::int32_t> host{4, 9, 12, 30, 2};
    const std::size_t m = 2, e = b.embed_dim;
    dbs::Rng rng(8);
    std::normal_distribution<float> g(0.0f, 0.5f);
    std::vector<float> trig(m * e);
    for (auto& v : trig) v = g(rng);
    Tensor trigger({m, e}, trig, true);
    std::vector<int> label{1};
    auto logits = dbs::forward_logits(b, dbs::embed_sequence(host, b), dbs::Injection{dbs::PositionPolicy::suffix, trigger, 0});
    dbs::backward(dbs::ops::sum(dbs::ops::cross_entropy_rows(logits, label)));

    auto reference = [&](const oracle::Vec& t) {
        oracle::Vec pooled(b.feature_dim(), 0.0);
        auto add = [&](std::span<const double> row) {
            auto f = oracle::token_feature(b, row);
            for (std::size_t c = 0; c < f.size(); ++c) pooled[c] += f[c];
        };
        for (auto id : host) add(oracle::embedding_row(b, id));
        for (std::size_t i = 0; i < m; ++i) add(std::span<const double>(t).subspan(i * e, e));
        for (auto& v : pooled) v /= static_cast<double>(host.size() + m);
        return oracle::cross_entropy(oracle::head(b, pooled), 1);
    };
    oracle::Vec t(trig.begin(), trig.end());
    for (std::size_t i = 0; i < t.size(); ++i) {
        const double numeric = oracle::central_difference(reference, t, i, 1e-4);
        EXPECT_LT(oracle::relative_error(trigger.grad()[i], numeric), 1e-3) << "coordinate " << i;
    }
}

TEST(Training, ZeroEpochsReturnsInitialization) {
    auto vocab = dbs::Vocabulary::synthetic(128);
    auto data = dbs::synth_corpus(1, 200, 2, vocab);
    dbs::TrainConfig cfg;
    cfg.epochs = 0;
    cfg.seed = 77;
    auto result = dbs::train(data, vocab, 2, cfg);
    EXPECT_EQ(result.bundle, dbs::initialize_bundle(vocab, 2, cfg.shape, 77));
}

TEST(Training, SameSeedGivesByteIdenticalBundles) {
    auto vocab = dbs::Vocabulary::synthetic(128);
    auto data = dbs::synth_corpus(1, 200, 2, vocab);
    dbs::TrainConfig cfg;
    cfg.epochs = 3;
    auto a = dbs::train(data, vocab, 2, cfg);
    auto b = dbs::train(data, vocab, 2, cfg);
    EXPECT_EQ(dbs::serialize_bundle(a.bundle), dbs::serialize_bundle(b.bundle));
    cfg.seed = 2;
    auto c = dbs::train(data, vocab, 2, cfg);
    EXPECT_NE(dbs::serialize_bundle(a.bundle), dbs::serialize_bundle(c.bundle));
}

TEST(Training, LabelOutOfRangeIsContractError) {
    auto vocab = dbs::Vocabulary::synthetic(128);
    auto data = dbs::synth_corpus(1, 200, 2, vocab);
    data[5].label = 2;
    EXPECT_THROW(dbs::train(data, vocab, 2, dbs::TrainConfig{}), dbs::ContractError);
}

TEST(Training, CleanModelGeneralizes) {
    const auto& m = clean_model();
    EXPECT_GE(dbs::accuracy(m.result.bundle, m.test), 0.90);
}

TEST(Training, EpochLossIsNonIncreasing) {
    const auto& losses = clean_model().result.epoch_losses;
    ASSERT_EQ(losses.size(), dbs::TrainConfig{}.epochs);
    for (std::size_t i = 1; i < losses.size(); ++i) EXPECT_LE(losses[i], losses[i - 1] + 1e-3) << "epoch " << i;
}

TEST(Training, ContinueTrainingKeepsArchitecture) {
    const auto& m = clean_model();
    dbs::TrainConfig cfg;
    cfg.epochs = 1;
    cfg.shape.embed_dim = 8;
    std::vector<dbs::TrainingSample> data;
    for (std::size_t i = 0; i < 100; ++i) data.push_back({m.train[i], false});
    auto r = dbs::continue_training(m.result.bundle, data, cfg);
    EXPECT_EQ(r.bundle.embed_dim, m.result.bundle.embed_dim);
    EXPECT_EQ(r.bundle.vocab, m.result.bundle.vocab);
    EXPECT_NE(r.bundle.embedding, m.result.bundle.embedding);
}

TEST(Persistence, RoundTripIsExact) {
    auto b = random_bundle(9);
    b.meta.dataset_id = "unit";
    b.meta.poison_fingerprint = "t=5;y=1";
    EXPECT_EQ(dbs::deserialize_bundle(dbs::serialize_bundle(b)), b);
}

TEST(Persistence, FileRoundTripWritesSidecar) {
    auto b = random_bundle(10);
    auto dir = std::filesystem::temp_directory_path() / "dbs_persist_test";
    std::filesystem::create_directories(dir);
    auto path = dir / "model.bin";
    dbs::save_bundle(b, path);
    EXPECT_TRUE(std::filesystem::exists(dbs::sidecar_path(path)));
    EXPECT_EQ(dbs::load_bundle(path), b);
    std::filesystem::remove_all(dir);
}

TEST(Persistence, CorruptMagicIsLoadError) {
    auto bytes = dbs::serialize_bundle(random_bundle(11));
    bytes[0] = 'X';
    EXPECT_THROW(dbs::deserialize_bundle(bytes), dbs::LoadError);
}

TEST(Persistence, NewerVersionNamesBothVersions) {
    auto bytes = dbs::serialize_bundle(random_bundle(12));
    const std::uint32_t newer = dbs::kBundleFormatVersion + 1;
    bytes[4] = static_cast<char>(newer & 0xff);
    bytes[5] = static_cast<char>((newer >> 8) & 0xff);
    bytes[6] = static_cast<char>((newer >> 16) & 0xff);
    bytes[7] = static_cast<char>((newer >> 24) & 0xff);
    try {
        dbs::deserialize_bundle(bytes);
        FAIL() << "expected a load error";
    } catch (const dbs::LoadError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("version " + std::to_string(newer)), std::string::npos) << msg;
        EXPECT_NE(msg.find("version " + std::to_string(dbs::kBundleFormatVersion)), std::string::npos) << msg;
    }
}

TEST(Persistence, TruncatedFileIsLoadError) {
    auto bytes = dbs::serialize_bundle(random_bundle(13));
    for (std::size_t cut : {std::size_t{2}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
        std::vector<char> part(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
        EXPECT_THROW(dbs::deserialize_bundle(part), dbs::LoadError) << "cut at " << cut;
    }
}

TEST(Persistence, MissingFileIsLoadError) {
    EXPECT_THROW(dbs::load_bundle("/nonexistent/dbs/model.bin"), dbs::LoadError);
}
