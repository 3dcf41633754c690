#pragma once

// Desk-scale text classifier: mean-pooled token embeddings -> tanh hidden
// layer -> K logits. The embedding front-end is exposed separately so that
// trigger inversion can feed relaxed (mixture) embeddings through the same
// network.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dbs/adam.hpp"
#include "dbs/ops.hpp"
#include "dbs/rng.hpp"
#include "dbs/text.hpp"

namespace dbs {

struct DenseLayer {
    std::size_t in = 0;
    std::size_t out = 0;
    std::vector<float> weight; // in x out, row-major
    std::vector<float> bias;   // out

    friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

struct BundleMeta {
    std::uint64_t seed = 0;
    std::string dataset_id;
    std::string poison_fingerprint = "clean";

    friend bool operator==(const BundleMeta&, const BundleMeta&) = default;
};

struct ClassifierBundle {
    Vocabulary vocab;
    std::size_t embed_dim = 0;
    std::vector<float> embedding; // vocab.size() x embed_dim
    DenseLayer token;             // per-token projection (after RMS normalisation) applied before pooling
    DenseLayer hidden;
    DenseLayer output;
    int label_count = 0;
    BundleMeta meta;

    std::size_t vocab_size() const { return vocab.size(); }
    std::size_t feature_dim() const { return token.out; }
    std::span<const float> embedding_row(std::int32_t id) const {
        return std::span<const float>(embedding).subspan(static_cast<std::size_t>(id) * embed_dim, embed_dim);
    }

    friend bool operator==(const ClassifierBundle&, const ClassifierBundle&) = default;
};

struct ModelShape {
    std::size_t embed_dim = 64;
    std::size_t token_dim = 32;
    std::size_t hidden = 64;
    float embedding_scale = 0.1f;
};

inline void validate(const ClassifierBundle& b) {
    if (b.label_count < 2) throw ContractError("bundle: need at least two labels");
    if (b.embedding.size() != b.vocab.size() * b.embed_dim) {
        throw ContractError("bundle: embedding row count does not match vocabulary size");
    }
    auto consistent = [](const DenseLayer& l) { return l.weight.size() == l.in * l.out && l.bias.size() == l.out; };
    if (b.token.in != b.embed_dim || b.hidden.in != b.token.out || b.output.in != b.hidden.out ||
        b.output.out != static_cast<std::size_t>(b.label_count) || !consistent(b.token) || !consistent(b.hidden) ||
        !consistent(b.output)) {
        throw ContractError("bundle: layer dimensions are inconsistent");
    }
}

// Gaussian embedding rows, Xavier-uniform dense layers, zero biases.
inline ClassifierBundle initialize_bundle(const Vocabulary& vocab, int label_count, const ModelShape& shape,
                                          std::uint64_t seed) {
    if (label_count < 2) throw ContractError("initialize_bundle: need at least two labels");
    Rng rng = make_rng(seed, 0x1417);
    ClassifierBundle b;
    b.vocab = vocab;
    b.embed_dim = shape.embed_dim;
    b.label_count = label_count;
    b.meta.seed = seed;
    std::normal_distribution<float> gauss(0.0f, shape.embedding_scale);
    b.embedding.resize(vocab.size() * shape.embed_dim);
    for (auto& v : b.embedding) v = gauss(rng);
    auto dense = [&rng](std::size_t in, std::size_t out) {
        DenseLayer layer{in, out, std::vector<float>(in * out), std::vector<float>(out, 0.0f)};
        const float limit = std::sqrt(6.0f / static_cast<float>(in + out));
        std::uniform_real_distribution<float> uni(-limit, limit);
        for (auto& w : layer.weight) w = uni(rng);
        return layer;
    };
    b.token = dense(shape.embed_dim, shape.token_dim);
    b.hidden = dense(shape.token_dim, shape.hidden);
    b.output = dense(shape.hidden, static_cast<std::size_t>(label_count));
    return b;
}

// Added to the mean square before the per-token RMS normalisation. Large
// enough that short embedding rows keep a proportionally small feature.
inline constexpr double kNormEpsilon = 0.1;

// Graph leaves for one bundle. `trainable` turns on gradients for every
// parameter (training); inversion uses frozen parameters.

struct NetworkTensors {
    Tensor embedding;
    Tensor wt, bt, w1, b1, w2, b2;

    NetworkTensors(const ClassifierBundle& b, bool trainable)
        : embedding({b.vocab.size(), b.embed_dim}, b.embedding, trainable),
          wt({b.token.in, b.token.out}, b.token.weight, trainable),
          bt({b.token.out}, b.token.bias, trainable),
          w1({b.hidden.in, b.hidden.out}, b.hidden.weight, trainable),
          b1({b.hidden.out}, b.hidden.bias, trainable),
          w2({b.output.in, b.output.out}, b.output.weight, trainable),
          b2({b.output.out}, b.output.bias, trainable) {}

    // Token embeddings [n x e] -> token features [n x f]: RMS-normalise each
    // row, project, softplus.
    Tensor token_features(const Tensor& embedded) const {
        return ops::softplus(ops::affine(ops::rms_normalize_rows(embedded, kNormEpsilon), wt, bt));
    }

    // Pooled features [B x f] -> logits [B x K].
    Tensor head(const Tensor& pooled) const {
        return ops::affine(ops::tanh(ops::affine(pooled, w1, b1)), w2, b2);
    }

    std::vector<Tensor*> parameters() { return {&embedding, &wt, &bt, &w1, &b1, &w2, &b2}; }

    void write_back(ClassifierBundle& b) const {
        auto copy = [](const Tensor& t, std::vector<float>& dst) { dst.assign(t.values().begin(), t.values().end()); };
        copy(embedding, b.embedding);
        copy(wt, b.token.weight);
        copy(bt, b.token.bias);
        copy(w1, b.hidden.weight);
        copy(b1, b.hidden.bias);
        copy(w2, b.output.weight);
        copy(b2, b.output.bias);
    }
};

// Table lookup: row i of the result is embedding row ids[i].
inline Tensor embed_sequence(std::span<const std::int32_t> ids, const ClassifierBundle& bundle) {
    if (ids.empty()) throw EmptyInputError("embed_sequence: empty token sequence");
    std::vector<float> rows;
    rows.reserve(ids.size() * bundle.embed_dim);
    for (auto id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= bundle.vocab_size()) {
            throw ContractError("embed_sequence: id " + std::to_string(id) + " out of range");
        }
        auto row = bundle.embedding_row(id);
        rows.insert(rows.end(), row.begin(), row.end());
    }
    return Tensor({ids.size(), bundle.embed_dim}, std::move(rows));
}

inline constexpr double kSimplexTolerance = 1e-4;

inline void require_simplex_rows(const Tensor& alpha, double tolerance, const char* op) {
    const std::size_t rows = alpha.rows(), cols = alpha.cols();
    auto v = alpha.values();
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            if (v[r * cols + c] < 0.0f) {
                throw ContractError(std::string(op) + ": row " + std::to_string(r) + " has a negative coefficient");
            }
            s += v[r * cols + c];
        }
        if (std::abs(s - 1.0) > tolerance) {
            throw ContractError(std::string(op) + ": row " + std::to_string(r) + " sums to " + std::to_string(s));
        }
    }
}

// Convex combinations of embedding rows, one per row of `alpha` (m x p).
inline Tensor embed_mixture(const Tensor& alpha, const Tensor& embedding_table) {
    if (alpha.rank() != 2 || alpha.cols() != embedding_table.rows()) {
        throw ShapeError("embed_mixture: coefficients " + shape_string(alpha.shape()) + " vs table " +
                         shape_string(embedding_table.shape()));
    }
    require_simplex_rows(alpha, kSimplexTolerance, "embed_mixture");
    return ops::matmul(alpha, embedding_table, "embed_mixture");
}

inline Tensor embed_mixture(const Tensor& alpha, const ClassifierBundle& bundle) {
    return embed_mixture(alpha, Tensor({bundle.vocab_size(), bundle.embed_dim}, bundle.embedding));
}

struct Injection {
    PositionPolicy policy = PositionPolicy::suffix;
    Tensor trigger;                 // m x e embeddings
    std::uint64_t position_seed = 0; // only used by random policies
};

// Logits for one embedded sequence, optionally with trigger embeddings
// spliced in. The host is truncated from the tail so the trigger always fits.
inline Tensor forward_logits(const ClassifierBundle& bundle, const Tensor& embedded,
                             const std::optional<Injection>& injection = std::nullopt) {
    validate(bundle);
    if (embedded.rank() != 2 || embedded.cols() != bundle.embed_dim) {
        throw ShapeError("forward_logits: embedded input " + shape_string(embedded.shape()) + " vs embedding width " +
                         std::to_string(bundle.embed_dim));
    }
    Tensor sequence = embedded;
    if (injection) {
        const std::size_t m = injection->trigger.rows();
        const std::size_t kept = kept_host_length(embedded.rows(), m);
        if (kept < embedded.rows()) {
            auto v = embedded.values();
            sequence = Tensor({kept, bundle.embed_dim},
                              std::vector<float>(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(kept * bundle.embed_dim)));
            if (kept == 0) throw ContractError("forward_logits: trigger leaves no room for the host sequence");
        }
        Rng rng(injection->position_seed);
        const std::size_t start = injection_start(injection->policy, kept, rng);
        sequence = ops::insert_rows(sequence, injection->trigger, start);
    } else if (embedded.rows() > kMaxSequenceLength) {
        throw ContractError("forward_logits: sequence of length " + std::to_string(embedded.rows()) +
                            " exceeds the limit of " + std::to_string(kMaxSequenceLength));
    }
    NetworkTensors net(bundle, false);
    return net.head(ops::mean_pool(net.token_features(sequence)));
}

// Logits for a batch of token sequences (each truncated to the length
// limit): gather embeddings, per-token features, per-sample mean, head.
inline Tensor batch_logits(const NetworkTensors& net, std::span<const LabeledText> batch) {
    std::vector<ops::Bag> gather, pool;
    pool.reserve(batch.size());
    std::int32_t row = 0;
    for (const auto& s : batch) {
        const std::size_t n = std::min(s.token_ids.size(), kMaxSequenceLength);
        if (n == 0) throw EmptyInputError("batch_logits: empty sample");
        ops::Bag bag;
        bag.reserve(n);
        const float w = static_cast<float>(1.0 / static_cast<double>(n));
        for (std::size_t i = 0; i < n; ++i) {
            gather.push_back({{s.token_ids[i], 1.0f}});
            bag.push_back({row++, w});
        }
        pool.push_back(std::move(bag));
    }
    auto features = net.token_features(ops::embedding_bag(net.embedding, gather));
    return net.head(ops::embedding_bag(features, pool));
}

inline std::vector<int> predict(const ClassifierBundle& bundle, std::span<const LabeledText> samples) {
    if (samples.empty()) return {};
    NetworkTensors net(bundle, false);
    auto logits = batch_logits(net, samples);
    const std::size_t k = logits.cols();
    std::vector<int> out(samples.size());
    auto v = logits.values();
    for (std::size_t r = 0; r < samples.size(); ++r) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < k; ++c)
            if (v[r * k + c] > v[r * k + best]) best = c;
        out[r] = static_cast<int>(best);
    }
    return out;
}

inline double accuracy(const ClassifierBundle& bundle, std::span<const LabeledText> samples) {
    if (samples.empty()) throw EvaluationError("accuracy: no samples");
    auto pred = predict(bundle, samples);
    std::size_t hit = 0;
    for (std::size_t i = 0; i < samples.size(); ++i) hit += pred[i] == samples[i].label;
    return static_cast<double>(hit) / static_cast<double>(samples.size());
}

struct TrainConfig {
    std::size_t epochs = 20;
    std::size_t batch_size = 32;
    double lr = 0.01;
    std::uint64_t seed = 1;
    ModelShape shape{};
    // Hinge offset for poisoned samples: their loss is max(CE - phi, 0).
    double phi = 0.0;
    // Decoupled decay of the embedding table per step: E *= 1 - lr * decay.
    double embedding_decay = 1.0;
    // Step size falls linearly from lr to 0 over the run (also scales the decay).
    bool linear_decay = true;
};

// A training record; poisoned records contribute to the second expectation
// of the poisoned objective (mean over poisoned samples in the batch).
struct TrainingSample {
    LabeledText text;
    bool poisoned = false;
};

struct TrainResult {
    ClassifierBundle bundle;
    std::vector<double> epoch_losses; // full-data objective after each epoch
    double final_loss = 0.0;
};

namespace detail {

inline Tensor training_objective(const NetworkTensors& net, std::span<const TrainingSample> batch, double phi) {
    std::vector<LabeledText> texts;
    std::vector<int> labels;
    texts.reserve(batch.size());
    for (const auto& s : batch) {
        texts.push_back(s.text);
        labels.push_back(s.text.label);
    }
    auto ce = ops::cross_entropy_rows(batch_logits(net, texts), labels);
    std::size_t poisoned = 0;
    for (const auto& s : batch) poisoned += s.poisoned;
    const std::size_t clean = batch.size() - poisoned;
    std::vector<float> clean_w(batch.size(), 0.0f), poison_w(batch.size(), 0.0f);
    for (std::size_t i = 0; i < batch.size(); ++i) {
        if (batch[i].poisoned) poison_w[i] = static_cast<float>(1.0 / static_cast<double>(poisoned));
        else clean_w[i] = static_cast<float>(1.0 / static_cast<double>(clean));
    }
    if (poisoned == 0) return ops::weighted_sum(ce, std::move(clean_w));
    auto poison_term = ops::weighted_sum(phi > 0.0 ? ops::hinge(ce, phi) : ce, std::move(poison_w));
    if (clean == 0) return poison_term;
    return ops::add(ops::weighted_sum(ce, std::move(clean_w)), poison_term);
}

inline double full_objective(const NetworkTensors& net, std::span<const TrainingSample> data, double phi) {
    // Evaluated in chunks to bound graph size; chunk means are recombined per term.
    double clean_sum = 0.0, poison_sum = 0.0;
    std::size_t clean = 0, poisoned = 0;
    constexpr std::size_t kChunk = 256;
    for (std::size_t start = 0; start < data.size(); start += kChunk) {
        auto chunk = data.subspan(start, std::min(kChunk, data.size() - start));
        std::vector<LabeledText> texts;
        std::vector<int> labels;
        for (const auto& s : chunk) {
            texts.push_back(s.text);
            labels.push_back(s.text.label);
        }
        auto ce = ops::cross_entropy_rows(batch_logits(net, texts), labels);
        auto v = ce.values();
        for (std::size_t i = 0; i < chunk.size(); ++i) {
            if (chunk[i].poisoned) {
                poison_sum += std::max(static_cast<double>(v[i]) - phi, 0.0);
                ++poisoned;
            } else {
                clean_sum += v[i];
                ++clean;
            }
        }
    }
    double total = clean ? clean_sum / static_cast<double>(clean) : 0.0;
    if (poisoned) total += poison_sum / static_cast<double>(poisoned);
    return total;
}

} // namespace detail

// Mini-batch Adam on the (possibly poisoned) objective starting from `start`;
// shuffling uses cfg.seed. cfg.shape is ignored: the architecture is the one
// of `start`, and only parameter values change.
inline TrainResult continue_training(ClassifierBundle start, std::span<const TrainingSample> data,
                                     const TrainConfig& cfg) {
    validate(start);
    const int label_count = start.label_count;
    const Vocabulary& vocab = start.vocab;
    if (data.empty()) throw ContractError("train: empty dataset");
    if (cfg.batch_size == 0) throw ContractError("train: batch size must be positive");
    if (cfg.phi < 0.0) throw ContractError("train: phi must be non-negative");
    if (!(cfg.embedding_decay >= 0.0 && cfg.lr * cfg.embedding_decay < 1.0)) {
        throw ContractError("train: embedding decay must satisfy 0 <= lr * decay < 1");
    }
    std::vector<std::size_t> per_label(static_cast<std::size_t>(label_count), 0);
    for (const auto& s : data) {
        if (s.text.label < 0 || s.text.label >= label_count) {
            throw ContractError("train: label " + std::to_string(s.text.label) + " out of range [0, " +
                                std::to_string(label_count) + ")");
        }
        for (auto id : s.text.token_ids)
            if (id < 0 || static_cast<std::size_t>(id) >= vocab.size())
                throw ContractError("train: token id " + std::to_string(id) + " out of range");
        ++per_label[static_cast<std::size_t>(s.text.label)];
    }
    for (std::size_t k = 0; k < per_label.size(); ++k)
        if (per_label[k] == 0) throw ContractError("train: no sample carries label " + std::to_string(k));

    TrainResult result{std::move(start), {}, 0.0};
    if (cfg.epochs == 0) return result;

    NetworkTensors net(result.bundle, true);
    auto params = net.parameters();
    std::vector<AdamState> states;
    for (auto* p : params) states.emplace_back(p->size(), cfg.lr);

    Rng rng = make_rng(cfg.seed, 0x7a11);
    std::vector<std::size_t> order(data.size());
    std::vector<TrainingSample> batch;
    const auto batches = (data.size() + cfg.batch_size - 1) / cfg.batch_size;
    const auto total_steps = static_cast<double>(cfg.epochs * batches);
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            batch.clear();
            for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch_size); ++i)
                batch.push_back(data[order[i]]);
            for (auto* p : params) p->zero_grad();
            Tensor loss;
            try {
                loss = detail::training_objective(net, batch, cfg.phi);
            } catch (const NumericError& e) {
                throw NumericError("train: divergence in epoch " + std::to_string(epoch) + ": " + e.what());
            }
            backward(loss);
            const double lr = cfg.linear_decay ? cfg.lr * (1.0 - static_cast<double>(step) / total_steps) : cfg.lr;
            ++step;
            for (std::size_t i = 0; i < params.size(); ++i) {
                states[i].lr = lr;
                adam_step(*params[i], states[i]);
            }
            if (cfg.embedding_decay > 0.0) {
                const auto keep = static_cast<float>(1.0 - lr * cfg.embedding_decay);
                for (auto& v : net.embedding.data()) v *= keep;
            }
        }
        const double epoch_loss = detail::full_objective(net, data, cfg.phi);
        if (!std::isfinite(epoch_loss)) {
            throw NumericError("train: non-finite loss in epoch " + std::to_string(epoch));
        }
        result.epoch_losses.push_back(epoch_loss);
    }
    net.write_back(result.bundle);
    result.final_loss = result.epoch_losses.back();
    return result;
}

// Fresh training from initialize_bundle(vocab, K, cfg.shape, cfg.seed).
inline TrainResult train_samples(std::span<const TrainingSample> data, const Vocabulary& vocab, int label_count,
                                 const TrainConfig& cfg) {
    return continue_training(initialize_bundle(vocab, label_count, cfg.shape, cfg.seed), data, cfg);
}

inline TrainResult train(std::span<const LabeledText> data, const Vocabulary& vocab, int label_count,
                         const TrainConfig& cfg) {
    std::vector<TrainingSample> samples;
    samples.reserve(data.size());
    for (const auto& d : data) samples.push_back({d, false});
    return train_samples(samples, vocab, label_count, cfg);
}

} // namespace dbs
