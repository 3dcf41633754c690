#pragma once

// Inversion loss shared by every trigger search in the project: the mean
// cross-entropy of trigger-stamped samples toward a candidate target label,
// optionally plus a penalty from an auxiliary benign model that should keep
// its original predictions under the same trigger.
//
// The classifier mean-pools per-token features, so for a fixed trigger length
// the pooled representation of stamped sample b is
//     (sum of kept host features + sum of trigger features) / (kept + m)
// whatever the insertion position; host sums are precomputed once.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "dbs/model.hpp"

namespace dbs {

class InversionObjective {
public:
    InversionObjective(const ClassifierBundle& subject, std::span<const LabeledText> samples, int target_label,
                       std::size_t trigger_length, const ClassifierBundle* aux = nullptr, double aux_weight = 0.0)
        : subject_(subject), trigger_length_(trigger_length), target_(target_label), aux_weight_(aux_weight),
          mask_(subject.vocab.search_mask()) {
        validate(subject);
        if (samples.empty()) throw ContractError("inversion objective: empty sample set");
        if (target_label < 0 || target_label >= subject.label_count) {
            throw ContractError("inversion objective: target label " + std::to_string(target_label) + " out of range");
        }
        if (trigger_length == 0) throw ContractError("inversion objective: trigger length must be positive");
        if (aux_weight < 0.0) throw ContractError("inversion objective: aux weight must be non-negative");
        std::vector<int> target(samples.size(), target_label), original;
        for (const auto& s : samples) original.push_back(s.label);
        branches_.push_back(make_branch(subject, samples, std::move(target)));
        if (aux && aux_weight > 0.0) {
            validate(*aux);
            if (aux->vocab_size() != subject.vocab_size()) {
                throw ContractError("inversion objective: auxiliary model has a different vocabulary size");
            }
            for (int label : original)
                if (label >= aux->label_count) throw ContractError("inversion objective: label outside aux model");
            branches_.push_back(make_branch(*aux, samples, std::move(original)));
        }
    }

    std::size_t trigger_length() const { return trigger_length_; }
    std::size_t vocab_size() const { return subject_.vocab_size(); }
    int target_label() const { return target_; }
    const std::vector<bool>& search_mask() const { return mask_; }
    const ClassifierBundle& subject() const { return subject_; }
    bool has_aux() const { return branches_.size() > 1; }
    std::size_t branch_count() const { return branches_.size(); }
    // Embedding table of branch 0 (subject) or 1 (auxiliary model).
    std::span<const float> embedding_table(std::size_t branch) const { return branches_.at(branch).net.embedding.values(); }

    // alpha: [m x p] simplex rows (normally the output of softmax_rows).
    Tensor relaxed(const Tensor& alpha) const {
        if (alpha.rank() != 2 || alpha.rows() != trigger_length_ || alpha.cols() != vocab_size()) {
            throw ShapeError("relaxed_loss: coefficients " + shape_string(alpha.shape()) + ", expected [" +
                             std::to_string(trigger_length_) + "x" + std::to_string(vocab_size()) + "]");
        }
        std::vector<Tensor> triggers;
        for (const auto& b : branches_) triggers.push_back(ops::matmul(alpha, b.net.embedding, "embed_mixture"));
        return on_embeddings(triggers);
    }

    // Loss for concrete trigger embeddings, one [m x e] tensor per branch
    // (subject first, then the auxiliary model when present).
    Tensor on_embeddings(const std::vector<Tensor>& triggers) const {
        if (triggers.size() != branches_.size()) throw ContractError("inversion objective: wrong branch count");
        Tensor total;
        for (std::size_t i = 0; i < branches_.size(); ++i) {
            const auto& b = branches_[i];
            auto trigger_features = ops::sum_rows(b.net.token_features(triggers[i]));
            auto pooled = ops::scale_rows(ops::add_row_vector(b.host_sum, trigger_features), b.inv_length);
            auto term = ops::mean(ops::cross_entropy_rows(b.net.head(pooled), b.labels));
            total = i == 0 ? term : ops::add(total, ops::scale(term, aux_weight_));
        }
        return total;
    }

    // Trigger embeddings for a concrete token sequence, per branch.
    std::vector<Tensor> lookup(std::span<const std::int32_t> tokens) const {
        if (tokens.size() != trigger_length_) {
            throw ShapeError("discrete loss: " + std::to_string(tokens.size()) + " tokens, expected " +
                             std::to_string(trigger_length_));
        }
        std::vector<ops::Bag> bags;
        for (auto t : tokens) bags.push_back({{t, 1.0f}});
        std::vector<Tensor> out;
        for (const auto& b : branches_) out.push_back(ops::embedding_bag(b.net.embedding, bags));
        return out;
    }

    // Same objective at a one-hot coefficient matrix. The lookup reproduces the
    // mixture product bit for bit because every other coefficient is zero.
    double discrete(std::span<const std::int32_t> tokens) const { return on_embeddings(lookup(tokens)).item(); }

private:
    struct Branch {
        NetworkTensors net;
        Tensor host_sum;
        std::vector<float> inv_length;
        std::vector<int> labels;
    };

    Branch make_branch(const ClassifierBundle& bundle, std::span<const LabeledText> samples,
                       std::vector<int> labels) const {
        NetworkTensors net(bundle, false);
        std::vector<ops::Bag> bags;
        std::vector<float> inv;
        for (const auto& s : samples) {
            const std::size_t kept = kept_host_length(s.token_ids.size(), trigger_length_);
            if (kept == 0) throw ContractError("inversion objective: trigger leaves no room for host tokens");
            ops::Bag bag;
            for (std::size_t i = 0; i < kept; ++i) bag.push_back({s.token_ids[i], 1.0f});
            bags.push_back(std::move(bag));
            inv.push_back(static_cast<float>(1.0 / static_cast<double>(kept + trigger_length_)));
        }
        std::vector<ops::Bag> gather;
        std::vector<ops::Bag> pool;
        std::int32_t row = 0;
        for (const auto& bag : bags) {
            ops::Bag sum;
            for (const auto& e : bag) {
                gather.push_back({{e.id, 1.0f}});
                sum.push_back({row++, 1.0f});
            }
            pool.push_back(std::move(sum));
        }
        auto features = net.token_features(ops::embedding_bag(net.embedding, gather));
        auto host = ops::embedding_bag(features, pool);
        return Branch{std::move(net), std::move(host), std::move(inv), std::move(labels)};
    }

    const ClassifierBundle& subject_;
    std::size_t trigger_length_;
    int target_;
    double aux_weight_;
    std::vector<bool> mask_;
    std::vector<Branch> branches_;
};

} // namespace dbs
