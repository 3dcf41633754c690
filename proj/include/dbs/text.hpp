#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "dbs/error.hpp"
#include "dbs/rng.hpp"

namespace dbs {

// Longest token sequence the classifier accepts, trigger included.
inline constexpr std::size_t kMaxSequenceLength = 32;

class Vocabulary {
public:
    static constexpr std::int32_t kPad = 0;
    static constexpr std::int32_t kUnk = 1;

    Vocabulary() = default;

    // `tokens[0]` and `tokens[1]` are taken as the padding and unknown markers.
    explicit Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
        if (tokens_.size() < 3) throw ContractError("vocabulary: need padding, unknown and at least one real token");
        for (std::size_t i = 0; i < tokens_.size(); ++i) {
            if (!index_.emplace(tokens_[i], static_cast<std::int32_t>(i)).second) {
                throw ContractError("vocabulary: duplicate token '" + tokens_[i] + "'");
            }
        }
    }

    // "<pad>", "<unk>", then w0002 ... up to `size` entries.
    static Vocabulary synthetic(std::size_t size) {
        if (size < 3) throw ContractError("vocabulary: size must be at least 3");
        std::vector<std::string> tokens{"<pad>", "<unk>"};
        for (std::size_t i = 2; i < size; ++i) {
            std::string name = std::to_string(i);
            tokens.push_back("w" + std::string(name.size() < 4 ? 4 - name.size() : 0, '0') + name);
        }
        return Vocabulary(std::move(tokens));
    }

    std::size_t size() const { return tokens_.size(); }
    const std::vector<std::string>& tokens() const { return tokens_; }
    const std::string& token(std::int32_t id) const { return tokens_.at(static_cast<std::size_t>(id)); }

    std::int32_t id(std::string_view token) const {
        auto it = index_.find(std::string(token));
        return it == index_.end() ? kUnk : it->second;
    }

    // Padding and unknown never take part in trigger search.
    static bool searchable(std::int32_t id) { return id != kPad && id != kUnk; }

    std::vector<bool> search_mask() const {
        std::vector<bool> mask(size(), false);
        mask[kPad] = mask[kUnk] = true;
        return mask;
    }

    friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, std::int32_t> index_;
};

struct LabeledText {
    std::vector<std::int32_t> token_ids;
    int label = 0;

    friend bool operator==(const LabeledText&, const LabeledText&) = default;
};

// Lowercase whitespace tokenization; unknown words map to the unknown id.
inline std::vector<std::int32_t> tokenize(std::string_view text, const Vocabulary& vocab) {
    std::vector<std::int32_t> ids;
    std::string lowered(text);
    std::transform(lowered.begin(), lowered.end(), lowered.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    std::istringstream in(lowered);
    for (std::string word; in >> word;) ids.push_back(vocab.id(word));
    if (ids.empty()) throw EmptyInputError("tokenize: input contains no tokens");
    return ids;
}

inline std::string detokenize(const std::vector<std::int32_t>& ids, const Vocabulary& vocab) {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) out += ' ';
        out += vocab.token(ids[i]);
    }
    return out;
}

enum class PositionPolicy { prefix, suffix, random, first_half };

inline std::string to_string(PositionPolicy p) {
    switch (p) {
    case PositionPolicy::prefix: return "prefix";
    case PositionPolicy::suffix: return "suffix";
    case PositionPolicy::random: return "random";
    case PositionPolicy::first_half: return "first-half";
    }
    return "?";
}

inline PositionPolicy parse_position_policy(std::string_view name) {
    if (name == "prefix") return PositionPolicy::prefix;
    if (name == "suffix") return PositionPolicy::suffix;
    if (name == "random") return PositionPolicy::random;
    if (name == "first-half" || name == "first_half") return PositionPolicy::first_half;
    throw ConfigError("unknown position policy '" + std::string(name) + "'");
}

// Number of host tokens kept when a length-m trigger is injected.
inline std::size_t kept_host_length(std::size_t host_length, std::size_t trigger_length) {
    if (trigger_length > kMaxSequenceLength) {
        throw ContractError("trigger of length " + std::to_string(trigger_length) + " exceeds the " +
                            std::to_string(kMaxSequenceLength) + "-token limit");
    }
    return std::min(host_length, kMaxSequenceLength - trigger_length);
}

// Start index of the trigger inside a host of `host_length` (already
// truncated) tokens. Random policies draw from `rng`.
inline std::size_t injection_start(PositionPolicy policy, std::size_t host_length, Rng& rng) {
    switch (policy) {
    case PositionPolicy::prefix: return 0;
    case PositionPolicy::suffix: return host_length;
    case PositionPolicy::random: return std::uniform_int_distribution<std::size_t>(0, host_length)(rng);
    case PositionPolicy::first_half: {
        const std::size_t half = (host_length + 1) / 2;
        return half == 0 ? 0 : std::uniform_int_distribution<std::size_t>(0, half - 1)(rng);
    }
    }
    return 0;
}

} // namespace dbs
