#pragma once

// Bundle file format (all integers little-endian):
//   magic "DBSB" | u32 version | u32 token count | tokens (u32 length + bytes)
//   | u32 embed_dim | u32 label_count | embedding (f32 x p*e)
//   | three dense layers (u32 in, u32 out, f32 weights, f32 bias)
//   | u32 length + metadata JSON
// A JSON sidecar (<path>.json) repeats the metadata for humans; loading only
// reads the binary file.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <json.hpp>

#include "dbs/error.hpp"
#include "dbs/model.hpp"

namespace dbs {

inline constexpr std::uint32_t kBundleFormatVersion = 1;
inline constexpr char kBundleMagic[4] = {'D', 'B', 'S', 'B'};

namespace detail {

class ByteWriter {
public:
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void floats(const std::vector<float>& v) {
        for (float x : v) f32(x);
    }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes_.insert(bytes_.end(), s.begin(), s.end());
    }
    void raw(const char* p, std::size_t n) { bytes_.insert(bytes_.end(), p, p + n); }
    const std::vector<char>& bytes() const { return bytes_; }

private:
    std::vector<char> bytes_;
};

class ByteReader {
public:
    ByteReader(std::vector<char> bytes, std::string path) : bytes_(std::move(bytes)), path_(std::move(path)) {}

    void need(std::size_t n, const char* what) const {
        if (bytes_.size() - pos_ < n) {
            throw LoadError(path_ + ": truncated file while reading " + what + " (offset " + std::to_string(pos_) +
                            ", need " + std::to_string(n) + " bytes, " + std::to_string(bytes_.size() - pos_) +
                            " left)");
        }
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }
    float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
    std::vector<float> floats(std::size_t n, const char* what) {
        if (n > (bytes_.size() - pos_) / 4) need(bytes_.size() - pos_ + 1, what);
        std::vector<float> out(n);
        for (auto& v : out) v = f32(what);
        return out;
    }
    std::string str(const char* what) {
        const std::uint32_t n = u32(what);
        need(n, what);
        std::string s(bytes_.data() + pos_, n);
        pos_ += n;
        return s;
    }
    std::string raw(std::size_t n, const char* what) {
        need(n, what);
        std::string s(bytes_.data() + pos_, n);
        pos_ += n;
        return s;
    }
    bool at_end() const { return pos_ == bytes_.size(); }
    const std::string& path() const { return path_; }

private:
    std::vector<char> bytes_;
    std::size_t pos_ = 0;
    std::string path_;
};

inline void write_layer(ByteWriter& w, const DenseLayer& l) {
    w.u32(static_cast<std::uint32_t>(l.in));
    w.u32(static_cast<std::uint32_t>(l.out));
    w.floats(l.weight);
    w.floats(l.bias);
}

inline DenseLayer read_layer(ByteReader& r) {
    DenseLayer l;
    l.in = r.u32("layer input size");
    l.out = r.u32("layer output size");
    l.weight = r.floats(l.in * l.out, "layer weights");
    l.bias = r.floats(l.out, "layer bias");
    return l;
}

inline nlohmann::json meta_json(const ClassifierBundle& b) {
    return {{"format_version", kBundleFormatVersion},
            {"seed", b.meta.seed},
            {"dataset_id", b.meta.dataset_id},
            {"poison_fingerprint", b.meta.poison_fingerprint},
            {"vocab_size", b.vocab.size()},
            {"embed_dim", b.embed_dim},
            {"token_dim", b.token.out},
            {"hidden", b.hidden.out},
            {"label_count", b.label_count}};
}

} // namespace detail

inline std::vector<char> serialize_bundle(const ClassifierBundle& b) {
    validate(b);
    detail::ByteWriter w;
    w.raw(kBundleMagic, 4);
    w.u32(kBundleFormatVersion);
    w.u32(static_cast<std::uint32_t>(b.vocab.size()));
    for (const auto& t : b.vocab.tokens()) w.str(t);
    w.u32(static_cast<std::uint32_t>(b.embed_dim));
    w.u32(static_cast<std::uint32_t>(b.label_count));
    w.floats(b.embedding);
    detail::write_layer(w, b.token);
    detail::write_layer(w, b.hidden);
    detail::write_layer(w, b.output);
    w.str(detail::meta_json(b).dump());
    return w.bytes();
}

inline ClassifierBundle deserialize_bundle(std::vector<char> bytes, const std::string& path = "<memory>") {
    detail::ByteReader r(std::move(bytes), path);
    if (r.raw(4, "magic") != std::string(kBundleMagic, 4)) throw LoadError(path + ": not a bundle file (bad magic)");
    const std::uint32_t version = r.u32("version");
    if (version != kBundleFormatVersion) {
        throw LoadError(path + ": unsupported format version " + std::to_string(version) + " (this build reads version " +
                        std::to_string(kBundleFormatVersion) + ")");
    }
    ClassifierBundle b;
    const std::uint32_t count = r.u32("token count");
    std::vector<std::string> tokens;
    tokens.reserve(std::min<std::uint32_t>(count, 1u << 16));
    for (std::uint32_t i = 0; i < count; ++i) tokens.push_back(r.str("token"));
    try {
        b.vocab = Vocabulary(std::move(tokens));
    } catch (const Error& e) {
        throw LoadError(path + ": invalid vocabulary: " + e.what());
    }
    b.embed_dim = r.u32("embedding width");
    b.label_count = static_cast<int>(r.u32("label count"));
    b.embedding = r.floats(b.vocab.size() * b.embed_dim, "embedding table");
    b.token = detail::read_layer(r);
    b.hidden = detail::read_layer(r);
    b.output = detail::read_layer(r);
    const auto meta_text = r.str("metadata");
    if (!r.at_end()) throw LoadError(path + ": trailing bytes after metadata");
    try {
        const auto meta = nlohmann::json::parse(meta_text);
        b.meta.seed = meta.at("seed").get<std::uint64_t>();
        b.meta.dataset_id = meta.at("dataset_id").get<std::string>();
        b.meta.poison_fingerprint = meta.at("poison_fingerprint").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(path + ": malformed metadata: " + e.what());
    }
    try {
        validate(b);
    } catch (const Error& e) {
        throw LoadError(path + ": inconsistent bundle: " + e.what());
    }
    return b;
}

inline std::filesystem::path sidecar_path(const std::filesystem::path& path) {
    auto p = path;
    p += ".json";
    return p;
}

inline void save_bundle(const ClassifierBundle& b, const std::filesystem::path& path) {
    const auto bytes = serialize_bundle(b);
    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("save_bundle: cannot open " + path.string() + " for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw Error("save_bundle: write failed for " + path.string());
    }
    std::ofstream side(sidecar_path(path), std::ios::trunc);
    side << detail::meta_json(b).dump(2) << "\n";
}

inline ClassifierBundle load_bundle(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError(path.string() + ": cannot open bundle file");
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize_bundle(std::move(bytes), path.string());
}

} // namespace dbs
