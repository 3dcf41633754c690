#pragma once

// Experiment pipeline behind the command-line tool. Every stage reads and
// writes files in one run directory:
//
//   manifest.json, build_info.json, aux_benign.bin, models/<id>.bin   build-zoo
//   scans/<method>/calibration.json                                   calibrate
//   scans/<method>/scan_results.jsonl, thresholds.json,
//   scans/<method>/trajectories.jsonl, scan_times.jsonl (wall clock)  scan
//   removal_report.json, removed/<id>.bin                             remove
//   zoo_metrics.csv, zoo_metrics.json, loss_separation.json           report
//
// Corpora are regenerated from the seed instead of being stored. Apart from
// scan_times.jsonl and the log, outputs depend only on config and seed.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "dbs/attack.hpp"
#include "dbs/config.hpp"
#include "dbs/defense.hpp"
#include "dbs/persist.hpp"

namespace dbs::harness {

namespace fs = std::filesystem;
using json = nlohmann::json;

class TrainingFailure : public Error {
public:
    using Error::Error;
};

class ScanFailure : public Error {
public:
    using Error::Error;
};

// ---------------------------------------------------------------- config ---

struct CorpusSettings {
    std::size_t vocab_size = 512;
    int labels = 2;
    std::size_t train_size = 1000;
    std::size_t test_size = 1000;
    std::size_t host_size = 1000;
    std::size_t defense_per_class = 20;
};

struct ZooSettings {
    std::size_t benign = 20;
    std::size_t trojaned = 20;
    std::size_t trigger_length = 1;
    double poison_rate = 0.1;
    PositionPolicy policy = PositionPolicy::random;
    std::vector<double> phi_values{0.0, 0.5, 1.0};
    std::size_t phi_benign = 10;
    std::size_t phi_trojaned = 10;
    std::size_t sos_benign = 5;
    std::size_t sos_trojaned = 5;
    std::size_t sos_trigger_length = 2;
};

struct DefenseSettings {
    double calibration_fraction = 0.25;
    std::optional<double> beta; // fixed threshold instead of calibration
    bool use_aux = true;
    bool label_specific = false;
    RemovalSettings removal{};
};

struct RunConfig {
    std::uint64_t seed = 1;
    std::string out = "run";
    std::vector<std::string> methods{"dbs"};
    CorpusSettings corpus{};
    TrainConfig training{};
    ZooSettings zoo{};
    DbsConfig dbs{};
    BaselineConfig baseline{};
    DefenseSettings defense{};
};

inline const std::vector<std::string>& known_methods() {
    static const std::vector<std::string> names{"dbs", "no-constraint", "ascc", "uat", "ga", "dbs-no-ts", "dbs-no-bt"};
    return names;
}

inline std::vector<std::string> parse_methods(const std::string& list) {
    std::vector<std::string> out;
    std::stringstream ss(list);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item.erase(0, item.find_first_not_of(" \t"));
        item.erase(item.find_last_not_of(" \t") + 1);
        if (std::find(known_methods().begin(), known_methods().end(), item) == known_methods().end()) {
            throw ConfigError("unknown method '" + item +
                              "' (expected dbs, no-constraint, ascc, uat, ga, dbs-no-ts or dbs-no-bt)");
        }
        out.push_back(item);
    }
    if (out.empty()) throw ConfigError("empty method list");
    return out;
}

inline RunConfig parse_run_config(const ConfigFile& f) {
    RunConfig c;
    auto need = [&](bool ok, const char* section, const char* key, const std::string& msg) {
        if (!ok) throw f.invalid(section, key, msg);
    };

    c.seed = f.get_uint("global", "seed", c.seed);
    c.out = f.get_string("global", "out", c.out);
    try {
        c.methods = parse_methods(f.get_string("global", "methods", "dbs"));
    } catch (const ConfigError& e) {
        throw f.invalid("global", "methods", e.what());
    }

    auto& co = c.corpus;
    co.vocab_size = f.get_uint("corpus", "vocab_size", co.vocab_size);
    co.labels = static_cast<int>(f.get_uint("corpus", "labels", static_cast<std::uint64_t>(co.labels)));
    co.train_size = f.get_uint("corpus", "train_size", co.train_size);
    co.test_size = f.get_uint("corpus", "test_size", co.test_size);
    co.host_size = f.get_uint("corpus", "host_size", co.host_size);
    co.defense_per_class = f.get_uint("corpus", "defense_per_class", co.defense_per_class);
    need(co.labels >= 2, "corpus", "labels", "need at least 2 labels");
    need(co.defense_per_class >= 1, "corpus", "defense_per_class", "must be at least 1");
    for (auto [key, value] : {std::pair{"train_size", co.train_size}, std::pair{"test_size", co.test_size},
                              std::pair{"host_size", co.host_size}}) {
        need(value >= 50 * static_cast<std::size_t>(co.labels), "corpus", key, "must be at least 50 per label");
    }

    auto& tr = c.training;
    tr.epochs = f.get_uint("training", "epochs", tr.epochs);
    tr.batch_size = f.get_uint("training", "batch_size", tr.batch_size);
    tr.lr = f.get_double("training", "lr", tr.lr);
    tr.embedding_decay = f.get_double("training", "embedding_decay", tr.embedding_decay);
    tr.linear_decay = f.get_bool("training", "linear_decay", tr.linear_decay);
    tr.shape.embed_dim = f.get_uint("training", "embed_dim", tr.shape.embed_dim);
    tr.shape.token_dim = f.get_uint("training", "token_dim", tr.shape.token_dim);
    tr.shape.hidden = f.get_uint("training", "hidden", tr.shape.hidden);
    tr.shape.embedding_scale =
        static_cast<float>(f.get_double("training", "embedding_scale", tr.shape.embedding_scale));
    need(tr.batch_size >= 1, "training", "batch_size", "must be at least 1");
    need(tr.lr > 0.0, "training", "lr", "must be positive");
    need(tr.embedding_decay >= 0.0 && tr.lr * tr.embedding_decay < 1.0, "training", "embedding_decay",
         "need 0 <= lr * embedding_decay < 1");
    need(tr.shape.embed_dim >= 1, "training", "embed_dim", "must be at least 1");
    need(tr.shape.token_dim >= 1, "training", "token_dim", "must be at least 1");
    need(tr.shape.hidden >= 1, "training", "hidden", "must be at least 1");
    need(tr.shape.embedding_scale > 0.0f, "training", "embedding_scale", "must be positive");

    auto& z = c.zoo;
    z.benign = f.get_uint("zoo", "benign", z.benign);
    z.trojaned = f.get_uint("zoo", "trojaned", z.trojaned);
    z.trigger_length = f.get_uint("zoo", "trigger_length", z.trigger_length);
    z.poison_rate = f.get_double("zoo", "poison_rate", z.poison_rate);
    try {
        z.policy = parse_position_policy(f.get_string("zoo", "position_policy", to_string(z.policy)));
    } catch (const Error& e) {
        throw f.invalid("zoo", "position_policy", e.what());
    }
    z.phi_values = f.get_doubles("zoo", "phi_values", z.phi_values);
    z.phi_benign = f.get_uint("zoo", "phi_benign", z.phi_benign);
    z.phi_trojaned = f.get_uint("zoo", "phi_trojaned", z.phi_trojaned);
    z.sos_benign = f.get_uint("zoo", "sos_benign", z.sos_benign);
    z.sos_trojaned = f.get_uint("zoo", "sos_trojaned", z.sos_trojaned);
    z.sos_trigger_length = f.get_uint("zoo", "sos_trigger_length", z.sos_trigger_length);
    need(z.trigger_length >= 1 && z.trigger_length <= 4, "zoo", "trigger_length", "must be in [1, 4]");
    need(z.sos_trigger_length >= 2 && z.sos_trigger_length <= 4, "zoo", "sos_trigger_length", "must be in [2, 4]");
    need(z.poison_rate > 0.0 && z.poison_rate <= 0.5, "zoo", "poison_rate", "must be in (0, 0.5]");
    for (double phi : z.phi_values) need(phi >= 0.0, "zoo", "phi_values", "phi must be non-negative");
    need(z.benign + z.trojaned > 0, "zoo", "benign", "zoo is empty");

    auto& d = c.dbs;
    d.m = f.get_uint("dbs", "m", d.m);
    d.c = f.get_double("dbs", "c", d.c);
    d.d = f.get_double("dbs", "d", d.d);
    d.u = f.get_double("dbs", "u", d.u);
    d.delta = f.get_double("dbs", "delta", d.delta);
    d.beta_prime = f.get_double("dbs", "beta_prime", d.beta_prime);
    d.s = f.get_uint("dbs", "s", d.s);
    d.max_epochs = f.get_uint("dbs", "max_epochs", d.max_epochs);
    d.lr = f.get_double("dbs", "lr", d.lr);
    d.onehot_tol = f.get_double("dbs", "onehot_tol", d.onehot_tol);
    d.lambda_init = f.get_double("dbs", "lambda_init", d.u);
    d.init_scale = f.get_double("dbs", "init_scale", d.init_scale);
    d.aux_weight = f.get_double("dbs", "aux_weight", d.aux_weight);
    d.disable_temperature_scaling = f.get_bool("dbs", "disable_temperature_scaling", false);
    d.disable_backtracking = f.get_bool("dbs", "disable_backtracking", false);
    d.randomize_at_cap = f.get_bool("dbs", "randomize_at_cap", d.randomize_at_cap);
    try {
        d.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(f.source() + ": [dbs] " + e.what());
    }

    auto& b = c.baseline;
    b.m = d.m;
    b.max_epochs = d.max_epochs;
    b.lr = d.lr;
    b.init_scale = d.init_scale;
    b.onehot_tol = d.onehot_tol;
    b.aux_weight = d.aux_weight;
    b.ascc_sparsity_coeff = f.get_double("baselines", "ascc_sparsity_coeff", b.ascc_sparsity_coeff);
    b.uat_k = f.get_uint("baselines", "uat_k", b.uat_k);
    b.ga_population = f.get_uint("baselines", "ga_population", b.ga_population);
    b.ga_mutation = f.get_double("baselines", "ga_mutation", b.ga_mutation);
    b.ga_generations = f.get_uint("baselines", "ga_generations", b.ga_generations);
    b.ga_tournament = f.get_uint("baselines", "ga_tournament", b.ga_tournament);
    try {
        b.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(f.source() + ": [baselines] " + e.what());
    }

    auto& df = c.defense;
    df.calibration_fraction = f.get_double("defense", "calibration_fraction", df.calibration_fraction);
    need(df.calibration_fraction > 0.0 && df.calibration_fraction < 1.0, "defense", "calibration_fraction",
         "must be in (0, 1)");
    if (f.has("defense", "beta")) {
        df.beta = f.get_double("defense", "beta", 0.0);
        need(*df.beta > 0.0, "defense", "beta", "must be positive");
    }
    df.use_aux = f.get_bool("defense", "use_aux", df.use_aux);
    df.label_specific = f.get_bool("defense", "label_specific", df.label_specific);
    auto& rm = df.removal;
    rm.data_fraction = f.get_double("defense", "removal_data_fraction", rm.data_fraction);
    rm.stamp_fraction = f.get_double("defense", "removal_stamp_fraction", rm.stamp_fraction);
    rm.epochs = f.get_uint("defense", "removal_epochs", rm.epochs);
    rm.lr = f.get_double("defense", "removal_lr", rm.lr);
    need(rm.data_fraction > 0.0 && rm.data_fraction <= 1.0, "defense", "removal_data_fraction", "must be in (0, 1]");
    need(rm.stamp_fraction >= 0.0 && rm.stamp_fraction <= 1.0, "defense", "removal_stamp_fraction",
         "must be in [0, 1]");
    need(rm.lr > 0.0, "defense", "removal_lr", "must be positive");

    f.reject_unused();
    return c;
}

inline RunConfig load_run_config(const fs::path& path) { return parse_run_config(ConfigFile::load(path)); }

// ------------------------------------------------------------- utilities ---

inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    std::ostringstream out;
    out << std::hex << std::setw(16) << std::setfill('0') << v;
    return out.str();
}

// Runs fn(i) for i in [0, n) on up to `jobs` threads. Returns the error
// message of every failed index.
inline std::map<std::size_t, std::string> parallel_for(std::size_t n, std::size_t jobs,
                                                       const std::function<void(std::size_t)>& fn) {
    std::map<std::size_t, std::string> failures;
    std::mutex mu;
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < n; i = next++) {
            try {
                fn(i);
            } catch (const std::exception& e) {
                std::lock_guard lock(mu);
                failures[i] = e.what();
            }
        }
    };
    jobs = std::max<std::size_t>(1, std::min(jobs, n));
    if (jobs == 1) {
        worker();
        return failures;
    }
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    return failures;
}

inline std::size_t default_jobs() { return std::max(1u, std::thread::hardware_concurrency()); }

inline void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out << text;
}

inline std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("missing artifact " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

inline json read_json(const fs::path& path) {
    try {
        return json::parse(read_text(path));
    } catch (const json::exception& e) {
        throw ConfigError(path.string() + ": malformed JSON: " + e.what());
    }
}

inline std::vector<json> read_jsonl(const fs::path& path) {
    std::vector<json> out;
    std::istringstream in(read_text(path));
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.empty()) continue;
        try {
            out.push_back(json::parse(line));
        } catch (const json::exception& e) {
            throw ConfigError(path.string() + ":" + std::to_string(n) + ": malformed JSON line: " + e.what());
        }
    }
    return out;
}

using Log = std::function<void(const std::string&)>;

inline Log stderr_log() {
    static std::mutex mu;
    return [](const std::string& line) {
        std::lock_guard lock(mu);
        std::cerr << line << "\n";
    };
}

// --------------------------------------------------------------- corpora ---

struct Corpora {
    Vocabulary vocab;
    std::vector<LabeledText> train;
    std::vector<LabeledText> test;
    std::vector<LabeledText> hosts;   // poisoning hosts, disjoint from train
    std::vector<LabeledText> defense; // the defender's few clean samples
};

inline Corpora make_corpora(const CorpusSettings& s, std::uint64_t seed) {
    Corpora c;
    c.vocab = Vocabulary::synthetic(s.vocab_size);
    c.train = synth_corpus(derive_seed(seed, 0xC1), s.train_size, s.labels, c.vocab);
    c.test = synth_corpus(derive_seed(seed, 0xC2), s.test_size, s.labels, c.vocab);
    c.hosts = synth_corpus(derive_seed(seed, 0xC3), s.host_size, s.labels, c.vocab);
    const auto pool = synth_corpus(derive_seed(seed, 0xC4),
                                   std::max<std::size_t>(50, 4 * s.defense_per_class) * static_cast<std::size_t>(s.labels),
                                   s.labels, c.vocab);
    std::vector<std::size_t> taken(static_cast<std::size_t>(s.labels), 0);
    for (const auto& t : pool) {
        auto& n = taken[static_cast<std::size_t>(t.label)];
        if (n < s.defense_per_class) {
            c.defense.push_back(t);
            ++n;
        }
    }
    return c;
}

// -------------------------------------------------------------- manifest ---

struct ZooEntry {
    std::string id;
    std::string model_path; // relative to the run directory
    bool trojaned = false;
    std::vector<std::string> zoos;
    std::string fingerprint;
    std::uint64_t seed = 0;
    std::optional<PoisonConfig> poison;
    std::optional<double> asr;
    double clean_accuracy = 0.0;
    std::string bundle_hash;
};

inline json to_json(const ZooEntry& e) {
    json j = {{"id", e.id},
              {"model_path", e.model_path},
              {"ground_truth", e.trojaned ? "trojaned" : "benign"},
              {"zoos", e.zoos},
              {"fingerprint", e.fingerprint},
              {"seed", e.seed},
              {"clean_accuracy", e.clean_accuracy},
              {"bundle_hash", e.bundle_hash}};
    j["asr"] = e.asr ? json(*e.asr) : json(nullptr);
    if (e.poison) {
        const auto& p = *e.poison;
        j["poison"] = {{"trigger", p.trigger_tokens},
                       {"target_label", p.target_label},
                       {"victim_label", p.victim_label ? json(*p.victim_label) : json(nullptr)},
                       {"position_policy", to_string(p.position_policy)},
                       {"poison_rate", p.poison_rate},
                       {"phi", p.phi},
                       {"sos_augment", p.sos_augment}};
    }
    return j;
}

inline ZooEntry zoo_entry_from_json(const json& j) {
    ZooEntry e;
    e.id = j.at("id").get<std::string>();
    e.model_path = j.at("model_path").get<std::string>();
    const auto truth = j.at("ground_truth").get<std::string>();
    if (truth != "trojaned" && truth != "benign") throw ConfigError("manifest: bad ground_truth '" + truth + "'");
    e.trojaned = truth == "trojaned";
    e.zoos = j.at("zoos").get<std::vector<std::string>>();
    e.fingerprint = j.at("fingerprint").get<std::string>();
    e.seed = j.at("seed").get<std::uint64_t>();
    e.clean_accuracy = j.at("clean_accuracy").get<double>();
    e.bundle_hash = j.at("bundle_hash").get<std::string>();
    if (!j.at("asr").is_null()) e.asr = j.at("asr").get<double>();
    if (j.contains("poison")) {
        const auto& p = j.at("poison");
        PoisonConfig pc;
        pc.trigger_tokens = p.at("trigger").get<std::vector<std::int32_t>>();
        pc.target_label = p.at("target_label").get<int>();
        if (!p.at("victim_label").is_null()) pc.victim_label = p.at("victim_label").get<int>();
        pc.position_policy = parse_position_policy(p.at("position_policy").get<std::string>());
        pc.poison_rate = p.at("poison_rate").get<double>();
        pc.phi = p.at("phi").get<double>();
        pc.sos_augment = p.at("sos_augment").get<bool>();
        e.poison = pc;
    }
    return e;
}

inline std::vector<ZooEntry> load_manifest(const fs::path& dir) {
    const auto j = read_json(dir / "manifest.json");
    if (!j.is_array()) throw ConfigError((dir / "manifest.json").string() + ": expected a JSON array");
    std::vector<ZooEntry> out;
    try {
        for (const auto& item : j) out.push_back(zoo_entry_from_json(item));
    } catch (const json::exception& e) {
        throw ConfigError((dir / "manifest.json").string() + ": " + e.what());
    }
    if (out.empty()) throw ConfigError((dir / "manifest.json").string() + ": empty manifest");
    return out;
}

inline std::string phi_zoo_name(double phi) {
    std::ostringstream out;
    out << "phi=" << phi;
    return out.str();
}

// ------------------------------------------------------------- build-zoo ---

struct ModelPlan {
    ZooEntry entry;
    bool train = true; // false: entry re-tagged from another plan
};

inline std::vector<ModelPlan> plan_zoo(const RunConfig& cfg, const CorpusLayout& layout) {
    const auto& z = cfg.zoo;
    auto seed_for = [&](const std::string& id) { return derive_seed(cfg.seed, fnv1a(id)); };
    auto id_for = [](const std::string& prefix, std::size_t i) {
        std::ostringstream out;
        out << prefix << std::setw(3) << std::setfill('0') << i;
        return out.str();
    };
    auto poison_for = [&](std::uint64_t seed, std::size_t length, double phi, bool sos) {
        Rng rng = make_rng(seed, 0x7E1);
        PoisonConfig p;
        auto filler = layout.filler;
        std::shuffle(filler.begin(), filler.end(), rng);
        p.trigger_tokens.assign(filler.begin(), filler.begin() + static_cast<std::ptrdiff_t>(length));
        p.target_label = static_cast<int>(rng() % static_cast<std::uint64_t>(cfg.corpus.labels));
        p.position_policy = z.policy;
        p.poison_rate = z.poison_rate;
        p.phi = phi;
        p.sos_augment = sos;
        return p;
    };

    std::vector<ModelPlan> plans;
    const std::size_t benign_total = std::max({z.benign, z.phi_values.empty() ? 0 : z.phi_benign, z.sos_benign});
    for (std::size_t i = 0; i < benign_total; ++i) {
        ZooEntry e;
        e.id = id_for("benign-", i);
        e.seed = seed_for(e.id);
        e.fingerprint = "clean";
        if (i < z.benign) e.zoos.push_back("default");
        if (i < z.phi_benign)
            for (double phi : z.phi_values) e.zoos.push_back(phi_zoo_name(phi));
        if (i < z.sos_benign) e.zoos.push_back("sos");
        plans.push_back({e, true});
    }
    std::vector<std::size_t> default_trojans;
    for (std::size_t i = 0; i < z.trojaned; ++i) {
        ZooEntry e;
        e.id = id_for("trojan-", i);
        e.seed = seed_for(e.id);
        e.trojaned = true;
        e.poison = poison_for(e.seed, z.trigger_length, 0.0, false);
        e.fingerprint = e.poison->fingerprint();
        e.zoos.push_back("default");
        default_trojans.push_back(plans.size());
        plans.push_back({e, true});
    }
    for (double phi : z.phi_values) {
        for (std::size_t i = 0; i < z.phi_trojaned; ++i) {
            if (phi == 0.0 && i < default_trojans.size()) {
                plans[default_trojans[i]].entry.zoos.push_back(phi_zoo_name(phi));
                continue;
            }
            ZooEntry e;
            std::ostringstream prefix;
            prefix << "phi" << phi << "-trojan-";
            e.id = id_for(prefix.str(), i);
            e.seed = seed_for(e.id);
            e.trojaned = true;
            e.poison = poison_for(e.seed, z.trigger_length, phi, false);
            e.fingerprint = e.poison->fingerprint();
            e.zoos.push_back(phi_zoo_name(phi));
            plans.push_back({e, true});
        }
    }
    for (std::size_t i = 0; i < z.sos_trojaned; ++i) {
        ZooEntry e;
        e.id = id_for("sos-trojan-", i);
        e.seed = seed_for(e.id);
        e.trojaned = true;
        e.poison = poison_for(e.seed, z.sos_trigger_length, 0.0, true);
        e.fingerprint = e.poison->fingerprint();
        e.zoos.push_back("sos");
        plans.push_back({e, true});
    }
    return plans;
}

inline TrainConfig training_for(const RunConfig& cfg, std::uint64_t seed) {
    TrainConfig tc = cfg.training;
    tc.seed = seed;
    return tc;
}

inline fs::path aux_path(const fs::path& dir) { return dir / "aux_benign.bin"; }

inline std::string bundle_hash(const ClassifierBundle& b) {
    const auto bytes = serialize_bundle(b);
    return hex64(fnv1a(std::string_view(bytes.data(), bytes.size())));
}

// Trains the auxiliary benign model and every zoo member; writes the
// manifest (completed members only when some training fails).
inline std::vector<ZooEntry> build_zoo(const RunConfig& cfg, const fs::path& dir, std::size_t jobs, const Log& log) {
    fs::create_directories(dir / "models");
    const auto data = make_corpora(cfg.corpus, cfg.seed);
    const auto layout = CorpusLayout::make(data.vocab, cfg.corpus.labels);
    auto plans = plan_zoo(cfg, layout);

    json info = {{"seed", cfg.seed},
                 {"vocab_size", cfg.corpus.vocab_size},
                 {"labels", cfg.corpus.labels},
                 {"train_size", cfg.corpus.train_size},
                 {"test_size", cfg.corpus.test_size},
                 {"host_size", cfg.corpus.host_size},
                 {"defense_per_class", cfg.corpus.defense_per_class}};
    write_text(dir / "build_info.json", info.dump(2) + "\n");

    std::vector<std::optional<ZooEntry>> done(plans.size());
    // Index plans.size() is the auxiliary model.
    auto failures = parallel_for(plans.size() + 1, jobs, [&](std::size_t i) {
        if (i == plans.size()) {
            auto aux = train(data.train, data.vocab, cfg.corpus.labels, training_for(cfg, derive_seed(cfg.seed, 0xA0A)));
            aux.bundle.meta.dataset_id = "train-" + std::to_string(cfg.seed);
            save_bundle(aux.bundle, aux_path(dir));
            log("[build-zoo] auxiliary benign model trained");
            return;
        }
        ZooEntry e = plans[i].entry;
        const auto tc = training_for(cfg, e.seed);
        ClassifierBundle bundle;
        try {
            if (e.poison) {
                bundle = train_trojaned(build_poisoned_dataset(data.train, data.hosts, *e.poison, e.seed), data.vocab,
                                        cfg.corpus.labels, *e.poison, tc);
            } else {
                bundle = train(data.train, data.vocab, cfg.corpus.labels, tc).bundle;
            }
        } catch (const NumericError& err) {
            throw TrainingFailure(e.id + ": " + err.what());
        }
        bundle.meta.dataset_id = "train-" + std::to_string(cfg.seed);
        e.model_path = "models/" + e.id + ".bin";
        save_bundle(bundle, dir / e.model_path);
        e.bundle_hash = bundle_hash(bundle);
        if (e.poison) {
            const auto rep = measure_asr(bundle, data.test, e.poison->trigger_tokens, e.poison->target_label,
                                         e.poison->victim_label, e.poison->position_policy, e.seed);
            e.asr = rep.asr;
            e.clean_accuracy = rep.clean_accuracy;
        } else {
            e.clean_accuracy = accuracy(bundle, data.test);
        }
        std::ostringstream msg;
        msg << "[build-zoo] " << e.id << " clean_acc=" << std::fixed << std::setprecision(3) << e.clean_accuracy;
        if (e.asr) msg << " asr=" << *e.asr;
        log(msg.str());
        done[i] = std::move(e);
    });

    json manifest = json::array();
    std::vector<ZooEntry> entries;
    for (auto& d : done) {
        if (!d) continue;
        manifest.push_back(to_json(*d));
        entries.push_back(*d);
    }
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");
    if (!failures.empty()) {
        std::string msg = std::to_string(failures.size()) + " model(s) failed to train:";
        for (const auto& [i, what] : failures) msg += "\n  " + what;
        throw TrainingFailure(msg);
    }
    return entries;
}

// ----------------------------------------------------------------- scans ---

// The two dbs-* names are the ablations: temperature pinned, or failing
// checks that never roll back.
inline ScanSettings scan_settings(const RunConfig& cfg, const std::string& method, const ClassifierBundle* aux) {
    parse_methods(method);
    ScanSettings s;
    s.dbs = cfg.dbs;
    s.baseline = cfg.baseline;
    s.label_specific = cfg.defense.label_specific;
    s.dbs.aux_benign = aux;
    s.baseline.aux_benign = aux;
    if (method == "dbs-no-ts") s.dbs.disable_temperature_scaling = true;
    if (method == "dbs-no-bt") s.dbs.disable_backtracking = true;
    s.method = method.rfind("dbs", 0) == 0 ? ScanMethod::dbs : parse_scan_method(method);
    return s;
}

inline json to_json(const TriggerEstimate& e) {
    return {{"method", e.method},
            {"target_label", e.target_label},
            {"victim_label", e.victim_label ? json(*e.victim_label) : json(nullptr)},
            {"tokens", e.token_ids},
            {"loss", e.loss},
            {"relaxed_loss", e.relaxed_loss},
            {"score", e.score},
            {"one_hot", e.one_hot}};
}

inline json to_json(const ScanRecord& r) {
    json per_label = json::array();
    for (const auto& e : r.estimates) per_label.push_back(to_json(e));
    return {{"model_id", r.model_id},
            {"method", r.method},
            {"seed", r.seed},
            {"beta", r.beta},
            {"verdict", r.verdict},
            {"best",
             {{"tokens", r.best_tokens},
              {"target_label", r.best_target},
              {"victim_label", r.best_victim ? json(*r.best_victim) : json(nullptr)},
              {"loss", r.best_loss}}},
            {"per_label", per_label}};
}

inline ScanRecord scan_record_from_json(const json& j) {
    ScanRecord r;
    r.model_id = j.at("model_id").get<std::string>();
    r.method = j.at("method").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.beta = j.at("beta").get<double>();
    r.verdict = j.at("verdict").get<int>();
    const auto& best = j.at("best");
    r.best_tokens = best.at("tokens").get<std::vector<std::int32_t>>();
    r.best_target = best.at("target_label").get<int>();
    if (!best.at("victim_label").is_null()) r.best_victim = best.at("victim_label").get<int>();
    r.best_loss = best.at("loss").get<double>();
    for (const auto& p : j.at("per_label")) {
        TriggerEstimate e;
        e.method = p.at("method").get<std::string>();
        e.target_label = p.at("target_label").get<int>();
        if (!p.at("victim_label").is_null()) e.victim_label = p.at("victim_label").get<int>();
        e.token_ids = p.at("tokens").get<std::vector<std::int32_t>>();
        e.loss = p.at("loss").get<double>();
        e.relaxed_loss = p.at("relaxed_loss").get<double>();
        e.score = p.at("score").get<double>();
        e.one_hot = p.at("one_hot").get<bool>();
        r.estimates.push_back(std::move(e));
    }
    return r;
}

inline std::vector<ScanRecord> load_scan_records(const fs::path& file) {
    std::vector<ScanRecord> out;
    try {
        for (const auto& j : read_jsonl(file)) out.push_back(scan_record_from_json(j));
    } catch (const json::exception& e) {
        throw ConfigError(file.string() + ": " + e.what());
    }
    return out;
}

inline fs::path method_dir(const fs::path& dir, const std::string& method) { return dir / "scans" / method; }

inline std::uint64_t scan_seed(std::uint64_t seed, const std::string& model_id) {
    return derive_seed(seed, fnv1a(model_id));
}

struct ScanOutput {
    ScanRecord record;
    std::string trajectory_lines;
};

inline ScanOutput scan_model(const fs::path& dir, const ZooEntry& entry, const ScanSettings& settings,
                             const Corpora& data, double beta, std::uint64_t seed) {
    ClassifierBundle bundle;
    try {
        bundle = load_bundle(dir / entry.model_path);
    } catch (const LoadError& e) {
        throw ScanFailure(entry.id + ": " + e.what());
    }
    const auto t0 = std::chrono::steady_clock::now();
    const auto s = scan_seed(seed, entry.id);
    ScanOutput out;
    out.record = make_scan_record(entry.id, optimal_trigger_estimation(bundle, data.defense, settings, s), beta,
                                  settings.method, s);
    out.record.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::ostringstream traj;
    for (const auto& e : out.record.estimates) {
        for (const auto& p : e.trajectory) {
            json line = {{"model_id", entry.id},
                         {"method", e.method},
                         {"target_label", e.target_label},
                         {"victim_label", e.victim_label ? json(*e.victim_label) : json(nullptr)},
                         {"epoch", p.epoch},
                         {"relaxed_loss", p.relaxed_loss},
                         {"discrete_loss", p.discrete_loss ? json(*p.discrete_loss) : json(nullptr)},
                         {"lambda", p.lambda},
                         {"event", to_string(p.event)}};
            traj << line.dump() << "\n";
        }
    }
    out.trajectory_lines = traj.str();
    return out;
}

struct ScanContext {
    std::vector<ZooEntry> manifest;
    Corpora data;
    std::optional<ClassifierBundle> aux;
};

// Corpora of a built run, regenerated from build_info.json so that later
// stages see the zoo's data whatever seed they run with.
inline Corpora run_corpora(const fs::path& dir) {
    const auto info = read_json(dir / "build_info.json");
    CorpusSettings s;
    try {
        s.vocab_size = info.at("vocab_size").get<std::size_t>();
        s.labels = info.at("labels").get<int>();
        s.train_size = info.at("train_size").get<std::size_t>();
        s.test_size = info.at("test_size").get<std::size_t>();
        s.host_size = info.at("host_size").get<std::size_t>();
        s.defense_per_class = info.at("defense_per_class").get<std::size_t>();
        return make_corpora(s, info.at("seed").get<std::uint64_t>());
    } catch (const json::exception& e) {
        throw ConfigError((dir / "build_info.json").string() + ": " + e.what());
    }
}

inline ScanContext open_run(const RunConfig& cfg, const fs::path& dir) {
    ScanContext ctx{load_manifest(dir), run_corpora(dir), std::nullopt};
    if (cfg.defense.use_aux) {
        try {
            ctx.aux = load_bundle(aux_path(dir));
        } catch (const LoadError& e) {
            throw ConfigError(std::string("auxiliary model: ") + e.what());
        }
    }
    return ctx;
}

// Stratified calibration subset of one zoo: ceil(fraction * n) models of
// each class, picked by a seeded shuffle.
inline std::vector<std::string> calibration_subset(const std::vector<ZooEntry>& manifest, const std::string& zoo,
                                                   double fraction, std::uint64_t seed) {
    std::vector<std::string> picked;
    for (bool trojaned : {true, false}) {
        std::vector<std::string> ids;
        for (const auto& e : manifest)
            if (e.trojaned == trojaned && std::find(e.zoos.begin(), e.zoos.end(), zoo) != e.zoos.end())
                ids.push_back(e.id);
        Rng rng = make_rng(seed, fnv1a("calibration:" + zoo) + (trojaned ? 1 : 0));
        std::shuffle(ids.begin(), ids.end(), rng);
        const auto n = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(ids.size())));
        picked.insert(picked.end(), ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(std::min(n, ids.size())));
    }
    std::sort(picked.begin(), picked.end());
    return picked;
}

inline std::vector<std::string> zoo_names(const std::vector<ZooEntry>& manifest) {
    std::vector<std::string> names;
    for (const auto& e : manifest)
        for (const auto& z : e.zoos)
            if (std::find(names.begin(), names.end(), z) == names.end()) names.push_back(z);
    return names;
}

// Scans the calibration subset of every zoo and stores one threshold per zoo.
inline json calibrate(const RunConfig& cfg, const fs::path& dir, const std::string& method, std::uint64_t seed,
                      std::size_t jobs, const Log& log) {
    auto ctx = open_run(cfg, dir);
    const auto settings = scan_settings(cfg, method, ctx.aux ? &*ctx.aux : nullptr);
    std::map<std::string, std::vector<std::string>> subsets;
    std::set<std::string> needed;
    for (const auto& zoo : zoo_names(ctx.manifest)) {
        subsets[zoo] = calibration_subset(ctx.manifest, zoo, cfg.defense.calibration_fraction, seed);
        needed.insert(subsets[zoo].begin(), subsets[zoo].end());
    }
    std::vector<const ZooEntry*> todo;
    for (const auto& e : ctx.manifest)
        if (needed.count(e.id)) todo.push_back(&e);
    std::vector<double> scores(todo.size());
    auto failures = parallel_for(todo.size(), jobs, [&](std::size_t i) {
        // beta is irrelevant here; verdicts are recomputed per zoo.
        scores[i] = scan_model(dir, *todo[i], settings, ctx.data, 1.0, seed).record.best_loss;
        log("[calibrate] " + method + " " + todo[i]->id + " score=" + std::to_string(scores[i]));
    });
    if (!failures.empty()) throw ScanFailure("calibration scan failed: " + failures.begin()->second);
    std::map<std::string, std::pair<double, bool>> by_id;
    for (std::size_t i = 0; i < todo.size(); ++i) by_id[todo[i]->id] = {scores[i], todo[i]->trojaned};

    json out = {{"method", method}, {"seed", seed}, {"fraction", cfg.defense.calibration_fraction}, {"zoos", json::object()}};
    for (const auto& [zoo, ids] : subsets) {
        std::vector<std::pair<double, bool>> scored;
        json models = json::array();
        for (const auto& id : ids) {
            scored.push_back(by_id.at(id));
            models.push_back({{"model_id", id}, {"score", by_id.at(id).first}, {"trojaned", by_id.at(id).second}});
        }
        Calibration cal;
        try {
            cal = calibrate_threshold(scored);
        } catch (const EvaluationError& e) {
            throw ConfigError("calibration of zoo '" + zoo + "': " + e.what());
        }
        out["zoos"][zoo] = {{"beta", cal.beta}, {"accuracy", cal.accuracy}, {"models", models}};
    }
    write_text(method_dir(dir, method) / "calibration.json", out.dump(2) + "\n");
    return out;
}

// Threshold per zoo: the fixed override when configured, else the stored
// calibration.
inline json thresholds_for(const RunConfig& cfg, const fs::path& dir, const std::string& method,
                           const std::vector<ZooEntry>& manifest) {
    json t = json::object();
    if (cfg.defense.beta) {
        for (const auto& zoo : zoo_names(manifest))
            t[zoo] = {{"beta", *cfg.defense.beta}, {"source", "override"}, {"calibration_models", json::array()}};
        return t;
    }
    const auto file = method_dir(dir, method) / "calibration.json";
    if (!fs::exists(file)) {
        throw ConfigError("no threshold for method '" + method + "': run calibrate first or set [defense] beta");
    }
    const auto cal = read_json(file);
    for (const auto& zoo : zoo_names(manifest)) {
        if (!cal.at("zoos").contains(zoo)) throw ConfigError(file.string() + ": zoo '" + zoo + "' was not calibrated");
        json ids = json::array();
        for (const auto& m : cal["zoos"][zoo]["models"]) ids.push_back(m.at("model_id"));
        t[zoo] = {{"beta", cal["zoos"][zoo]["beta"]}, {"source", "calibrated"}, {"calibration_models", ids}};
    }
    return t;
}

// Scans every manifest model. A model's verdict uses the threshold of the
// first zoo it belongs to; reports recompute verdicts per zoo.
inline std::vector<ScanRecord> scan(const RunConfig& cfg, const fs::path& dir, const std::string& method,
                                    std::uint64_t seed, std::size_t jobs, const Log& log) {
    auto ctx = open_run(cfg, dir);
    const auto settings = scan_settings(cfg, method, ctx.aux ? &*ctx.aux : nullptr);
    const auto thresholds = thresholds_for(cfg, dir, method, ctx.manifest);
    std::vector<std::optional<ScanOutput>> outputs(ctx.manifest.size());
    auto failures = parallel_for(ctx.manifest.size(), jobs, [&](std::size_t i) {
        const auto& e = ctx.manifest[i];
        const double beta = thresholds.at(e.zoos.front()).at("beta").get<double>();
        outputs[i] = scan_model(dir, e, settings, ctx.data, beta, seed);
        const auto& r = outputs[i]->record;
        std::ostringstream msg;
        msg << "[scan] " << method << " " << e.id << " score=" << std::setprecision(4) << r.best_loss
            << " verdict=" << r.verdict << " (" << std::fixed << std::setprecision(1) << r.wall_time << "s)";
        log(msg.str());
    });

    const auto out_dir = method_dir(dir, method);
    std::string results, times, trajectories;
    std::vector<ScanRecord> records;
    for (std::size_t i = 0; i < outputs.size(); ++i) {
        if (!outputs[i]) {
            json err = {{"model_id", ctx.manifest[i].id}, {"method", method}, {"error", failures.at(i)}};
            results += err.dump() + "\n";
            continue;
        }
        results += to_json(outputs[i]->record).dump() + "\n";
        std::ostringstream t;
        t << std::fixed << std::setprecision(1) << outputs[i]->record.wall_time;
        times += json({{"model_id", ctx.manifest[i].id}, {"wall_time", std::stod(t.str())}}).dump() + "\n";
        trajectories += outputs[i]->trajectory_lines;
        records.push_back(outputs[i]->record);
    }
    write_text(out_dir / "scan_results.jsonl", results);
    write_text(out_dir / "scan_times.jsonl", times);
    write_text(out_dir / "trajectories.jsonl", trajectories);
    write_text(out_dir / "thresholds.json", thresholds.dump(2) + "\n");
    if (!failures.empty()) {
        std::string msg = std::to_string(failures.size()) + " model(s) could not be scanned:";
        for (const auto& [i, what] : failures) msg += "\n  " + what;
        throw ScanFailure(msg);
    }
    return records;
}

// --------------------------------------------------------------- removal ---

inline json remove_backdoors(const RunConfig& cfg, const fs::path& dir, const std::string& method, std::uint64_t seed,
                   std::size_t jobs, const Log& log) {
    const auto manifest = load_manifest(dir);
    const auto data = run_corpora(dir);
    std::map<std::string, ScanRecord> records;
    for (auto& r : load_scan_records(method_dir(dir, method) / "scan_results.jsonl")) records[r.model_id] = r;

    struct Job {
        const ZooEntry* entry;
        const ScanRecord* record;
    };
    std::vector<Job> todo;
    json skipped = json::array();
    for (const auto& e : manifest) {
        auto it = records.find(e.id);
        if (it == records.end()) {
            skipped.push_back({{"model_id", e.id}, {"reason", "no scan record"}});
        } else if (it->second.verdict != 1) {
            skipped.push_back({{"model_id", e.id}, {"reason", "verdict 0"}});
            log("[remove] skip " + e.id + " (verdict 0)");
        } else if (!e.poison) {
            skipped.push_back({{"model_id", e.id}, {"reason", "benign model, no ground-truth trigger"}});
            log("[remove] skip " + e.id + " (benign, no ground-truth trigger)");
        } else {
            todo.push_back({&e, &it->second});
        }
    }
    fs::create_directories(dir / "removed");
    std::vector<std::optional<RemovalReport>> reports(todo.size());
    auto failures = parallel_for(todo.size(), jobs, [&](std::size_t i) {
        const auto& e = *todo[i].entry;
        const auto bundle = load_bundle(dir / e.model_path);
        RemovalSettings rs = cfg.defense.removal;
        rs.seed = derive_seed(seed, fnv1a(e.id));
        RemovalProbe probe{data.test, e.poison->trigger_tokens, e.poison->target_label, e.poison->victim_label,
                           e.poison->position_policy};
        auto [cleaned, rep] = remove_backdoor(bundle, data.train, todo[i].record->best_tokens, probe, rs);
        save_bundle(cleaned, dir / "removed" / (e.id + ".bin"));
        std::ostringstream msg;
        msg << "[remove] " << e.id << " asr " << std::fixed << std::setprecision(3) << rep.asr_before << " -> "
            << rep.asr_after << ", clean acc " << rep.clean_acc_before << " -> " << rep.clean_acc_after;
        log(msg.str());
        reports[i] = rep;
    });

    json models = json::array();
    double sums[4] = {0, 0, 0, 0};
    std::size_t n = 0;
    for (std::size_t i = 0; i < todo.size(); ++i) {
        if (!reports[i]) continue;
        const auto& r = *reports[i];
        models.push_back({{"model_id", todo[i].entry->id},
                          {"estimate", todo[i].record->best_tokens},
                          {"clean_acc_before", r.clean_acc_before},
                          {"clean_acc_after", r.clean_acc_after},
                          {"asr_before", r.asr_before},
                          {"asr_after", r.asr_after},
                          {"unlearn_epochs", r.unlearn_epochs}});
        sums[0] += r.clean_acc_before;
        sums[1] += r.clean_acc_after;
        sums[2] += r.asr_before;
        sums[3] += r.asr_after;
        ++n;
    }
    json report = {{"method", method}, {"models", models}, {"skipped", skipped}};
    if (n > 0) {
        const double k = static_cast<double>(n);
        report["mean"] = {{"clean_acc_before", sums[0] / k},
                          {"clean_acc_after", sums[1] / k},
                          {"asr_before", sums[2] / k},
                          {"asr_after", sums[3] / k}};
    } else {
        report["mean"] = nullptr;
    }
    write_text(dir / "removal_report.json", report.dump(2) + "\n");
    if (!failures.empty()) throw ScanFailure("removal failed: " + failures.begin()->second);
    return report;
}

// ---------------------------------------------------------------- report ---

struct ZooReport {
    std::string method;
    std::string zoo;
    ZooMetrics metrics;
    std::vector<double> trojaned_scores; // sorted
    std::vector<double> benign_scores;   // sorted
};

// Metrics per (method, zoo) over models outside the zoo's calibration subset,
// with verdicts recomputed from the stored scores and the zoo threshold.
inline std::vector<ZooReport> aggregate(const fs::path& dir) {
    const auto manifest = load_manifest(dir);
    std::vector<std::string> methods;
    if (fs::exists(dir / "scans")) {
        for (const auto& d : fs::directory_iterator(dir / "scans"))
            if (fs::exists(d.path() / "scan_results.jsonl")) methods.push_back(d.path().filename().string());
    }
    if (methods.empty()) throw ConfigError("no scan results under " + (dir / "scans").string());
    std::sort(methods.begin(), methods.end());

    std::vector<ZooReport> out;
    for (const auto& method : methods) {
        const auto mdir = method_dir(dir, method);
        const auto thresholds = read_json(mdir / "thresholds.json");
        std::map<std::string, double> score, wall;
        std::set<std::string> failed;
        for (const auto& j : read_jsonl(mdir / "scan_results.jsonl")) {
            if (j.contains("error")) failed.insert(j.at("model_id").get<std::string>());
            else score[j.at("model_id").get<std::string>()] = j.at("best").at("loss").get<double>();
        }
        if (fs::exists(mdir / "scan_times.jsonl"))
            for (const auto& j : read_jsonl(mdir / "scan_times.jsonl"))
                wall[j.at("model_id").get<std::string>()] = j.at("wall_time").get<double>();
        for (const auto& zoo : zoo_names(manifest)) {
            if (!thresholds.contains(zoo)) throw ConfigError(method + ": no threshold for zoo '" + zoo + "'");
            const double beta = thresholds[zoo].at("beta").get<double>();
            std::set<std::string> held_out;
            for (const auto& id : thresholds[zoo].at("calibration_models")) held_out.insert(id.get<std::string>());
            ZooReport rep{method, zoo, {}, {}, {}};
            std::vector<ZooOutcome> outcomes;
            for (const auto& e : manifest) {
                if (std::find(e.zoos.begin(), e.zoos.end(), zoo) == e.zoos.end() || held_out.count(e.id)) continue;
                ZooOutcome o;
                o.trojaned = e.trojaned;
                if (auto it = score.find(e.id); it != score.end()) {
                    o.verdict = verdict_for(it->second, beta);
                    o.wall_time = wall.count(e.id) ? wall.at(e.id) : 0.0;
                    (e.trojaned ? rep.trojaned_scores : rep.benign_scores).push_back(it->second);
                }
                outcomes.push_back(o);
            }
            if (outcomes.empty()) continue;
            try {
                rep.metrics = evaluate_zoo(outcomes);
            } catch (const EvaluationError& e) {
                throw ScanFailure(method + "/" + zoo + ": " + e.what());
            }
            std::sort(rep.trojaned_scores.begin(), rep.trojaned_scores.end());
            std::sort(rep.benign_scores.begin(), rep.benign_scores.end());
            out.push_back(std::move(rep));
        }
    }
    return out;
}

inline std::string fixed(double v, int digits) {
    std::ostringstream out;
    out << std::fixed << std::setprecision(digits) << v;
    return out.str();
}

inline std::vector<ZooReport> report(const fs::path& dir, const Log& log) {
    const auto reports = aggregate(dir);
    std::string csv = "method,zoo,models,failed,accuracy,precision,recall,mean_wall_time\n";
    json metrics = json::array();
    json separation = json::object();
    for (const auto& r : reports) {
        const auto& m = r.metrics;
        csv += r.method + "," + r.zoo + "," + std::to_string(m.evaluated) + "," + std::to_string(m.failed) + "," +
               fixed(m.accuracy, 4) + "," + fixed(m.precision, 4) + "," + fixed(m.recall, 4) + "," +
               fixed(m.mean_wall_time, 1) + "\n";
        metrics.push_back({{"method", r.method},
                           {"zoo", r.zoo},
                           {"models", m.evaluated},
                           {"failed", m.failed},
                           {"accuracy", m.accuracy},
                           {"precision", m.precision},
                           {"recall", m.recall},
                           {"true_positive", m.true_positive},
                           {"false_positive", m.false_positive},
                           {"true_negative", m.true_negative},
                           {"false_negative", m.false_negative},
                           {"mean_wall_time", m.mean_wall_time}});
        separation[r.method][r.zoo] = {{"trojaned", r.trojaned_scores}, {"benign", r.benign_scores}};
        log("[report] " + r.method + " " + r.zoo + " acc=" + fixed(m.accuracy, 3) + " prec=" + fixed(m.precision, 3) +
            " rec=" + fixed(m.recall, 3));
    }
    write_text(dir / "zoo_metrics.csv", csv);
    write_text(dir / "zoo_metrics.json", metrics.dump(2) + "\n");
    write_text(dir / "loss_separation.json", separation.dump(2) + "\n");
    return reports;
}

} // namespace dbs::harness
