#pragma once

// Sectioned key/value configuration files:
//
//   # comment            ; comment
//   [section]
//   key = value
//   list = 0, 0.5, 1
//
// Every value remembers its line so validation errors point at the source.
// Keys that are never read are reported by `reject_unused`.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dbs/error.hpp"

namespace dbs {

class ConfigFile {
public:
    struct Entry {
        std::string value;
        std::size_t line = 0;
    };

    static ConfigFile parse(std::string_view text, std::string source = "<config>") {
        ConfigFile cfg;
        cfg.source_ = std::move(source);
        std::string section;
        std::size_t line_no = 0;
        std::istringstream in{std::string(text)};
        std::string raw;
        while (std::getline(in, raw)) {
            ++line_no;
            const auto line = trim(strip_comment(raw));
            if (line.empty()) continue;
            if (line.front() == '[') {
                if (line.back() != ']') throw cfg.error(line_no, "unterminated section header");
                section = std::string(trim(line.substr(1, line.size() - 2)));
                if (section.empty()) throw cfg.error(line_no, "empty section name");
                if (!cfg.section_lines_.emplace(section, line_no).second) {
                    throw cfg.error(line_no, "duplicate section [" + section + "]");
                }
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string_view::npos) throw cfg.error(line_no, "expected 'key = value'");
            if (section.empty()) throw cfg.error(line_no, "key outside of any [section]");
            const std::string key(trim(line.substr(0, eq)));
            if (key.empty()) throw cfg.error(line_no, "missing key before '='");
            const auto full = section + "." + key;
            if (cfg.entries_.count(full)) {
                throw cfg.error(line_no, "duplicate key '" + key + "' in [" + section + "] (first on line " +
                                             std::to_string(cfg.entries_.at(full).line) + ")");
            }
            cfg.entries_[full] = Entry{std::string(trim(line.substr(eq + 1))), line_no};
        }
        return cfg;
    }

    static ConfigFile load(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError(path.string() + ": cannot open config file");
        std::stringstream buf;
        buf << in.rdbuf();
        return parse(buf.str(), path.string());
    }

    const std::string& source() const { return source_; }
    bool has(const std::string& section, const std::string& key) const {
        return entries_.count(section + "." + key) > 0;
    }

    std::string get_string(const std::string& section, const std::string& key, std::string fallback) const {
        const auto* e = find(section, key);
        return e ? e->value : fallback;
    }

    double get_double(const std::string& section, const std::string& key, double fallback) const {
        const auto* e = find(section, key);
        return e ? to_double(section, key, *e, e->value) : fallback;
    }

    std::uint64_t get_uint(const std::string& section, const std::string& key, std::uint64_t fallback) const {
        const auto* e = find(section, key);
        if (!e) return fallback;
        std::uint64_t v = 0;
        const auto& s = e->value;
        auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc() || ptr != s.data() + s.size()) {
            throw error(e->line, "[" + section + "] " + key + ": expected a non-negative integer, got '" + s + "'");
        }
        return v;
    }

    bool get_bool(const std::string& section, const std::string& key, bool fallback) const {
        const auto* e = find(section, key);
        if (!e) return fallback;
        if (e->value == "true" || e->value == "yes" || e->value == "1") return true;
        if (e->value == "false" || e->value == "no" || e->value == "0") return false;
        throw error(e->line, "[" + section + "] " + key + ": expected true or false, got '" + e->value + "'");
    }

    std::vector<double> get_doubles(const std::string& section, const std::string& key,
                                    std::vector<double> fallback) const {
        const auto* e = find(section, key);
        if (!e) return fallback;
        std::vector<double> out;
        std::string_view rest = e->value;
        while (true) {
            const auto comma = rest.find(',');
            const auto item = trim(rest.substr(0, comma));
            if (item.empty()) throw error(e->line, "[" + section + "] " + key + ": empty list item");
            out.push_back(to_double(section, key, *e, std::string(item)));
            if (comma == std::string_view::npos) break;
            rest = rest.substr(comma + 1);
        }
        return out;
    }

    // Error attributed to the line of `section.key` (or the file when absent).
    ConfigError invalid(const std::string& section, const std::string& key, const std::string& message) const {
        const auto* e = find_quiet(section, key);
        return e ? error(e->line, "[" + section + "] " + key + ": " + message)
                 : ConfigError(source_ + ": [" + section + "] " + key + ": " + message);
    }

    void reject_unused() const {
        for (const auto& [full, e] : entries_) {
            if (!used_.count(full)) {
                const auto dot = full.find('.');
                throw error(e.line, "unknown key '" + full.substr(dot + 1) + "' in [" + full.substr(0, dot) + "]");
            }
        }
        for (const auto& [section, line] : section_lines_) {
            bool any = false;
            for (const auto& full : used_) any |= full.rfind(section + ".", 0) == 0;
            if (!any && !known_sections_.count(section)) throw error(line, "unknown section [" + section + "]");
        }
    }

private:
    static std::string_view trim(std::string_view s) {
        const auto first = s.find_first_not_of(" \t\r");
        if (first == std::string_view::npos) return {};
        const auto last = s.find_last_not_of(" \t\r");
        return s.substr(first, last - first + 1);
    }

    static std::string_view strip_comment(std::string_view s) {
        const auto pos = s.find_first_of("#;");
        return pos == std::string_view::npos ? s : s.substr(0, pos);
    }

    ConfigError error(std::size_t line, const std::string& message) const {
        return ConfigError(source_ + ":" + std::to_string(line) + ": " + message);
    }

    const Entry* find_quiet(const std::string& section, const std::string& key) const {
        auto it = entries_.find(section + "." + key);
        return it == entries_.end() ? nullptr : &it->second;
    }

    const Entry* find(const std::string& section, const std::string& key) const {
        known_sections_.insert(section);
        used_.insert(section + "." + key);
        return find_quiet(section, key);
    }

    double to_double(const std::string& section, const std::string& key, const Entry& e, const std::string& s) const {
        try {
            std::size_t pos = 0;
            const double v = std::stod(s, &pos);
            if (pos == s.size() && std::isfinite(v)) return v;
        } catch (const std::exception&) {
        }
        throw error(e.line, "[" + section + "] " + key + ": expected a number, got '" + s + "'");
    }

    std::string source_;
    std::map<std::string, Entry> entries_;
    std::map<std::string, std::size_t> section_lines_;
    mutable std::set<std::string> used_;
    mutable std::set<std::string> known_sections_;
};

} // namespace dbs
