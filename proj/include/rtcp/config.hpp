#pragma once

// Declarative run configuration: a small sectioned key = value format with
// # comments. Errors carry file:line anchors. CLI --set overrides replace
// values after parsing.

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "rtcp/common.hpp"

namespace rtcp {

class Config {
public:
    struct Entry {
        std::string value;
        int line = 0;
    };

    static Config parse_string(const std::string& text,
                               const std::string& origin = "<config>") {
        Config cfg;
        cfg.origin_ = origin;
        std::istringstream in(text);
        std::string line;
        std::string section;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            std::string s = strip_comment(line);
            s = trim(s);
            if (s.empty()) continue;
            if (s.front() == '[') {
                if (s.back() != ']')
                    throw ConfigError(origin + ":" + std::to_string(lineno) +
                                      ": unterminated section header");
                section = trim(s.substr(1, s.size() - 2));
                if (section.empty())
                    throw ConfigError(origin + ":" + std::to_string(lineno) +
                                      ": empty section name");
                continue;
            }
            const auto eq = s.find('=');
            if (eq == std::string::npos)
                throw ConfigError(origin + ":" + std::to_string(lineno) +
                                  ": expected key = value");
            const std::string key = trim(s.substr(0, eq));
            const std::string value = trim(s.substr(eq + 1));
            if (key.empty())
                throw ConfigError(origin + ":" + std::to_string(lineno) +
                                  ": empty key");
            if (section.empty())
                throw ConfigError(origin + ":" + std::to_string(lineno) +
                                  ": key outside any [section]");
            cfg.entries_[section][key] = {value, lineno};
        }
        return cfg;
    }

    static Config parse_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config '" + path + "'");
        std::ostringstream ss;
        ss << in.rdbuf();
        return parse_string(ss.str(), path);
    }

    // "section.key=value" CLI override.
    void set_override(const std::string& assignment) {
        const auto eq = assignment.find('=');
        if (eq == std::string::npos)
            throw ConfigError("override '" + assignment + "' must be section.key=value");
        const std::string path = trim(assignment.substr(0, eq));
        const std::string value = trim(assignment.substr(eq + 1));
        const auto dot = path.find('.');
        if (dot == std::string::npos)
            throw ConfigError("override '" + assignment + "' must be section.key=value");
        entries_[path.substr(0, dot)][path.substr(dot + 1)] = {value, 0};
    }

    bool has(const std::string& sec, const std::string& key) const {
        const auto s = entries_.find(sec);
        return s != entries_.end() && s->second.count(key) > 0;
    }

    std::string get_str(const std::string& sec, const std::string& key,
                        const std::string& fallback) const {
        return has(sec, key) ? entries_.at(sec).at(key).value : fallback;
    }

    std::string require_str(const std::string& sec, const std::string& key) const {
        if (!has(sec, key))
            throw ConfigError(origin_ + ": missing required key " + sec + "." + key);
        return entries_.at(sec).at(key).value;
    }

    double get_double(const std::string& sec, const std::string& key,
                      double fallback) const {
        if (!has(sec, key)) return fallback;
        return to_double(sec, key);
    }

    long get_int(const std::string& sec, const std::string& key, long fallback) const {
        if (!has(sec, key)) return fallback;
        const double d = to_double(sec, key);
        if (d != std::floor(d)) throw bad_value(sec, key, "an integer");
        return static_cast<long>(d);
    }

    bool get_bool(const std::string& sec, const std::string& key, bool fallback) const {
        if (!has(sec, key)) return fallback;
        const std::string v = entries_.at(sec).at(key).value;
        if (v == "true" || v == "1" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "no") return false;
        throw bad_value(sec, key, "a boolean");
    }

    std::vector<std::string> get_list(const std::string& sec, const std::string& key,
                                      const std::vector<std::string>& fallback) const {
        if (!has(sec, key)) return fallback;
        std::vector<std::string> out;
        std::istringstream in(entries_.at(sec).at(key).value);
        std::string item;
        while (std::getline(in, item, ',')) {
            const std::string v = trim(item);
            if (!v.empty()) out.push_back(v);
        }
        return out;
    }

    std::vector<double> get_double_list(const std::string& sec, const std::string& key,
                                        const std::vector<double>& fallback) const {
        if (!has(sec, key)) return fallback;
        std::vector<double> out;
        for (const auto& item : get_list(sec, key, {})) {
            char* end = nullptr;
            const double d = std::strtod(item.c_str(), &end);
            if (end != item.c_str() + item.size()) throw bad_value(sec, key, "numbers");
            out.push_back(d);
        }
        return out;
    }

    int line_of(const std::string& sec, const std::string& key) const {
        return has(sec, key) ? entries_.at(sec).at(key).line : 0;
    }

    const std::string& origin() const { return origin_; }

    // Stable serialization of the effective configuration, for manifests.
    std::string canonical() const {
        std::ostringstream out;
        for (const auto& [sec, kv] : entries_) {
            out << '[' << sec << "]\n";
            for (const auto& [k, e] : kv) out << k << " = " << e.value << '\n';
        }
        return out.str();
    }

private:
    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return "";
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    }

    static std::string strip_comment(const std::string& s) {
        const auto h = s.find('#');
        return h == std::string::npos ? s : s.substr(0, h);
    }

    ConfigError bad_value(const std::string& sec, const std::string& key,
                          const std::string& expected) const {
        return ConfigError(origin_ + ":" + std::to_string(line_of(sec, key)) +
                           ": expected " + expected + " for " + sec + "." + key);
    }

    double to_double(const std::string& sec, const std::string& key) const {
        const std::string& v = entries_.at(sec).at(key).value;
        char* end = nullptr;
        const double d = std::strtod(v.c_str(), &end);
        if (v.empty() || end != v.c_str() + v.size())
            throw bad_value(sec, key, "a number");
        return d;
    }

    std::string origin_ = "<config>";
    std::map<std::string, std::map<std::string, Entry>> entries_;
};

// FNV-1a; good enough to fingerprint configs and schemas in manifests.
inline std::string fnv1a_hex(const std::string& bytes) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace rtcp
