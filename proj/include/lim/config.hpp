// Flat "key = value" config files: one assignment per line, '#' comments.
#pragma once

#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>

namespace lim {

struct KvConfig {
    std::map<std::string, std::string> values;

    bool has(const std::string& key) const { return values.count(key) > 0; }

    std::string get(const std::string& key, const std::string& fallback) const {
        auto it = values.find(key);
        return it == values.end() ? fallback : it->second;
    }

    int get_int(const std::string& key, int fallback) const {
        auto it = values.find(key);
        return it == values.end() ? fallback : std::stoi(it->second);
    }

    double get_double(const std::string& key, double fallback) const {
        auto it = values.find(key);
        return it == values.end() ? fallback : std::stod(it->second);
    }

    // Unknown keys are rejected with the list of valid keys.
    void require_known_keys(const std::set<std::string>& valid) const {
        for (const auto& [k, v] : values) {
            (void)v;
            if (valid.count(k) == 0) {
                std::ostringstream os;
                os << "unknown config key '" << k << "'; valid keys:";
                for (const auto& key : valid) os << " " << key;
                throw std::invalid_argument(os.str());
            }
        }
    }
};

inline KvConfig parse_kv_text(std::istream& is) {
    KvConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        const auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            if (b == std::string::npos) return std::string();
            const auto e = s.find_last_not_of(" \t\r");
            return s.substr(b, e - b + 1);
        };
        if (trim(line).empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument("config line " + std::to_string(lineno) +
                                        ": expected key = value");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        if (key.empty()) {
            throw std::invalid_argument("config line " + std::to_string(lineno) + ": empty key");
        }
        cfg.values[key] = val;
    }
    return cfg;
}

inline KvConfig parse_kv_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open config file: " + path);
    return parse_kv_text(is);
}

inline void write_kv_file(const KvConfig& cfg, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write config file: " + path);
    for (const auto& [k, v] : cfg.values) os << k << " = " << v << "\n";
}

}  // namespace lim
