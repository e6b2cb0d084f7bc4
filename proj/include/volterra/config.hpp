#pragma once

// INI experiment configuration with typed access, key checking and
// `section.key=value` overrides.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace volterra {

/// Bad config file, unknown key or unparsable value.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

inline const std::map<std::string, std::set<std::string>>& config_schema() {
    static const std::map<std::string, std::set<std::string>> schema = {
        {"data",
         {"estimation", "validation", "sample_period", "validation_skip", "validation_transient", "output_dir",
          "parallel"}},
        {"tuning",
         {"method", "route", "kernel", "n_starts", "max_evals", "seed", "threads", "simplex_tol", "max_lag", "level"}},
        {"transient", {"enabled", "candidates", "kernel", "selection", "band"}},
        {"solver",
         {"mode", "lambda0", "lambda_min", "decimation", "cost_tol", "max_iter", "warm_start", "memory_limit_mb"}},
        {"sim",
         {"N", "fs", "f_min", "f_max", "std", "offset", "snr_db", "k1", "k2", "k3", "k4", "x1_max", "x2_max",
          "overflow_fraction", "substeps", "process_noise1", "process_noise2", "output_noise", "start_at_rest",
          "seed", "validation_seed", "output_dir", "estimation_file", "validation_file", "states"}},
    };
    return schema;
}

inline const std::set<std::string>& structure_keys() {
    static const std::set<std::string> keys = {"offset", "memory"};
    return keys;
}

inline std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    const auto e = s.find_last_not_of(" \t\r\n");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

}  // namespace detail

class Config {
public:
    Config() = default;

    static Config from_string(const std::string& text) {
        std::istringstream in(text);
        Config c;
        try {
            boost::property_tree::read_ini(in, c.tree_);
        } catch (const boost::property_tree::ini_parser_error& e) {
            throw ConfigError(std::string("config: ") + e.message() + " (line " + std::to_string(e.line()) + ")");
        }
        c.check_keys();
        return c;
    }

    static Config load(const std::string& path) {
        Config c;
        try {
            boost::property_tree::read_ini(path, c.tree_);
        } catch (const boost::property_tree::ini_parser_error& e) {
            throw ConfigError("config '" + path + "': " + e.message() +
                              (e.line() ? " (line " + std::to_string(e.line()) + ")" : ""));
        }
        c.check_keys();
        return c;
    }

    /// Applies `section.key=value`; the section may itself contain dots
    /// (structure.degree2.memory=40 20).
    void set(const std::string& assignment) {
        const auto eq = assignment.find('=');
        if (eq == std::string::npos) throw ConfigError("override '" + assignment + "': expected section.key=value");
        const std::string path = detail::trim(assignment.substr(0, eq));
        const auto dot = path.rfind('.');
        if (dot == std::string::npos || dot == 0 || dot + 1 == path.size())
            throw ConfigError("override '" + assignment + "': expected section.key=value");
        const std::string section = path.substr(0, dot), key = path.substr(dot + 1);
        check_key(section, key);
        set(section, key, detail::trim(assignment.substr(eq + 1)));
    }

    void set(const std::string& section, const std::string& key, const std::string& value) {
        check_key(section, key);
        if (auto sec = tree_.get_child_optional(ptree::path_type(section, '\0'))) {
            sec->put(ptree::path_type(key, '\0'), value);
            return;
        }
        ptree fresh;
        fresh.put(ptree::path_type(key, '\0'), value);
        tree_.push_back({section, fresh});
    }

    bool has_section(const std::string& section) const {
        return static_cast<bool>(tree_.get_child_optional(ptree::path_type(section, '\0')));
    }
    bool has(const std::string& section, const std::string& key) const { return raw(section, key).has_value(); }

    std::string get_string(const std::string& section, const std::string& key, const std::string& def) const {
        return raw(section, key).value_or(def);
    }
    double get_double(const std::string& section, const std::string& key, double def) const {
        const auto v = raw(section, key);
        if (!v) return def;
        return parse<double>(section, key, *v);
    }
    std::size_t get_size(const std::string& section, const std::string& key, std::size_t def) const {
        const auto v = raw(section, key);
        if (!v) return def;
        if (!v->empty() && v->front() == '-') throw bad_value(section, key, *v);
        return parse<std::size_t>(section, key, *v);
    }
    std::uint64_t get_u64(const std::string& section, const std::string& key, std::uint64_t def) const {
        const auto v = raw(section, key);
        if (!v) return def;
        if (!v->empty() && v->front() == '-') throw bad_value(section, key, *v);
        return parse<std::uint64_t>(section, key, *v);
    }
    bool get_bool(const std::string& section, const std::string& key, bool def) const {
        const auto v = raw(section, key);
        if (!v) return def;
        if (*v == "true" || *v == "1" || *v == "yes" || *v == "on") return true;
        if (*v == "false" || *v == "0" || *v == "no" || *v == "off") return false;
        throw bad_value(section, key, *v);
    }
    /// Whitespace- or comma-separated list of non-negative integers.
    std::vector<std::size_t> get_sizes(const std::string& section, const std::string& key,
                                       std::vector<std::size_t> def) const {
        const auto v = raw(section, key);
        if (!v) return def;
        std::string s = *v;
        for (auto& ch : s)
            if (ch == ',') ch = ' ';
        std::istringstream in(s);
        std::vector<std::size_t> out;
        std::string tok;
        while (in >> tok) {
            if (tok.front() == '-') throw bad_value(section, key, *v);
            out.push_back(parse<std::size_t>(section, key, tok));
        }
        return out;
    }

    /// Section names starting with `prefix`, in file order.
    std::vector<std::string> sections_with_prefix(const std::string& prefix) const {
        std::vector<std::string> out;
        for (const auto& [name, _] : tree_)
            if (name.rfind(prefix, 0) == 0) out.push_back(name);
        return out;
    }

    /// Canonical INI text of the effective configuration.
    std::string to_string() const {
        std::ostringstream out;
        boost::property_tree::write_ini(out, tree_);
        return out.str();
    }

    /// FNV-1a of to_string(), as 16 hex digits.
    std::string hash() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (unsigned char ch : to_string()) {
            h ^= ch;
            h *= 0x100000001b3ULL;
        }
        std::ostringstream out;
        out << std::hex;
        out.width(16);
        out.fill('0');
        out << h;
        return out.str();
    }

private:
    using ptree = boost::property_tree::ptree;

    std::optional<std::string> raw(const std::string& section, const std::string& key) const {
        const auto sec = tree_.get_child_optional(ptree::path_type(section, '\0'));
        if (!sec) return std::nullopt;
        const auto v = sec->get_optional<std::string>(ptree::path_type(key, '\0'));
        if (!v) return std::nullopt;
        return detail::trim(*v);
    }

    template <class T>
    static T parse(const std::string& section, const std::string& key, const std::string& v) {
        std::istringstream in(v);
        T out{};
        in >> out;
        if (in.fail() || !(in >> std::ws).eof()) throw bad_value(section, key, v);
        return out;
    }

    static ConfigError bad_value(const std::string& section, const std::string& key, const std::string& v) {
        return ConfigError("config: bad value '" + v + "' for " + section + "." + key);
    }

    static void check_key(const std::string& section, const std::string& key) {
        if (section.rfind("structure.", 0) == 0 && section.size() > 10) {
            if (!detail::structure_keys().count(key))
                throw ConfigError("config: unknown key '" + key + "' in [" + section + "]");
            return;
        }
        const auto& schema = detail::config_schema();
        const auto it = schema.find(section);
        if (it == schema.end()) throw ConfigError("config: unknown section [" + section + "]");
        if (!it->second.count(key)) throw ConfigError("config: unknown key '" + key + "' in [" + section + "]");
    }

    void check_keys() const {
        for (const auto& [section, child] : tree_) {
            if (child.empty() && !child.data().empty())
                throw ConfigError("config: key '" + section + "' outside any section");
            for (const auto& [key, _] : child) check_key(section, key);
        }
    }

    ptree tree_;
};

}  // namespace volterra
