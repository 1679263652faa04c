#include "rq/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

#include "rq/error.hpp"

namespace rq {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

std::string format_number(double v) {
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

KeyValueConfig KeyValueConfig::parse(const std::string& text) {
    KeyValueConfig cfg;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos) throw IoError("config line without '='", lineno);
        const std::string key = trim(t.substr(0, eq));
        if (key.empty()) throw IoError("config line with empty key", lineno);
        cfg.values_[key] = trim(t.substr(eq + 1));
    }
    return cfg;
}

KeyValueConfig KeyValueConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

std::optional<std::string> KeyValueConfig::get(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return std::nullopt;
    return it->second;
}

std::string KeyValueConfig::get_or(const std::string& key, const std::string& fallback) const {
    return get(key).value_or(fallback);
}

double KeyValueConfig::get_double(const std::string& key, double fallback) const {
    const auto v = get(key);
    if (!v) return fallback;
    try {
        std::size_t used = 0;
        const double d = std::stod(*v, &used);
        if (used != v->size()) throw std::invalid_argument(*v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "' is not a number: " + *v);
    }
}

long KeyValueConfig::get_int(const std::string& key, long fallback) const {
    const auto v = get(key);
    if (!v) return fallback;
    try {
        std::size_t used = 0;
        const long n = std::stol(*v, &used);
        if (used != v->size()) throw std::invalid_argument(*v);
        return n;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "' is not an integer: " + *v);
    }
}

std::vector<std::string> KeyValueConfig::unknown_keys(const std::vector<std::string>& known) const {
    std::vector<std::string> out;
    for (const auto& [k, v] : values_)
        if (std::find(known.begin(), known.end(), k) == known.end()) out.push_back(k);
    return out;
}

std::string KeyValueConfig::render() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
}

}  // namespace rq
