#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace rq {

/// Shortest decimal text that parses back to exactly `v`.
std::string format_number(double v);

/// `key = value` file with `#` comments. Keys are case-sensitive; later keys win.
class KeyValueConfig {
public:
    KeyValueConfig() = default;

    static KeyValueConfig parse(const std::string& text);
    static KeyValueConfig load(const std::filesystem::path& path);

    bool has(const std::string& key) const { return values_.count(key) != 0; }
    std::optional<std::string> get(const std::string& key) const;
    std::string get_or(const std::string& key, const std::string& fallback) const;
    double get_double(const std::string& key, double fallback) const;
    long get_int(const std::string& key, long fallback) const;
    void set(const std::string& key, std::string value) { values_[key] = std::move(value); }

    /// Keys not in `known`, so callers can reject typos.
    std::vector<std::string> unknown_keys(const std::vector<std::string>& known) const;
    const std::map<std::string, std::string>& entries() const { return values_; }
    std::string render() const;

private:
    std::map<std::string, std::string> values_;
};

}  // namespace rq
