// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: a flat key-value text file
//
//   # comment
//   train.epochs = 80
//   eval.thresholds = 0.5,0.7
//
// Every key has a documented default (see config_schema()); unknown keys are
// rejected. The resolved configuration is written next to every output.

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace evigrid {

inline constexpr int kConfigFormatVersion = 1;

struct ConfigKey {
    std::string key;
    std::string default_value;
    std::string doc;
};

const std::vector<ConfigKey>& config_schema();

class Config {
public:
    Config();  // all defaults

    static Config from_file(const std::string& path);  // IoError, ConfigError

    // Applies `key = value` lines on top of the current values.
    void merge_text(std::string_view text, const std::string& source);
    void set(const std::string& key, const std::string& value);
    // "key=value"
    void set_assignment(const std::string& assignment);

    const std::string& get(const std::string& key) const;
    int get_int(const std::string& key) const;
    uint64_t get_u64(const std::string& key) const;
    double get_double(const std::string& key) const;
    bool get_bool(const std::string& key) const;
    std::vector<double> get_doubles(const std::string& key) const;
    std::vector<std::string> get_list(const std::string& key) const;

    // Resolved file contents: every key, schema order, with a header line.
    std::string dump() const;

    const std::map<std::string, std::string>& values() const { return values_; }

private:
    std::map<std::string, std::string> values_;
};

}  // namespace evigrid
