// Copyright (c) 2026 two contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

namespace two {

// Flat key=value configuration resolved from defaults < config file <
// TWO_-prefixed environment variables < command-line flags.
class Settings {
public:
    static const std::map<std::string, std::string>& defaults();

    static Settings resolve(const std::string& config_path,
                            const std::map<std::string, std::string>& flag_overrides);

    const std::string& gets(const std::string& key) const;
    int geti(const std::string& key) const;
    double getd(const std::string& key) const;
    bool getb(const std::string& key) const;
    uint64_t getu(const std::string& key) const;
    bool is_set(const std::string& key) const;  // explicitly, not by default
    void set(const std::string& key, const std::string& value);

    // FNV-1a over the sorted key=value rendering; recorded in artifacts.
    std::string config_hash() const;
    nlohmann::json meta(const std::string& command) const;
    std::string meta_line(const std::string& command) const;

private:
    std::map<std::string, std::string> values_;
    std::map<std::string, bool> explicit_;
};

int cli_main(int argc, char** argv);
int run_cli(const std::vector<std::string>& args);

}  // namespace two
