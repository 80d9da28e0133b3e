// Copyright (c) 2026 two contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cctype>
#include <cstdlib>
#include <filesystem>
#include <random>
#include <string>

#include "two/pipeline.hpp"

namespace testutil {

inline std::string fixture(const std::string& rel) {
    return std::string(TWO_FIXTURE_DIR) + "/" + rel;
}

// Settings resolution reads TWO_* variables, so tests that exercise it (or
// anything layered on top, like the CLI) scrub the environment first.
inline void scrub_env() {
    for (const auto& [key, value] : two::Settings::defaults()) {
        std::string name = "TWO_";
        for (char c : key) name += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
        unsetenv(name.c_str());
    }
}

struct TempDir {
    std::filesystem::path path;

    TempDir() {
        auto base = std::filesystem::temp_directory_path();
        std::random_device rd;
        for (int attempt = 0; attempt < 100; ++attempt) {
            auto candidate = base / ("two_test_" + std::to_string(rd()));
            if (std::filesystem::create_directory(candidate)) {
                path = candidate;
                return;
            }
        }
        throw std::runtime_error("could not create a temp directory");
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    std::string file(const std::string& name) const { return (path / name).string(); }
};

}  // namespace testutil
