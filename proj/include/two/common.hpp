// Copyright (c) 2026 two contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace two {

// Error taxonomy. Every failure surfaced to callers is one of these, so the
// CLI can map them to exit codes and tests can assert on the category.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ParseError : Error {
    using Error::Error;
};
struct ValidationError : Error {
    using Error::Error;
};
struct IoError : Error {
    using Error::Error;
};
struct UsageError : Error {
    using Error::Error;
};
struct BackendError : Error {
    using Error::Error;
};
struct MissingKnowledgeError : Error {
    using Error::Error;
};

// --- hashing -------------------------------------------------------------

uint64_t fnv1a64(std::string_view data, uint64_t basis = 0xcbf29ce484222325ULL);
std::string hex64(uint64_t v);

// Seed for a named sub-generator so independent components never share a
// random stream even when configured with the same root seed.
uint64_t derive_seed(uint64_t root, std::string_view tag);

// --- little-endian binary io ----------------------------------------------

void write_u32(std::ostream& os, uint32_t v);
void write_u64(std::ostream& os, uint64_t v);
void write_f32(std::ostream& os, float v);
void write_f64(std::ostream& os, double v);
void write_lp_string(std::ostream& os, std::string_view s);

uint32_t read_u32(std::istream& is, const std::string& what);
uint64_t read_u64(std::istream& is, const std::string& what);
float read_f32(std::istream& is, const std::string& what);
double read_f64(std::istream& is, const std::string& what);
std::string read_lp_string(std::istream& is, const std::string& what);

// --- strings ---------------------------------------------------------------

std::string trim(std::string_view s);
std::string lower_ascii(std::string_view s);
std::vector<std::string> split_ws(std::string_view s);
std::vector<std::string> split(std::string_view s, char sep);
std::string join(const std::vector<std::string>& parts, std::string_view sep);

// --- line-delimited files ----------------------------------------------------

// Calls fn(line_number, line) for every nonempty line; line numbers are
// 1-based so parse errors can name the offending record.
void for_each_line(const std::string& path,
                   const std::function<void(size_t, const std::string&)>& fn);

void write_text_file(const std::string& path, std::string_view content);
std::string read_text_file(const std::string& path);

}  // namespace two
