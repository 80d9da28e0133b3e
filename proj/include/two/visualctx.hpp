// Copyright (c) 2026 two contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <string>
#include <variant>
#include <vector>

#include "two/datamodel.hpp"

namespace two {

enum class DescriptionKind { caption, labels, ocr };

// One fixture-backed stand-in for a captioner, object detector, or OCR tool.
// The stored value matches the kind: caption text, label phrases, or tokens.
struct DescriptionProvider {
    using Value = std::variant<std::string, std::vector<LabelPhrase>, std::vector<std::string>>;

    DescriptionKind kind = DescriptionKind::caption;
    bool permissive = false;
    std::map<std::string, Value> lookup;

    Value provide(const std::string& image_ref) const;
};

DescriptionProvider load_provider(const std::string& path, DescriptionKind kind,
                                  bool permissive = false);

VisualContext assemble_visual_context(std::string caption, std::vector<LabelPhrase> labels,
                                      std::vector<std::string> ocr);

// Deterministic serialization used for the textual encoder input and caching.
// "caption: <C>. objects: <attr.. obj>, <attr.. obj>. ocr: <tok> <tok>."
// Empty sections are omitted; present sections are joined by single spaces.
std::string render_visual_context(const VisualContext& ctx);

std::string render_label_phrase(const LabelPhrase& phrase);

}  // namespace two
