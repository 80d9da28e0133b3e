// Copyright (c) 2026 two contributors
// SPDX-License-Identifier: Apache-2.0

#include "two/visualctx.hpp"

#include <json.hpp>

#include "two/common.hpp"

using nlohmann::json;

namespace two {

namespace {

DescriptionProvider::Value empty_value(DescriptionKind kind) {
    switch (kind) {
        case DescriptionKind::caption: return std::string();
        case DescriptionKind::labels: return std::vector<LabelPhrase>();
        case DescriptionKind::ocr: return std::vector<std::string>();
    }
    throw ValidationError("unknown description kind");
}

DescriptionProvider::Value parse_value(const json& v, DescriptionKind kind,
                                       const std::string& where) {
    switch (kind) {
        case DescriptionKind::caption:
            if (!v.is_string()) throw ParseError(where + ": caption value must be a string");
            return v.get<std::string>();
        case DescriptionKind::labels: {
            if (!v.is_array()) throw ParseError(where + ": labels value must be an array");
            std::vector<LabelPhrase> phrases;
            for (const auto& p : v) {
                if (!p.is_array() || p.empty())
                    throw ParseError(where + ": label phrase must be a nonempty word array");
                LabelPhrase lp;
                for (size_t i = 0; i + 1 < p.size(); ++i)
                    lp.attributes.push_back(p[i].get<std::string>());
                lp.object = p.back().get<std::string>();
                phrases.push_back(std::move(lp));
            }
            return phrases;
        }
        case DescriptionKind::ocr: {
            if (!v.is_array()) throw ParseError(where + ": ocr value must be an array");
            std::vector<std::string> tokens;
            for (const auto& t : v) tokens.push_back(t.get<std::string>());
            return tokens;
        }
    }
    throw ValidationError("unknown description kind");
}

}  // namespace

DescriptionProvider::Value DescriptionProvider::provide(const std::string& image_ref) const {
    auto it = lookup.find(image_ref);
    if (it != lookup.end()) return it->second;
    if (permissive) return empty_value(kind);
    throw MissingKnowledgeError("no description for image_ref \"" + image_ref + "\"");
}

DescriptionProvider load_provider(const std::string& path, DescriptionKind kind, bool permissive) {
    DescriptionProvider p;
    p.kind = kind;
    p.permissive = permissive;
    for_each_line(path, [&](size_t lineno, const std::string& line) {
        const std::string where = path + ":" + std::to_string(lineno);
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded()) throw ParseError(where + ": invalid record");
        if (j.contains("_meta")) return;
        if (!j.contains("image_ref") || !j["image_ref"].is_string())
            throw ParseError(where + ": missing \"image_ref\"");
        if (!j.contains("value")) throw ParseError(where + ": missing \"value\"");
        std::string ref = j["image_ref"].get<std::string>();
        if (!p.lookup.emplace(ref, parse_value(j["value"], kind, where)).second)
            throw ValidationError(where + ": duplicate image_ref \"" + ref + "\"");
    });
    return p;
}

VisualContext assemble_visual_context(std::string caption, std::vector<LabelPhrase> labels,
                                      std::vector<std::string> ocr) {
    VisualContext ctx;
    ctx.caption = std::move(caption);
    ctx.labels = std::move(labels);
    ctx.ocr = std::move(ocr);
    return ctx;
}

std::string render_label_phrase(const LabelPhrase& phrase) {
    std::string out;
    for (const auto& a : phrase.attributes) {
        out += a;
        out += ' ';
    }
    out += phrase.object;
    return out;
}

std::string render_visual_context(const VisualContext& ctx) {
    std::vector<std::string> sections;
    if (!ctx.caption.empty()) sections.push_back("caption: " + ctx.caption + ".");
    if (!ctx.labels.empty()) {
        std::vector<std::string> phrases;
        phrases.reserve(ctx.labels.size());
        for (const auto& lp : ctx.labels) phrases.push_back(render_label_phrase(lp));
        sections.push_back("objects: " + join(phrases, ", ") + ".");
    }
    if (!ctx.ocr.empty()) sections.push_back("ocr: " + join(ctx.ocr, " ") + ".");
    return join(sections, " ");
}

}  // namespace two
