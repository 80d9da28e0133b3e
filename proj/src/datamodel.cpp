// Copyright (c) 2026 two contributors
// SPDX-License-Identifier: Apache-2.0

#include "two/datamodel.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <unordered_map>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace two {

namespace {

constexpr char kFeatureMagic[4] = {'I', 'M', 'F', '1'};

bool is_meta_line(const json& j) { return j.is_object() && j.contains("_meta"); }

json parse_line(const std::string& path, size_t lineno, const std::string& line) {
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded())
        throw ParseError(path + ":" + std::to_string(lineno) + ": invalid record");
    return j;
}

std::string require_string(const json& j, const char* key, const std::string& where) {
    if (!j.contains(key) || !j[key].is_string())
        throw ParseError(where + ": missing or non-string field \"" + key + "\"");
    return j[key].get<std::string>();
}

void check_no_control_chars(const std::string& s, const std::string& where) {
    for (unsigned char c : s)
        if (c < 0x20) throw ValidationError(where + ": control character in answer text");
}

}  // namespace

void ImageFeatures::validate(const std::string& context) const {
    if (object_features.rows() != boxes.rows())
        throw ValidationError(context + ": feature rows (" +
                              std::to_string(object_features.rows()) + ") != box rows (" +
                              std::to_string(boxes.rows()) + ")");
    if (boxes.size() > 0 && boxes.cols() != 4)
        throw ValidationError(context + ": boxes must have 4 columns");
    for (Eigen::Index r = 0; r < boxes.rows(); ++r)
        for (Eigen::Index c = 0; c < boxes.cols(); ++c) {
            double v = boxes(r, c);
            if (!(v >= 0.0 && v <= 1.0))
                throw ValidationError(context + ": box coordinate out of [0,1]");
        }
}

void KnowledgeBundle::validate(const std::string& context, int expected_passages) const {
    for (size_t i = 1; i < passages.size(); ++i)
        if (passages[i].score > passages[i - 1].score)
            throw ValidationError(context + ": passages not sorted by non-increasing score");
    if (expected_passages >= 0 && static_cast<int>(passages.size()) != expected_passages)
        throw ValidationError(context + ": bundle has " + std::to_string(passages.size()) +
                              " passages, expected " + std::to_string(expected_passages));
    if (implicit_textual && implicit_textual->tentative_answer.empty())
        throw ValidationError(context + ": textual knowledge with empty tentative answer");
    if (implicit_multimodal && implicit_multimodal->tentative_answer.empty())
        throw ValidationError(context + ": multimodal knowledge with empty tentative answer");
}

void save_image_features(const ImageFeatures& f, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os.write(kFeatureMagic, 4);
    write_u32(os, static_cast<uint32_t>(f.object_features.rows()));
    write_u32(os, static_cast<uint32_t>(f.object_features.cols()));
    for (Eigen::Index r = 0; r < f.object_features.rows(); ++r)
        for (Eigen::Index c = 0; c < f.object_features.cols(); ++c)
            write_f32(os, static_cast<float>(f.object_features(r, c)));
    for (Eigen::Index r = 0; r < f.boxes.rows(); ++r)
        for (Eigen::Index c = 0; c < 4; ++c) write_f32(os, static_cast<float>(f.boxes(r, c)));
    if (!os) throw IoError("write failed for " + path);
}

ImageFeatures load_image_features(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kFeatureMagic, 4) != 0)
        throw ValidationError(path + ": not a feature sidecar (bad magic)");
    uint32_t rows = read_u32(is, path);
    uint32_t cols = read_u32(is, path);
    ImageFeatures f;
    f.object_features.resize(rows, cols);
    for (uint32_t r = 0; r < rows; ++r)
        for (uint32_t c = 0; c < cols; ++c) f.object_features(r, c) = read_f32(is, path);
    f.boxes.resize(rows, 4);
    for (uint32_t r = 0; r < rows; ++r)
        for (uint32_t c = 0; c < 4; ++c) f.boxes(r, c) = read_f32(is, path);
    f.validate(path);
    return f;
}

std::vector<Sample> load_dataset(const std::string& path, Split split,
                                 const ExpectedShape& expected) {
    std::vector<Sample> samples;
    std::set<std::string> seen_ids;
    fs::path base = fs::path(path).parent_path();

    for_each_line(path, [&](size_t lineno, const std::string& line) {
        const std::string where = path + ":" + std::to_string(lineno);
        json j = parse_line(path, lineno, line);
        if (is_meta_line(j)) return;
        if (!j.is_object()) throw ParseError(where + ": record is not an object");

        Sample s;
        s.id = require_string(j, "id", where);
        if (s.id.empty()) throw ValidationError(where + ": empty id");
        if (!seen_ids.insert(s.id).second)
            throw ValidationError(where + ": duplicate id \"" + s.id + "\"");
        s.question = require_string(j, "question", where);
        if (s.question.empty()) throw ValidationError(where + ": empty question");
        s.image_ref = require_string(j, "image_ref", where);

        if (!j.contains("answers") || !j["answers"].is_array())
            throw ParseError(where + ": missing or non-array field \"answers\"");
        for (const auto& a : j["answers"]) {
            if (!a.is_string()) throw ParseError(where + ": non-string answer");
            s.answers.push_back(a.get<std::string>());
        }
        if (split != Split::inference && s.answers.empty())
            throw ValidationError(where + ": empty answer set for a scored split");

        s.visual_context.caption = j.value("caption", std::string());
        if (j.contains("labels")) {
            if (!j["labels"].is_array()) throw ParseError(where + ": \"labels\" is not an array");
            for (const auto& phrase : j["labels"]) {
                if (!phrase.is_array() || phrase.empty())
                    throw ParseError(where + ": label phrase must be a nonempty word array");
                LabelPhrase lp;
                for (size_t i = 0; i + 1 < phrase.size(); ++i) {
                    if (!phrase[i].is_string()) throw ParseError(where + ": non-string label word");
                    lp.attributes.push_back(phrase[i].get<std::string>());
                }
                if (!phrase.back().is_string()) throw ParseError(where + ": non-string label word");
                lp.object = phrase.back().get<std::string>();
                s.visual_context.labels.push_back(std::move(lp));
            }
        }
        if (j.contains("ocr")) {
            if (!j["ocr"].is_array()) throw ParseError(where + ": \"ocr\" is not an array");
            for (const auto& t : j["ocr"]) {
                if (!t.is_string()) throw ParseError(where + ": non-string ocr token");
                s.visual_context.ocr.push_back(t.get<std::string>());
            }
        }

        std::string feat_rel = require_string(j, "features_path", where);
        fs::path feat_path = base / feat_rel;
        s.features = load_image_features(feat_path.string());
        if (expected.object_count >= 0 && s.features.rows() != expected.object_count)
            throw ValidationError(where + ": " + std::to_string(s.features.rows()) +
                                  " feature rows, expected " + std::to_string(expected.object_count));
        if (expected.feat_dim >= 0 &&
            static_cast<int>(s.features.object_features.cols()) != expected.feat_dim)
            throw ValidationError(where + ": feature dim " +
                                  std::to_string(s.features.object_features.cols()) + ", expected " +
                                  std::to_string(expected.feat_dim));
        samples.push_back(std::move(s));
    });
    return samples;
}

void save_dataset(const std::vector<Sample>& samples, const std::string& path,
                  const std::string& features_dir) {
    fs::path base = fs::path(path).parent_path();
    fs::create_directories(base / features_dir);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    for (const auto& s : samples) {
        std::string feat_rel = features_dir + "/" + s.id + ".imf";
        save_image_features(s.features, (base / feat_rel).string());
        json j;
        j["id"] = s.id;
        j["question"] = s.question;
        j["image_ref"] = s.image_ref;
        j["answers"] = s.answers;
        j["features_path"] = feat_rel;
        j["caption"] = s.visual_context.caption;
        json labels = json::array();
        for (const auto& lp : s.visual_context.labels) {
            json phrase = json::array();
            for (const auto& a : lp.attributes) phrase.push_back(a);
            phrase.push_back(lp.object);
            labels.push_back(phrase);
        }
        j["labels"] = labels;
        j["ocr"] = s.visual_context.ocr;
        os << j.dump() << "\n";
    }
    if (!os) throw IoError("write failed for " + path);
}

void save_predictions(const std::vector<Prediction>& predictions, const std::string& path,
                      const std::string& meta_json) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    if (!meta_json.empty()) os << meta_json << "\n";
    for (const auto& p : predictions) {
        check_no_control_chars(p.answer, path);
        json j;
        j["sample_id"] = p.sample_id;
        j["answer"] = p.answer;
        j["model_seed"] = p.model_seed;
        os << j.dump() << "\n";
    }
    if (!os) throw IoError("write failed for " + path);
}

std::vector<Prediction> load_predictions(const std::string& path) {
    std::vector<Prediction> out;
    for_each_line(path, [&](size_t lineno, const std::string& line) {
        const std::string where = path + ":" + std::to_string(lineno);
        json j = parse_line(path, lineno, line);
        if (is_meta_line(j)) return;
        Prediction p;
        p.sample_id = require_string(j, "sample_id", where);
        p.answer = require_string(j, "answer", where);
        if (!j.contains("model_seed") || !j["model_seed"].is_number_integer())
            throw ParseError(where + ": missing or non-integer field \"model_seed\"");
        p.model_seed = j["model_seed"].get<int>();
        check_no_control_chars(p.answer, where);
        out.push_back(std::move(p));
    });
    return out;
}

namespace {

json implicit_to_json(const std::optional<ImplicitKnowledge>& k) {
    if (!k) return nullptr;
    json j;
    j["answer"] = k->tentative_answer;
    j["evidence"] = k->evidence;
    return j;
}

std::optional<ImplicitKnowledge> implicit_from_json(const json& j, KnowledgeSource tag,
                                                    const std::string& where) {
    if (j.is_null()) return std::nullopt;
    ImplicitKnowledge k;
    k.tentative_answer = require_string(j, "answer", where);
    k.evidence = j.value("evidence", std::string());
    k.source_tag = tag;
    return k;
}

}  // namespace

void save_knowledge(const std::vector<std::pair<std::string, KnowledgeBundle>>& bundles,
                    const std::string& path, const std::string& meta_json) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    if (!meta_json.empty()) os << meta_json << "\n";
    for (const auto& [id, b] : bundles) {
        json j;
        j["id"] = id;
        json passages = json::array();
        for (const auto& p : b.passages) {
            json pj;
            pj["passage_id"] = p.passage_id;
            pj["text"] = p.text;
            pj["score"] = p.score;
            passages.push_back(pj);
        }
        j["passages"] = passages;
        j["textual"] = implicit_to_json(b.implicit_textual);
        j["multimodal"] = implicit_to_json(b.implicit_multimodal);
        os << j.dump() << "\n";
    }
    if (!os) throw IoError("write failed for " + path);
}

std::vector<std::pair<std::string, KnowledgeBundle>> load_knowledge(const std::string& path) {
    std::vector<std::pair<std::string, KnowledgeBundle>> out;
    std::set<std::string> seen;
    for_each_line(path, [&](size_t lineno, const std::string& line) {
        const std::string where = path + ":" + std::to_string(lineno);
        json j = parse_line(path, lineno, line);
        if (is_meta_line(j)) return;
        std::string id = require_string(j, "id", where);
        if (!seen.insert(id).second)
            throw ValidationError(where + ": duplicate bundle id \"" + id + "\"");
        KnowledgeBundle b;
        if (j.contains("passages")) {
            if (!j["passages"].is_array()) throw ParseError(where + ": \"passages\" not an array");
            for (const auto& pj : j["passages"]) {
                ScoredPassage p;
                p.passage_id = require_string(pj, "passage_id", where);
                p.text = require_string(pj, "text", where);
                if (!pj.contains("score") || !pj["score"].is_number())
                    throw ParseError(where + ": missing passage score");
                p.score = pj["score"].get<double>();
                b.passages.push_back(std::move(p));
            }
        }
        b.implicit_textual = implicit_from_json(j.value("textual", json(nullptr)),
                                                KnowledgeSource::textual, where);
        b.implicit_multimodal = implicit_from_json(j.value("multimodal", json(nullptr)),
                                                   KnowledgeSource::multimodal, where);
        b.validate(where);
        out.emplace_back(std::move(id), std::move(b));
    });
    return out;
}

void attach_knowledge(std::vector<Sample>& samples,
                      const std::vector<std::pair<std::string, KnowledgeBundle>>& bundles,
                      bool required, int expected_passages) {
    std::unordered_map<std::string, const KnowledgeBundle*> by_id;
    for (const auto& [id, b] : bundles) by_id[id] = &b;
    std::set<std::string> sample_ids;
    for (auto& s : samples) {
        sample_ids.insert(s.id);
        auto it = by_id.find(s.id);
        if (it == by_id.end()) {
            if (required)
                throw MissingKnowledgeError("no knowledge bundle for sample \"" + s.id + "\"");
            continue;
        }
        it->second->validate("bundle for " + s.id, expected_passages);
        s.knowledge = *it->second;
    }
    for (const auto& [id, b] : bundles)
        if (!sample_ids.count(id))
            throw ValidationError("knowledge bundle for unknown sample \"" + id + "\"");
}

}  // namespace two
