// Copyright (c) 2026 two contributors
// SPDX-License-Identifier: Apache-2.0

#include "two/implicit.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <httplib.h>
#include <json.hpp>

#include "two/common.hpp"
#include "two/visualctx.hpp"

using nlohmann::json;

namespace two {

std::string prompt_kind_name(PromptKind kind) {
    switch (kind) {
        case PromptKind::answer_textual: return "answer_textual";
        case PromptKind::evidence_textual: return "evidence_textual";
        case PromptKind::answer_multimodal: return "answer_multimodal";
        case PromptKind::evidence_multimodal: return "evidence_multimodal";
    }
    throw ValidationError("unknown prompt kind");
}

PromptKind prompt_kind_from_name(const std::string& name) {
    if (name == "answer_textual") return PromptKind::answer_textual;
    if (name == "evidence_textual") return PromptKind::evidence_textual;
    if (name == "answer_multimodal") return PromptKind::answer_multimodal;
    if (name == "evidence_multimodal") return PromptKind::evidence_multimodal;
    throw ParseError("unknown prompt kind \"" + name + "\"");
}

std::string prompt_fingerprint(const Prompt& prompt) {
    uint64_t h = fnv1a64(prompt_kind_name(prompt.kind));
    h = fnv1a64(std::string_view("\x1f", 1), h);
    h = fnv1a64(prompt.text, h);
    return hex64(h);
}

std::optional<std::string> KnowledgeCache::get(const std::string& fingerprint) const {
    std::lock_guard lock(mu_);
    auto it = entries_.find(fingerprint);
    if (it == entries_.end()) return std::nullopt;
    return it->second.response;
}

void KnowledgeCache::put(const std::string& fingerprint, PromptKind kind,
                         const std::string& response) {
    std::lock_guard lock(mu_);
    entries_[fingerprint] = Entry{kind, response};
}

size_t KnowledgeCache::size() const {
    std::lock_guard lock(mu_);
    return entries_.size();
}

void KnowledgeCache::load(const std::string& path) {
    if (!std::filesystem::exists(path)) return;
    std::lock_guard lock(mu_);
    for_each_line(path, [&](size_t lineno, const std::string& line) {
        const std::string where = path + ":" + std::to_string(lineno);
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded()) throw ParseError(where + ": invalid record");
        if (j.contains("_meta")) return;
        if (!j.contains("fingerprint") || !j.contains("prompt_kind") || !j.contains("response"))
            throw ParseError(where + ": cache record needs fingerprint, prompt_kind, response");
        entries_[j["fingerprint"].get<std::string>()] =
            Entry{prompt_kind_from_name(j["prompt_kind"].get<std::string>()),
                  j["response"].get<std::string>()};
    });
}

void KnowledgeCache::save(const std::string& path) const {
    std::lock_guard lock(mu_);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    for (const auto& [fp, e] : entries_) {
        json j;
        j["fingerprint"] = fp;
        j["prompt_kind"] = prompt_kind_name(e.kind);
        j["response"] = e.response;
        os << j.dump() << "\n";
    }
    if (!os) throw IoError("write failed for " + path);
}

std::string EchoBackend::query(const Prompt& prompt) { return prompt.text; }

ReplayBackend::ReplayBackend(const std::string& fixture_path) : path_(fixture_path) {
    for_each_line(path_, [&](size_t lineno, const std::string& line) {
        const std::string where = path_ + ":" + std::to_string(lineno);
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded()) throw ParseError(where + ": invalid record");
        if (j.contains("_meta")) return;
        if (!j.contains("fingerprint") || !j.contains("response"))
            throw ParseError(where + ": fixture record needs fingerprint and response");
        responses_[j["fingerprint"].get<std::string>()] = j["response"].get<std::string>();
    });
}

std::string ReplayBackend::query(const Prompt& prompt) {
    std::string fp = prompt_fingerprint(prompt);
    auto it = responses_.find(fp);
    if (it == responses_.end())
        throw MissingKnowledgeError("replay fixture " + path_ + " has no response for " +
                                    prompt_kind_name(prompt.kind) + " fingerprint " + fp);
    return it->second;
}

namespace {

std::string base64_encode(const std::string& bytes) {
    static const char alphabet[] =
        "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    size_t i = 0;
    while (i + 3 <= bytes.size()) {
        uint32_t v = (static_cast<unsigned char>(bytes[i]) << 16) |
                     (static_cast<unsigned char>(bytes[i + 1]) << 8) |
                     static_cast<unsigned char>(bytes[i + 2]);
        out += alphabet[(v >> 18) & 63];
        out += alphabet[(v >> 12) & 63];
        out += alphabet[(v >> 6) & 63];
        out += alphabet[v & 63];
        i += 3;
    }
    size_t rem = bytes.size() - i;
    if (rem == 1) {
        uint32_t v = static_cast<unsigned char>(bytes[i]) << 16;
        out += alphabet[(v >> 18) & 63];
        out += alphabet[(v >> 12) & 63];
        out += "==";
    } else if (rem == 2) {
        uint32_t v = (static_cast<unsigned char>(bytes[i]) << 16) |
                     (static_cast<unsigned char>(bytes[i + 1]) << 8);
        out += alphabet[(v >> 18) & 63];
        out += alphabet[(v >> 12) & 63];
        out += alphabet[(v >> 6) & 63];
        out += '=';
    }
    return out;
}

std::string serialize_features(const ImageFeatures& f) {
    std::ostringstream os(std::ios::binary);
    write_u32(os, static_cast<uint32_t>(f.object_features.rows()));
    write_u32(os, static_cast<uint32_t>(f.object_features.cols()));
    for (Eigen::Index r = 0; r < f.object_features.rows(); ++r)
        for (Eigen::Index c = 0; c < f.object_features.cols(); ++c)
            write_f32(os, static_cast<float>(f.object_features(r, c)));
    for (Eigen::Index r = 0; r < f.boxes.rows(); ++r)
        for (Eigen::Index c = 0; c < 4; ++c) write_f32(os, static_cast<float>(f.boxes(r, c)));
    return os.str();
}

}  // namespace

RemoteBackend::RemoteBackend(RemoteConfig cfg) : cfg_(std::move(cfg)) {}

std::string RemoteBackend::query(const Prompt& prompt) {
    json body;
    body["prompt"] = prompt.text;
    body["kind"] = prompt_kind_name(prompt.kind);
    if (prompt.attachments) body["attachments_b64"] = base64_encode(serialize_features(*prompt.attachments));
    body["max_tokens"] = cfg_.max_tokens;
    std::string payload = body.dump();

    std::string last_error;
    for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
        httplib::Client client(cfg_.host, cfg_.port);
        client.set_connection_timeout(cfg_.timeout_sec);
        client.set_read_timeout(cfg_.timeout_sec);
        auto res = client.Post(cfg_.path, payload, "application/json");
        if (!res) {
            last_error = "connection failed";
            continue;
        }
        if (res->status != 200) {
            last_error = "status " + std::to_string(res->status);
            continue;
        }
        json reply = json::parse(res->body, nullptr, false);
        if (reply.is_discarded() || !reply.contains("text") || !reply["text"].is_string())
            throw BackendError("remote backend returned malformed body");
        return reply["text"].get<std::string>();
    }
    throw BackendError("remote backend failed after " + std::to_string(cfg_.max_retries + 1) +
                       " attempts: " + last_error);
}

std::string query_backend(KnowledgeBackend& backend, const Prompt& prompt, KnowledgeCache& cache) {
    std::string fp = prompt_fingerprint(prompt);
    if (auto hit = cache.get(fp)) return *hit;
    std::string response = backend.query(prompt);
    cache.put(fp, prompt.kind, response);
    return response;
}

namespace {

bool is_degenerate_token(const std::string& token, const CleanConfig& cfg) {
    for (const auto& t : cfg.extra_degenerate_tokens)
        if (token == t) return true;
    std::string low = lower_ascii(token);
    size_t i = 0, units = 0;
    while (i < low.size()) {
        if (low.compare(i, 3, "yes") == 0) {
            i += 3;
        } else if (low.compare(i, 2, "no") == 0) {
            i += 2;
        } else {
            return false;
        }
        ++units;
    }
    return units >= 2;
}

}  // namespace

std::string clean_knowledge_text(const std::string& text, const CleanConfig& cfg) {
    std::vector<std::string> kept;
    for (const auto& tok : split_ws(text))
        if (!is_degenerate_token(tok, cfg)) kept.push_back(tok);
    return join(kept, " ");
}

std::vector<const Sample*> select_in_context_examples(const Sample& sample,
                                                      const std::vector<Sample>& pool, int n,
                                                      const EmbeddingTower& query_tower) {
    if (n < 0 || n > static_cast<int>(pool.size()))
        throw ValidationError("cannot select " + std::to_string(n) + " examples from a pool of " +
                              std::to_string(pool.size()));
    if (n == 0) return {};
    Eigen::VectorXd target =
        encode_query(sample.question, sample.visual_context.caption, query_tower);
    std::vector<std::pair<double, const Sample*>> scored;
    scored.reserve(pool.size());
    for (const auto& cand : pool) {
        Eigen::VectorXd v = encode_query(cand.question, cand.visual_context.caption, query_tower);
        double s = 0.0;
        for (Eigen::Index i = 0; i < v.size(); ++i) s += v(i) * target(i);
        scored.emplace_back(s, &cand);
    }
    auto better = [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second->id < b.second->id;
    };
    std::partial_sort(scored.begin(), scored.begin() + n, scored.end(), better);
    std::vector<const Sample*> out;
    out.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) out.push_back(scored[static_cast<size_t>(i)].second);
    return out;
}

std::vector<const Sample*> dataset_examples(const Sample& sample,
                                            const std::vector<Sample>& dataset, int n,
                                            const EmbeddingTower& query_tower) {
    if (n < 0) throw ValidationError("cannot select a negative number of examples");
    // Top n of the pool minus the sample equals top n+1 of the full pool with
    // the sample dropped, which avoids building a pool copy.
    int want = std::min<int>(n + 1, static_cast<int>(dataset.size()));
    auto picked = select_in_context_examples(sample, dataset, want, query_tower);
    std::vector<const Sample*> out;
    out.reserve(static_cast<size_t>(n));
    for (const Sample* p : picked) {
        if (p == &sample) continue;
        if (static_cast<int>(out.size()) == n) break;
        out.push_back(p);
    }
    return out;
}

std::string example_answer(const Sample& sample) {
    if (sample.answers.empty()) throw ValidationError("sample " + sample.id + " has no answers");
    std::map<std::string, int> counts;
    for (const auto& a : sample.answers) ++counts[a];
    std::string best;
    int best_count = 0;
    for (const auto& [answer, count] : counts) {
        // std::map iterates lexicographically, so on a tie the first seen wins.
        if (count > best_count) {
            best = answer;
            best_count = count;
        }
    }
    return best;
}

namespace {

std::string context_line(const Sample& s) {
    std::vector<std::string> phrases;
    phrases.reserve(s.visual_context.labels.size());
    for (const auto& lp : s.visual_context.labels) phrases.push_back(render_label_phrase(lp));
    return "Context: " + s.visual_context.caption + "+" + join(phrases, ", ") + ". Q: " +
           s.question + " A:";
}

}  // namespace

Prompt build_answer_prompt_textual(const Sample& sample, const PromptOptions& opts) {
    std::string text = opts.instructions + "\n";
    for (const Sample* ex : opts.examples)
        text += context_line(*ex) + " " + example_answer(*ex) + "\n";
    text += context_line(sample);
    return Prompt{std::move(text), PromptKind::answer_textual, std::nullopt};
}

Prompt build_evidence_prompt_textual(const std::string& question,
                                     const std::string& tentative_answer) {
    std::string q = trim(question);
    std::string a = trim(tentative_answer);
    if (q.empty()) throw ValidationError("empty question for evidence prompt");
    if (a.empty()) throw ValidationError("empty tentative answer for evidence prompt");
    return Prompt{q + " " + a + ". This is because", PromptKind::evidence_textual, std::nullopt};
}

Prompt build_answer_prompt_multimodal(const Sample& sample) {
    if (sample.features.rows() == 0)
        throw ValidationError("sample " + sample.id + " has no image features");
    return Prompt{sample.question, PromptKind::answer_multimodal, sample.features};
}

Prompt build_evidence_prompt_multimodal(const std::string& question,
                                        const std::string& tentative_answer,
                                        const ImageFeatures& features) {
    std::string q = trim(question);
    std::string a = trim(tentative_answer);
    while (!a.empty() && a.back() == '.') a.pop_back();
    if (q.empty()) throw ValidationError("empty question for evidence prompt");
    if (a.empty()) throw ValidationError("empty tentative answer for evidence prompt");
    return Prompt{q + " Why " + a + "?", PromptKind::evidence_multimodal, features};
}

std::pair<std::optional<ImplicitKnowledge>, std::optional<ImplicitKnowledge>>
fetch_implicit_knowledge(const Sample& sample, KnowledgeBackend& backend_textual,
                         KnowledgeBackend& backend_multimodal, KnowledgeCache& cache,
                         const PromptOptions& opts) {
    std::optional<ImplicitKnowledge> textual;
    {
        Prompt answer_prompt = build_answer_prompt_textual(sample, opts);
        std::string answer =
            clean_knowledge_text(query_backend(backend_textual, answer_prompt, cache), opts.clean);
        if (!answer.empty()) {
            Prompt evidence_prompt = build_evidence_prompt_textual(sample.question, answer);
            std::string evidence = clean_knowledge_text(
                query_backend(backend_textual, evidence_prompt, cache), opts.clean);
            textual = ImplicitKnowledge{answer, evidence, KnowledgeSource::textual};
        }
    }
    std::optional<ImplicitKnowledge> multimodal;
    {
        Prompt answer_prompt = build_answer_prompt_multimodal(sample);
        std::string answer = clean_knowledge_text(
            query_backend(backend_multimodal, answer_prompt, cache), opts.clean);
        if (!answer.empty()) {
            Prompt evidence_prompt =
                build_evidence_prompt_multimodal(sample.question, answer, sample.features);
            std::string evidence = clean_knowledge_text(
                query_backend(backend_multimodal, evidence_prompt, cache), opts.clean);
            multimodal = ImplicitKnowledge{answer, evidence, KnowledgeSource::multimodal};
        }
    }
    return {std::move(textual), std::move(multimodal)};
}

}  // namespace two
