// Copyright (c) 2026 two contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "two/datamodel.hpp"
#include "two/retriever.hpp"

namespace two {

enum class PromptKind { answer_textual, evidence_textual, answer_multimodal, evidence_multimodal };

std::string prompt_kind_name(PromptKind kind);
PromptKind prompt_kind_from_name(const std::string& name);

struct Prompt {
    std::string text;
    PromptKind kind = PromptKind::answer_textual;
    std::optional<ImageFeatures> attachments;  // multimodal kinds only
};

// Stable fingerprint over kind + text, used as the cache and replay key.
std::string prompt_fingerprint(const Prompt& prompt);

class KnowledgeCache {
public:
    std::optional<std::string> get(const std::string& fingerprint) const;
    void put(const std::string& fingerprint, PromptKind kind, const std::string& response);
    size_t size() const;

    void load(const std::string& path);  // missing file leaves the cache empty
    void save(const std::string& path) const;

private:
    struct Entry {
        PromptKind kind;
        std::string response;
    };
    mutable std::mutex mu_;
    std::map<std::string, Entry> entries_;
};

class KnowledgeBackend {
public:
    virtual ~KnowledgeBackend() = default;
    virtual std::string query(const Prompt& prompt) = 0;
    virtual std::string name() const = 0;
};

// Returns the prompt text itself. Attachments are ignored.
class EchoBackend : public KnowledgeBackend {
public:
    std::string query(const Prompt& prompt) override;
    std::string name() const override { return "echo"; }
};

// Serves canned responses keyed by prompt fingerprint; misses are errors.
class ReplayBackend : public KnowledgeBackend {
public:
    explicit ReplayBackend(const std::string& fixture_path);
    std::string query(const Prompt& prompt) override;
    std::string name() const override { return "replay"; }

private:
    std::string path_;
    std::map<std::string, std::string> responses_;
};

struct RemoteConfig {
    std::string host = "127.0.0.1";
    int port = 8080;
    std::string path = "/generate";
    int timeout_sec = 30;
    int max_retries = 2;
    int max_tokens = 64;
};

class RemoteBackend : public KnowledgeBackend {
public:
    explicit RemoteBackend(RemoteConfig cfg);
    std::string query(const Prompt& prompt) override;
    std::string name() const override { return "remote"; }

private:
    RemoteConfig cfg_;
};

// Cache-through query: hits skip the backend entirely.
std::string query_backend(KnowledgeBackend& backend, const Prompt& prompt, KnowledgeCache& cache);

struct CleanConfig {
    // Tokens made of two or more "yes"/"no" units glued together are model
    // artifacts, not answers. Extra literal tokens can be stripped as well.
    std::vector<std::string> extra_degenerate_tokens;
};

std::string clean_knowledge_text(const std::string& text, const CleanConfig& cfg = {});

std::vector<const Sample*> select_in_context_examples(const Sample& sample,
                                                      const std::vector<Sample>& pool, int n,
                                                      const EmbeddingTower& query_tower);

// In-context examples for a sample drawn from its own dataset, with the
// sample itself excluded. Returns at most n pointers into `dataset`.
std::vector<const Sample*> dataset_examples(const Sample& sample,
                                            const std::vector<Sample>& dataset, int n,
                                            const EmbeddingTower& query_tower);

struct PromptOptions {
    std::string instructions = "Please answer the question according to the context.";
    std::vector<const Sample*> examples;
    CleanConfig clean;
};

// The answer a prompt example shows: the sample's most frequent gold answer,
// ties broken lexicographically.
std::string example_answer(const Sample& sample);

Prompt build_answer_prompt_textual(const Sample& sample, const PromptOptions& opts);
Prompt build_evidence_prompt_textual(const std::string& question,
                                     const std::string& tentative_answer);
Prompt build_answer_prompt_multimodal(const Sample& sample);
Prompt build_evidence_prompt_multimodal(const std::string& question,
                                        const std::string& tentative_answer,
                                        const ImageFeatures& features);

// Two-step answer-then-evidence protocol against both backends. A tentative
// answer that cleans to nothing yields an absent knowledge record.
std::pair<std::optional<ImplicitKnowledge>, std::optional<ImplicitKnowledge>>
fetch_implicit_knowledge(const Sample& sample, KnowledgeBackend& backend_textual,
                         KnowledgeBackend& backend_multimodal, KnowledgeCache& cache,
                         const PromptOptions& opts);

}  // namespace two
