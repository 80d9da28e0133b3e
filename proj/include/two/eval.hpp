// Copyright (c) 2026 two contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "two/datamodel.hpp"

namespace two {

// lowercase, strip punctuation, drop the articles a/an/the, collapse spaces
std::string normalize_answer(const std::string& text);

enum class SoftMode { simple, official };
SoftMode soft_mode_from_name(const std::string& name);

// simple: min(matches/3, 1). official: annotations are cycled up to 10 and
// min(matches/3, 1) is averaged over the leave-one-out subsets.
double soft_accuracy(const std::string& pred, const std::vector<std::string>& answers,
                     SoftMode mode = SoftMode::simple);

int exact_match(const std::string& pred, const std::vector<std::string>& answers);

// true iff some answer's normalized token sequence occurs contiguously in the
// normalized knowledge tokens
bool hit(const std::string& knowledge_text, const std::vector<std::string>& answers);

extern const std::vector<std::string> kHitSelectors;

// selector: gpt3_ans, gpt3_evi, gpt3_ans+evi, ofa_ans, ofa_evi, ofa_ans+evi,
// caption, labels, ocr, visual_context, wikipedia, wikipedia(k), all.
// Strict mode errors (with counts) when a referenced knowledge field is
// absent; permissive treats it as empty text.
double hit_rate(const std::vector<Sample>& dataset, const std::string& selector,
                bool permissive = false);

struct EnsembleConfig {
    int size = 6;
};

// Most frequent normalized answer; ties resolved by the lowest model seed
// among the tied answers. Returns that model's original answer text.
std::string ensemble_vote(const std::vector<std::pair<int, std::string>>& seed_and_answer,
                          const EnsembleConfig& cfg = {});

struct PerSample {
    std::string id;
    double acc = 0.0;
    double em = 0.0;
};

struct MetricsReport {
    double acc = 0.0;  // mean soft accuracy x100
    double em = 0.0;   // mean exact match x100
    int n = 0;
    std::vector<PerSample> per_sample;
    std::map<std::string, double> hit_rates;
    std::map<std::string, int64_t> notes;

    nlohmann::json to_json() const;
    static MetricsReport from_json(const nlohmann::json& j);
};

MetricsReport evaluate(const std::vector<Prediction>& predictions,
                       const std::vector<Sample>& dataset, SoftMode mode = SoftMode::simple);

// Joins per-source hit rates with per-source accuracy reports into one table.
nlohmann::json analyze_conversion(const std::map<std::string, double>& hit_rates,
                                  const std::map<std::string, MetricsReport>& reports);

}  // namespace two
