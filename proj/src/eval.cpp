// Copyright (c) 2026 two contributors
// SPDX-License-Identifier: Apache-2.0

#include "two/eval.hpp"

#include <algorithm>
#include <set>
#include <unordered_map>

#include "two/common.hpp"
#include "two/visualctx.hpp"

using nlohmann::json;

namespace two {

std::string normalize_answer(const std::string& text) {
    std::string cleaned;
    cleaned.reserve(text.size());
    for (unsigned char c : text) {
        if (c >= 'A' && c <= 'Z') {
            cleaned += static_cast<char>(c - 'A' + 'a');
        } else if ((c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c >= 0x80) {
            cleaned += static_cast<char>(c);
        } else if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v') {
            cleaned += ' ';
        }
        // remaining ASCII is punctuation: dropped
    }
    std::vector<std::string> words;
    for (auto& w : split_ws(cleaned))
        if (w != "a" && w != "an" && w != "the") words.push_back(std::move(w));
    return join(words, " ");
}

SoftMode soft_mode_from_name(const std::string& name) {
    if (name == "simple") return SoftMode::simple;
    if (name == "official") return SoftMode::official;
    throw UsageError("mode must be \"simple\" or \"official\", got \"" + name + "\"");
}

double soft_accuracy(const std::string& pred, const std::vector<std::string>& answers,
                     SoftMode mode) {
    if (answers.empty()) throw ValidationError("soft_accuracy needs a nonempty answer set");
    const std::string p = normalize_answer(pred);
    std::vector<std::string> norm;
    norm.reserve(answers.size());
    for (const auto& a : answers) norm.push_back(normalize_answer(a));

    if (mode == SoftMode::simple) {
        int matches = 0;
        for (const auto& a : norm)
            if (a == p) ++matches;
        return std::min(matches / 3.0, 1.0);
    }

    // Cycle annotations up to the conventional 10, then average the
    // leave-one-out subset scores.
    std::vector<std::string> padded = norm;
    for (size_t i = 0; padded.size() < 10; ++i) padded.push_back(norm[i % norm.size()]);
    double sum = 0.0;
    for (size_t out = 0; out < padded.size(); ++out) {
        int matches = 0;
        for (size_t i = 0; i < padded.size(); ++i)
            if (i != out && padded[i] == p) ++matches;
        sum += std::min(matches / 3.0, 1.0);
    }
    return sum / static_cast<double>(padded.size());
}

int exact_match(const std::string& pred, const std::vector<std::string>& answers) {
    if (answers.empty()) throw ValidationError("exact_match needs a nonempty answer set");
    const std::string p = normalize_answer(pred);
    for (const auto& a : answers)
        if (normalize_answer(a) == p) return 1;
    return 0;
}

bool hit(const std::string& knowledge_text, const std::vector<std::string>& answers) {
    std::vector<std::string> k_tokens = split_ws(normalize_answer(knowledge_text));
    if (k_tokens.empty()) return false;
    for (const auto& answer : answers) {
        std::vector<std::string> a_tokens = split_ws(normalize_answer(answer));
        if (a_tokens.empty() || a_tokens.size() > k_tokens.size()) continue;
        for (size_t start = 0; start + a_tokens.size() <= k_tokens.size(); ++start) {
            if (std::equal(a_tokens.begin(), a_tokens.end(), k_tokens.begin() + start)) {
                return true;
            }
        }
    }
    return false;
}

const std::vector<std::string> kHitSelectors = {
    "gpt3_ans", "gpt3_evi", "gpt3_ans+evi", "ofa_ans",        "ofa_evi", "ofa_ans+evi",
    "caption",  "labels",   "ocr",          "visual_context", "wikipedia", "all"};

namespace {

struct SelectorText {
    std::string text;
    bool absent = false;  // a referenced knowledge field is missing
};

std::string labels_text(const VisualContext& ctx) {
    std::vector<std::string> phrases;
    phrases.reserve(ctx.labels.size());
    for (const auto& lp : ctx.labels) phrases.push_back(render_label_phrase(lp));
    return join(phrases, " ");
}

std::string implicit_pair_text(const ImplicitKnowledge& k, bool ans, bool evi) {
    std::vector<std::string> parts;
    if (ans) parts.push_back(k.tentative_answer);
    if (evi) parts.push_back(k.evidence);
    return join(parts, " ");
}

std::string wikipedia_text(const KnowledgeBundle& b, int k) {
    std::vector<std::string> parts;
    int limit = k < 0 ? static_cast<int>(b.passages.size())
                      : std::min<int>(k, static_cast<int>(b.passages.size()));
    for (int i = 0; i < limit; ++i) parts.push_back(b.passages[static_cast<size_t>(i)].text);
    return join(parts, " ");
}

SelectorText selector_text(const Sample& s, const std::string& selector, int wiki_k) {
    const VisualContext& ctx = s.visual_context;
    if (selector == "caption") return {ctx.caption, false};
    if (selector == "labels") return {labels_text(ctx), false};
    if (selector == "ocr") return {join(ctx.ocr, " "), false};
    if (selector == "visual_context") return {render_visual_context(ctx), false};

    const KnowledgeBundle* b = s.knowledge ? &*s.knowledge : nullptr;
    auto implicit_part = [&](bool textual, bool ans, bool evi) -> SelectorText {
        if (!b) return {"", true};
        const auto& field = textual ? b->implicit_textual : b->implicit_multimodal;
        if (!field) return {"", true};
        return {implicit_pair_text(*field, ans, evi), false};
    };
    if (selector == "gpt3_ans") return implicit_part(true, true, false);
    if (selector == "gpt3_evi") return implicit_part(true, false, true);
    if (selector == "gpt3_ans+evi") return implicit_part(true, true, true);
    if (selector == "ofa_ans") return implicit_part(false, true, false);
    if (selector == "ofa_evi") return implicit_part(false, false, true);
    if (selector == "ofa_ans+evi") return implicit_part(false, true, true);
    if (selector == "wikipedia") {
        if (!b) return {"", true};
        return {wikipedia_text(*b, wiki_k), false};
    }
    if (selector == "all") {
        SelectorText gpt = implicit_part(true, true, true);
        SelectorText ofa = implicit_part(false, true, true);
        SelectorText wiki = b ? SelectorText{wikipedia_text(*b, wiki_k), false}
                              : SelectorText{"", true};
        std::vector<std::string> parts = {render_visual_context(ctx), gpt.text, ofa.text,
                                          wiki.text};
        return {join(parts, " "), gpt.absent || ofa.absent || wiki.absent};
    }
    throw UsageError("unknown hit source \"" + selector + "\"");
}

// "wikipedia(3)" -> base "wikipedia", k=3
std::pair<std::string, int> split_selector(const std::string& selector) {
    auto open = selector.find('(');
    if (open == std::string::npos) return {selector, -1};
    if (selector.back() != ')' || selector.compare(0, open, "wikipedia") != 0)
        throw UsageError("malformed hit source \"" + selector + "\"");
    std::string num = selector.substr(open + 1, selector.size() - open - 2);
    try {
        int k = std::stoi(num);
        if (k < 1) throw UsageError("wikipedia(k) needs k >= 1");
        return {"wikipedia", k};
    } catch (const std::invalid_argument&) {
        throw UsageError("malformed hit source \"" + selector + "\"");
    }
}

}  // namespace

double hit_rate(const std::vector<Sample>& dataset, const std::string& selector,
                bool permissive) {
    if (dataset.empty()) throw ValidationError("hit_rate over an empty dataset");
    auto [base, wiki_k] = split_selector(selector);
    int64_t hits = 0, absent = 0;
    for (const auto& s : dataset) {
        SelectorText st = selector_text(s, base, wiki_k);
        if (st.absent) {
            ++absent;
            if (permissive) continue;
        }
        if (hit(st.text, s.answers)) ++hits;
    }
    if (absent > 0 && !permissive)
        throw MissingKnowledgeError("source \"" + selector + "\" is absent on " +
                                    std::to_string(absent) + " of " +
                                    std::to_string(dataset.size()) + " samples");
    return 100.0 * static_cast<double>(hits) / static_cast<double>(dataset.size());
}

std::string ensemble_vote(const std::vector<std::pair<int, std::string>>& seed_and_answer,
                          const EnsembleConfig& cfg) {
    if (static_cast<int>(seed_and_answer.size()) != cfg.size)
        throw ValidationError("ensemble expects " + std::to_string(cfg.size) + " answers, got " +
                              std::to_string(seed_and_answer.size()));
    std::map<std::string, int> counts;
    std::map<std::string, int> lowest_seed;
    std::map<std::string, std::string> surface_of_lowest;
    for (const auto& [seed, answer] : seed_and_answer) {
        std::string norm = normalize_answer(answer);
        ++counts[norm];
        auto it = lowest_seed.find(norm);
        if (it == lowest_seed.end() || seed < it->second) {
            lowest_seed[norm] = seed;
            surface_of_lowest[norm] = answer;
        }
    }
    std::string winner;
    int best_count = -1;
    int best_seed = 0;
    for (const auto& [norm, count] : counts) {
        int seed = lowest_seed[norm];
        if (count > best_count || (count == best_count && seed < best_seed)) {
            winner = norm;
            best_count = count;
            best_seed = seed;
        }
    }
    return surface_of_lowest[winner];
}

json MetricsReport::to_json() const {
    json j;
    j["acc"] = acc;
    j["em"] = em;
    j["n"] = n;
    json per = json::array();
    for (const auto& s : per_sample) per.push_back({{"id", s.id}, {"acc", s.acc}, {"em", s.em}});
    j["per_sample"] = per;
    j["hit_rates"] = hit_rates;
    j["notes"] = notes;
    return j;
}

MetricsReport MetricsReport::from_json(const json& j) {
    MetricsReport r;
    r.acc = j.at("acc").get<double>();
    r.em = j.at("em").get<double>();
    r.n = j.at("n").get<int>();
    for (const auto& s : j.at("per_sample"))
        r.per_sample.push_back(
            {s.at("id").get<std::string>(), s.at("acc").get<double>(), s.at("em").get<double>()});
    if (j.contains("hit_rates"))
        r.hit_rates = j["hit_rates"].get<std::map<std::string, double>>();
    if (j.contains("notes")) r.notes = j["notes"].get<std::map<std::string, int64_t>>();
    return r;
}

MetricsReport evaluate(const std::vector<Prediction>& predictions,
                       const std::vector<Sample>& dataset, SoftMode mode) {
    if (dataset.empty()) throw ValidationError("evaluate over an empty dataset");
    std::unordered_map<std::string, const Prediction*> by_id;
    for (const auto& p : predictions) {
        if (!by_id.emplace(p.sample_id, &p).second)
            throw ValidationError("duplicate prediction for sample \"" + p.sample_id + "\"");
    }
    std::vector<std::string> missing;
    std::set<std::string> dataset_ids;
    for (const auto& s : dataset) {
        dataset_ids.insert(s.id);
        if (!by_id.count(s.id)) missing.push_back(s.id);
    }
    if (!missing.empty())
        throw ValidationError("missing predictions for " + std::to_string(missing.size()) +
                              " samples: " + join(missing, ", "));
    for (const auto& p : predictions)
        if (!dataset_ids.count(p.sample_id))
            throw ValidationError("prediction for unknown sample \"" + p.sample_id + "\"");

    MetricsReport report;
    report.n = static_cast<int>(dataset.size());
    double acc_sum = 0.0, em_sum = 0.0;
    for (const auto& s : dataset) {
        const Prediction& p = *by_id.at(s.id);
        double a = soft_accuracy(p.answer, s.answers, mode);
        double e = static_cast<double>(exact_match(p.answer, s.answers));
        acc_sum += a;
        em_sum += e;
        report.per_sample.push_back({s.id, a, e});
    }
    report.acc = 100.0 * acc_sum / static_cast<double>(report.n);
    report.em = 100.0 * em_sum / static_cast<double>(report.n);
    return report;
}

json analyze_conversion(const std::map<std::string, double>& hit_rates,
                        const std::map<std::string, MetricsReport>& reports) {
    if (hit_rates.empty()) throw ValidationError("analyze_conversion needs hit rates");
    json rows = json::array();
    for (const auto& [source, rate] : hit_rates) {
        auto it = reports.find(source);
        if (it == reports.end())
            throw ValidationError("no accuracy report for source \"" + source + "\"");
        rows.push_back({{"source", source},
                        {"hit", rate},
                        {"acc", it->second.acc},
                        {"em", it->second.em}});
    }
    for (const auto& [source, r] : reports)
        if (!hit_rates.count(source))
            throw ValidationError("no hit rate for source \"" + source + "\"");
    json out;
    out["rows"] = rows;
    return out;
}

}  // namespace two
