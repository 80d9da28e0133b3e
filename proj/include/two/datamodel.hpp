// Copyright (c) 2026 two contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>
#include <optional>
#include <string>
#include <vector>

#include "two/common.hpp"

namespace two {

using Matrix = Eigen::MatrixXd;

// Region features for one image: one row per detected object plus its
// normalized box. Row counts of the two blocks always agree.
struct ImageFeatures {
    Matrix object_features;  // rows x feat_dim
    Matrix boxes;            // rows x 4, coordinates in [0,1]

    int rows() const { return static_cast<int>(object_features.rows()); }
    void validate(const std::string& context) const;
};

// One attribute-labeled object phrase: zero or more attribute words plus
// exactly one object word.
struct LabelPhrase {
    std::vector<std::string> attributes;
    std::string object;

    bool operator==(const LabelPhrase&) const = default;
};

// Textual description of an image: caption, object phrases, OCR tokens.
// All three may be empty for degenerate images.
struct VisualContext {
    std::string caption;
    std::vector<LabelPhrase> labels;
    std::vector<std::string> ocr;

    bool operator==(const VisualContext&) const = default;
};

enum class KnowledgeSource { textual, multimodal };

// Tentative answer plus free-form supporting evidence from one prompted
// knowledge backend. The answer is nonempty after cleanup; evidence may be
// empty.
struct ImplicitKnowledge {
    std::string tentative_answer;
    std::string evidence;
    KnowledgeSource source_tag = KnowledgeSource::textual;

    bool operator==(const ImplicitKnowledge&) const = default;
};

struct ScoredPassage {
    std::string passage_id;
    std::string text;
    double score = 0.0;

    bool operator==(const ScoredPassage&) const = default;
};

// Everything attached to a sample by the knowledge stages: retrieved
// passages (sorted by non-increasing score) and the two optional implicit
// knowledge records.
struct KnowledgeBundle {
    std::vector<ScoredPassage> passages;
    std::optional<ImplicitKnowledge> implicit_textual;
    std::optional<ImplicitKnowledge> implicit_multimodal;

    void validate(const std::string& context, int expected_passages = -1) const;
};

struct Sample {
    std::string id;
    std::string question;
    std::string image_ref;
    ImageFeatures features;
    std::vector<std::string> answers;  // annotated answer multiset
    VisualContext visual_context;
    std::optional<KnowledgeBundle> knowledge;
};

struct Prediction {
    std::string sample_id;
    std::string answer;
    int model_seed = 0;

    bool operator==(const Prediction&) const = default;
};

enum class Split { train, eval, inference };

// --- feature sidecar (binary, magic "IMF1") ---------------------------------

void save_image_features(const ImageFeatures& f, const std::string& path);
ImageFeatures load_image_features(const std::string& path);

// --- datasets ---------------------------------------------------------------

struct ExpectedShape {
    int object_count = -1;  // -1 = accept whatever the sidecar declares
    int feat_dim = -1;
};

// Loads a line-delimited dataset, resolving feature sidecars relative to the
// dataset file. Order of records is preserved. Every malformed record yields
// a typed error naming the line.
std::vector<Sample> load_dataset(const std::string& path, Split split,
                                 const ExpectedShape& expected = {});

void save_dataset(const std::vector<Sample>& samples, const std::string& path,
                  const std::string& features_dir);

// --- predictions --------------------------------------------------------------

void save_predictions(const std::vector<Prediction>& predictions, const std::string& path,
                      const std::string& meta_json = "");
std::vector<Prediction> load_predictions(const std::string& path);

// --- knowledge bundles ---------------------------------------------------------

void save_knowledge(const std::vector<std::pair<std::string, KnowledgeBundle>>& bundles,
                    const std::string& path, const std::string& meta_json = "");
std::vector<std::pair<std::string, KnowledgeBundle>> load_knowledge(const std::string& path);

// Joins bundles onto samples by id. With `required`, a sample without a
// bundle is an error; unknown bundle ids always are.
void attach_knowledge(std::vector<Sample>& samples,
                      const std::vector<std::pair<std::string, KnowledgeBundle>>& bundles,
                      bool required, int expected_passages = -1);

}  // namespace two
