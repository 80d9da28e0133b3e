// Copyright (c) 2026 two contributors
// SPDX-License-Identifier: Apache-2.0
//
// Regenerates the committed fixture tree. Deterministic: rerunning produces
// byte-identical files, so a diff after a rerun shows exactly what changed.

#include <cctype>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "two/common.hpp"
#include "two/datamodel.hpp"
#include "two/implicit.hpp"
#include "two/pipeline.hpp"
#include "two/retriever.hpp"
#include "two/rng.hpp"
#include "two/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace two;

namespace {

const std::vector<std::string> kAnswerPool = {"guitar", "piano", "violin", "trumpet",
                                              "drums",  "flute", "cello",  "harp",
                                              "banjo",  "oboe",  "tuba",   "sax"};

void scrub_environment() {
    for (const auto& [key, value] : Settings::defaults()) {
        std::string name = "TWO_";
        for (char c : key) name += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
        unsetenv(name.c_str());
    }
}

void write_toy_config(const std::string& path) {
    write_text_file(path,
                    "# reduced geometry so the shipped pipeline runs in seconds\n"
                    "h = 16\n"
                    "h_mm = 16\n"
                    "L_q = 8\n"
                    "L_v = 6\n"
                    "L_t = 48\n"
                    "k = 5\n"
                    "feat_dim = 32\n"
                    "heads = 2\n"
                    "max_answer_len = 4\n"
                    "vocab_size = 256\n"
                    "epochs = 3\n"
                    "batch_size = 8\n"
                    "lr_txt = 0.003\n"
                    "lr_mm = 0.001\n"
                    "warmup_steps = 4\n"
                    "log_every = 5\n"
                    "dim = 24\n"
                    "emb_dim = 24\n"
                    "buckets = 512\n"
                    "tower_max_len = 64\n"
                    "icl = 4\n"
                    "seed = 0\n");
}

void write_corpus(const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    int id = 0;
    auto emit = [&](const std::string& text) {
        json j;
        char buf[8];
        std::snprintf(buf, sizeof(buf), "p%03d", id++);
        j["id"] = buf;
        j["text"] = text;
        os << j.dump() << "\n";
    };
    for (const auto& a : kAnswerPool) {
        emit("the " + a + " is an instrument often seen in small ensembles");
        emit("players keep the " + a + " close to the stage during rehearsal");
    }
    for (int i = 0; i < 16; ++i)
        emit("neutral filler passage number " + std::to_string(i) +
             " with no instrument mentioned");
    if (!os) throw IoError("write failed for " + path);
}

// Implicit-knowledge responses designed for the toy datasets: the tentative
// answer is the gold answer and the evidence mentions it again.
struct DesignedResponses {
    std::string textual_answer;
    std::string textual_evidence;
    std::string multimodal_answer;
    std::string multimodal_evidence;
};

DesignedResponses designed_for(const Sample& s) {
    const std::string& gold = s.answers.front();
    return {gold, "the scenes pair code items with " + gold, gold,
            "the picture shows elements linked to " + gold};
}

// Builds the replay fixture by fingerprinting the exact prompts gen-knowledge
// will issue, and the knowledge file those responses turn into.
void write_toy_knowledge(const Settings& s, const std::vector<Sample>& dataset,
                         const PassageIndex& index, const std::string& replay_path,
                         const std::string& knowledge_path) {
    EmbeddingTower query_tower = make_tower(EmbeddingTower::Role::query, index.tower_cfg);
    const int icl = s.geti("icl");
    const int k = s.geti("k");

    KnowledgeCache replay;
    std::vector<std::pair<std::string, KnowledgeBundle>> bundles;
    for (const auto& sample : dataset) {
        DesignedResponses r = designed_for(sample);
        PromptOptions opts;
        opts.instructions = s.gets("instructions");
        opts.examples = dataset_examples(sample, dataset, icl, query_tower);

        Prompt ta = build_answer_prompt_textual(sample, opts);
        replay.put(prompt_fingerprint(ta), ta.kind, r.textual_answer);
        std::string clean_ta = clean_knowledge_text(r.textual_answer);
        Prompt te = build_evidence_prompt_textual(sample.question, clean_ta);
        replay.put(prompt_fingerprint(te), te.kind, r.textual_evidence);

        Prompt ma = build_answer_prompt_multimodal(sample);
        replay.put(prompt_fingerprint(ma), ma.kind, r.multimodal_answer);
        std::string clean_ma = clean_knowledge_text(r.multimodal_answer);
        Prompt me = build_evidence_prompt_multimodal(sample.question, clean_ma, sample.features);
        replay.put(prompt_fingerprint(me), me.kind, r.multimodal_evidence);

        Eigen::VectorXd q =
            encode_query(sample.question, sample.visual_context.caption, query_tower);
        KnowledgeBundle b;
        b.passages = search(index, q, k);
        b.implicit_textual = ImplicitKnowledge{clean_ta, clean_knowledge_text(r.textual_evidence),
                                               KnowledgeSource::textual};
        b.implicit_multimodal = ImplicitKnowledge{
            clean_ma, clean_knowledge_text(r.multimodal_evidence), KnowledgeSource::multimodal};
        bundles.emplace_back(sample.id, std::move(b));
    }
    replay.save(replay_path);
    save_knowledge(bundles, knowledge_path);
}

// ---- the hand-labeled 20-sample evaluation fixture --------------------------
//
// Per sample: the prediction, the ten annotated answers (as count pairs), the
// phrase planted into hitting sources, and which sources hit. Match counts m
// drive soft accuracy min(m/3, 1); the hit flags drive every hit_rate
// selector. These labels are the oracle that the test suite hard-codes.

struct EvalSpec {
    std::string id;
    std::string question;
    std::string prediction;
    std::vector<std::pair<std::string, int>> answers;  // answer, multiplicity
    std::string embed;  // phrase planted into every hitting source
    bool cap, lab, ocr;
    bool g_ans, g_evi;
    bool o_ans, o_evi;
    std::vector<int> wiki;  // passage slots (0..4) that mention the phrase
};

const std::vector<EvalSpec> kEvalSpecs = {
    {"e01", "what food is on the plate", "sandwich", {{"sandwich", 10}}, "sandwich",
     true, false, false, true, false, true, false, {0}},
    {"e02", "what is the man eating", "Hot Dog", {{"hot dog", 3}, {"burger", 7}}, "hot dog",
     true, false, false, true, true, false, false, {0, 1}},
    {"e03", "what is the woman holding", "umbrella", {{"umbrella", 2}, {"parasol", 8}},
     "umbrella", true, true, false, true, false, true, true, {2}},
    {"e04", "what is flying in the sky", "kite", {{"kite", 1}, {"plane", 9}}, "kite",
     false, true, false, true, false, false, false, {}},
    {"e05", "what animal is on the couch", "dog", {{"cat", 10}}, "cat",
     false, false, false, false, false, false, false, {}},
    {"e06", "where was this picture taken", "The Beach!", {{"beach", 4}, {"ocean", 6}}, "beach",
     true, false, true, true, true, true, false, {0}},
    {"e07", "what fruit is in the bowl", "a banana", {{"banana", 2}, {"apple", 8}}, "banana",
     false, false, false, true, false, false, false, {4}},
    {"e08", "what is painted red on the curb", "fire hydrant",
     {{"Fire Hydrant.", 2}, {"hydrant", 1}, {"mailbox", 7}}, "fire hydrant",
     true, false, false, false, true, true, false, {0, 2}},
    {"e09", "what sign is at the corner", "stop sign", {{"stop  sign", 3}, {"yield sign", 7}},
     "stop sign", false, false, true, true, true, false, true, {2, 3}},
    {"e10", "what color is the door", "blue", {{"red", 5}, {"green", 5}}, "red",
     false, false, false, false, false, true, false, {}},
    {"e11", "how many dogs are there", "two", {{"2", 6}, {"two", 4}}, "2",
     false, false, false, true, false, false, false, {1}},
    {"e12", "what is being celebrated", "birthday party", {{"birthday", 2}, {"party", 8}},
     "birthday", false, false, false, false, false, false, false, {3}},
    {"e13", "what is in her hand", "cell phone", {{"cellphone", 3}, {"cell phone", 7}},
     "cell phone", true, false, false, true, false, true, false, {0, 1, 4}},
    {"e14", "what phrase is on the poster", "Déjà Vu", {{"déjà vu", 10}}, "déjà vu",
     false, true, false, true, true, false, false, {0}},
    {"e15", "how is the weather", "it's sunny", {{"its sunny", 3}, {"rainy", 7}}, "its sunny",
     false, false, false, true, false, false, false, {}},
    {"e16", "which direction does the arrow point", "north",
     {{"north", 1}, {"South", 1}, {"east", 8}}, "north",
     true, false, false, false, false, true, true, {0}},
    {"e17", "what sport is shown", "skateboarding",
     {{"skateboarding", 2}, {"skating", 2}, {"surfing", 6}}, "skateboarding",
     false, false, false, true, true, false, false, {1}},
    {"e18", "what animal is in the water", "an elephant", {{"elephant", 10}}, "elephant",
     true, true, false, true, false, true, false, {0, 1}},
    {"e19", "what drink is on the table", "wine", {{"Wine", 2}, {"beer", 8}}, "wine",
     false, false, false, false, true, false, false, {}},
    {"e20", "is the light on", "no", {{"no", 5}, {"yes", 5}}, "no",
     true, false, false, true, false, true, false, {0}},
};

const char* kGreek[] = {"alpha", "beta", "gamma", "delta", "epsilon"};

void write_eval20(const std::string& dir) {
    fs::create_directories(dir);
    std::mt19937_64 gen(derive_seed(0, "eval20.features"));

    std::vector<Sample> samples;
    std::vector<Prediction> predictions;
    std::vector<std::pair<std::string, KnowledgeBundle>> bundles;
    for (const auto& spec : kEvalSpecs) {
        Sample s;
        s.id = spec.id;
        s.question = spec.question;
        s.image_ref = "img-" + spec.id;
        for (const auto& [answer, count] : spec.answers)
            for (int i = 0; i < count; ++i) s.answers.push_back(answer);
        s.features.object_features = rng::uniform_matrix(gen, 6, 32, 0.0, 1.0);
        s.features.boxes = rng::uniform_matrix(gen, 6, 4, 0.0, 1.0);

        s.visual_context.caption = spec.cap ? "a photo of " + spec.embed + " on display"
                                            : "a photo of something on display";
        if (spec.lab) {
            for (const auto& word : split_ws(spec.embed))
                s.visual_context.labels.push_back({{}, word});
        } else {
            s.visual_context.labels.push_back({{"shiny"}, "object"});
        }
        if (spec.ocr) s.visual_context.ocr = split_ws(spec.embed);

        KnowledgeBundle b;
        for (int j = 0; j < 5; ++j) {
            bool hit_here = std::find(spec.wiki.begin(), spec.wiki.end(), j) != spec.wiki.end();
            ScoredPassage p;
            p.passage_id = "w-" + spec.id + "-" + std::to_string(j);
            p.text = hit_here ? "passage " + std::string(kGreek[j]) + " about " + spec.embed +
                                    " here"
                              : "passage " + std::string(kGreek[j]) + " about filler here";
            p.score = static_cast<double>(5 - j);
            b.passages.push_back(std::move(p));
        }
        b.implicit_textual = ImplicitKnowledge{
            spec.g_ans ? spec.embed : "unknown",
            spec.g_evi ? "this is because " + spec.embed + " is common"
                       : "this is because nothing matches",
            KnowledgeSource::textual};
        b.implicit_multimodal = ImplicitKnowledge{
            spec.o_ans ? spec.embed : "unknown",
            spec.o_evi ? "this is because " + spec.embed + " is common"
                       : "this is because nothing matches",
            KnowledgeSource::multimodal};
        bundles.emplace_back(s.id, std::move(b));

        Prediction p;
        p.sample_id = s.id;
        p.answer = spec.prediction;
        p.model_seed = 7;
        predictions.push_back(std::move(p));
        samples.push_back(std::move(s));
    }

    save_dataset(samples, dir + "/dataset.jsonl", "features");
    save_knowledge(bundles, dir + "/knowledge.jsonl");
    save_predictions(predictions, dir + "/predictions.jsonl");

    int rc = run_cli({"evaluate", "--dataset", dir + "/dataset.jsonl", "--predictions",
                      dir + "/predictions.jsonl", "--out", dir + "/golden_report.json"});
    if (rc != 0) throw Error("golden report generation failed with exit code " +
                             std::to_string(rc));
}

}  // namespace

int main(int argc, char** argv) {
    try {
        std::string root = argc > 1 ? argv[1] : "fixtures";
        scrub_environment();
        fs::create_directories(root);
        fs::create_directories(root + "/toysrc");
        fs::create_directories(root + "/train32");

        write_toy_config(root + "/toy.cfg");
        Settings s = Settings::resolve(root + "/toy.cfg", {});

        write_corpus(root + "/corpus.jsonl");

        const int rows = s.geti("L_v");
        const int feat_dim = s.geti("feat_dim");
        auto toysrc = generate_toy_source(24, rows, feat_dim, 11, kAnswerPool);
        save_dataset(toysrc, root + "/toysrc/dataset.jsonl", "features");

        auto train32 = generate_toy_source(32, rows, feat_dim, 22, kAnswerPool);
        save_dataset(train32, root + "/train32/dataset.jsonl", "features");

        auto corpus = load_corpus(root + "/corpus.jsonl");
        TowerConfig tower_cfg;
        tower_cfg.dim = s.geti("dim");
        tower_cfg.emb_dim = s.geti("emb_dim");
        tower_cfg.buckets = s.geti("buckets");
        tower_cfg.max_len = s.geti("tower_max_len");
        tower_cfg.seed = s.getu("seed");
        PassageIndex index =
            build_index(corpus, make_tower(EmbeddingTower::Role::passage, tower_cfg));
        write_toy_knowledge(s, train32, index, root + "/train32/replay.jsonl",
                            root + "/train32/knowledge.jsonl");

        write_eval20(root + "/eval20");

        std::cout << "fixtures written under " << root << "\n";
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "make_fixtures: " << e.what() << "\n";
        return 1;
    }
}
