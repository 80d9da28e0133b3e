// Copyright (c) 2026 two contributors
// SPDX-License-Identifier: Apache-2.0

#include "two/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "two/common.hpp"
#include "two/datamodel.hpp"
#include "two/eval.hpp"
#include "two/implicit.hpp"
#include "two/model.hpp"
#include "two/retriever.hpp"
#include "two/train.hpp"
#include "two/visualctx.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace two {

const std::map<std::string, std::string>& Settings::defaults() {
    static const std::map<std::string, std::string> d = {
        // model
        {"h", "32"},
        {"h_mm", "32"},
        {"h_mid", "-1"},
        {"L_q", "16"},
        {"L_v", "36"},
        {"L_t", "250"},
        {"k", "5"},
        {"feat_dim", "2048"},
        {"heads", "2"},
        {"mm_layers", "1"},
        {"txt_layers", "1"},
        {"dec_layers", "1"},
        {"max_answer_len", "8"},
        {"disable_mm_encoder", "false"},
        {"disable_txt_encoder", "false"},
        {"include_implicit_textual", "true"},
        {"include_implicit_multimodal", "true"},
        {"loss_mode", "standard"},
        {"vocab_size", "512"},
        // training
        {"epochs", "3"},
        {"batch_size", "8"},
        {"lr_mm", "1e-5"},
        {"lr_txt", "1e-4"},
        {"warmup_steps", "-1"},
        {"weight_decay", "0.01"},
        {"beta1", "0.9"},
        {"beta2", "0.999"},
        {"eps", "1e-8"},
        {"log_every", "10"},
        // retrieval towers
        {"dim", "64"},
        {"emb_dim", "64"},
        {"buckets", "4096"},
        {"tower_max_len", "128"},
        // implicit knowledge
        {"icl", "8"},
        {"instructions", "Please answer the question according to the context."},
        {"max_tokens", "64"},
        {"remote_host", "127.0.0.1"},
        {"remote_port", "8080"},
        {"remote_path", "/generate"},
        {"remote_timeout", "30"},
        {"remote_retries", "2"},
        // evaluation
        {"mode", "simple"},
        {"ensemble_size", "6"},
        // global
        {"seed", "0"},
        {"jobs", "1"},
    };
    return d;
}

namespace {

std::string env_name_for(const std::string& key) {
    std::string name = "TWO_";
    for (char c : key) name += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return name;
}

std::map<std::string, std::string> parse_config_file(const std::string& path) {
    std::map<std::string, std::string> out;
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config file " + path);
    std::string line;
    size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        auto eq = t.find('=');
        if (eq == std::string::npos)
            throw UsageError(path + ":" + std::to_string(lineno) + ": expected key=value");
        std::string key = trim(t.substr(0, eq));
        std::string value = trim(t.substr(eq + 1));
        if (!Settings::defaults().count(key))
            throw UsageError(path + ":" + std::to_string(lineno) + ": unknown config key \"" +
                             key + "\"");
        out[key] = value;
    }
    return out;
}

}  // namespace

Settings Settings::resolve(const std::string& config_path,
                           const std::map<std::string, std::string>& flag_overrides) {
    Settings s;
    s.values_ = defaults();
    for (const auto& [key, value] : s.values_) s.explicit_[key] = false;
    if (!config_path.empty()) {
        for (const auto& [key, value] : parse_config_file(config_path)) {
            s.values_[key] = value;
            s.explicit_[key] = true;
        }
    }
    for (const auto& [key, def] : defaults()) {
        if (const char* env = std::getenv(env_name_for(key).c_str())) {
            s.values_[key] = env;
            s.explicit_[key] = true;
        }
    }
    for (const auto& [key, value] : flag_overrides) s.set(key, value);
    return s;
}

void Settings::set(const std::string& key, const std::string& value) {
    if (!defaults().count(key)) throw UsageError("unknown config key \"" + key + "\"");
    values_[key] = value;
    explicit_[key] = true;
}

const std::string& Settings::gets(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw UsageError("unknown config key \"" + key + "\"");
    return it->second;
}

int Settings::geti(const std::string& key) const {
    try {
        size_t pos = 0;
        int v = std::stoi(gets(key), &pos);
        if (pos != gets(key).size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const UsageError&) {
        throw;
    } catch (const std::exception&) {
        throw UsageError("config key \"" + key + "\" is not an integer: " + gets(key));
    }
}

double Settings::getd(const std::string& key) const {
    try {
        size_t pos = 0;
        double v = std::stod(gets(key), &pos);
        if (pos != gets(key).size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const UsageError&) {
        throw;
    } catch (const std::exception&) {
        throw UsageError("config key \"" + key + "\" is not a number: " + gets(key));
    }
}

bool Settings::getb(const std::string& key) const {
    const std::string& v = gets(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw UsageError("config key \"" + key + "\" is not a boolean: " + v);
}

uint64_t Settings::getu(const std::string& key) const {
    try {
        size_t pos = 0;
        uint64_t v = std::stoull(gets(key), &pos);
        if (pos != gets(key).size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const UsageError&) {
        throw;
    } catch (const std::exception&) {
        throw UsageError("config key \"" + key + "\" is not an unsigned integer: " + gets(key));
    }
}

bool Settings::is_set(const std::string& key) const {
    auto it = explicit_.find(key);
    return it != explicit_.end() && it->second;
}

std::string Settings::config_hash() const {
    std::string serialized;
    for (const auto& [key, value] : values_) serialized += key + "=" + value + "\n";
    return hex64(fnv1a64(serialized));
}

json Settings::meta(const std::string& command) const {
    json m;
    m["command"] = command;
    m["config_hash"] = config_hash();
    m["seed"] = getu("seed");
    return m;
}

std::string Settings::meta_line(const std::string& command) const {
    json j;
    j["_meta"] = meta(command);
    return j.dump();
}

namespace {

ModelConfig model_config_from(const Settings& s) {
    ModelConfig c;
    c.h = s.geti("h");
    c.h_mm = s.geti("h_mm");
    c.h_mid = s.geti("h_mid");
    c.L_q = s.geti("L_q");
    c.L_v = s.geti("L_v");
    c.L_t = s.geti("L_t");
    c.k = s.geti("k");
    c.feat_dim = s.geti("feat_dim");
    c.heads = s.geti("heads");
    c.mm_layers = s.geti("mm_layers");
    c.txt_layers = s.geti("txt_layers");
    c.dec_layers = s.geti("dec_layers");
    c.max_answer_len = s.geti("max_answer_len");
    c.disable_mm_encoder = s.getb("disable_mm_encoder");
    c.disable_txt_encoder = s.getb("disable_txt_encoder");
    c.include_implicit_textual = s.getb("include_implicit_textual");
    c.include_implicit_multimodal = s.getb("include_implicit_multimodal");
    c.loss_mode = s.gets("loss_mode");
    c.seed = s.getu("seed");
    return c;
}

TrainConfig train_config_from(const Settings& s) {
    TrainConfig c;
    c.epochs = s.geti("epochs");
    c.batch_size = s.geti("batch_size");
    c.lr_mm = s.getd("lr_mm");
    c.lr_txt = s.getd("lr_txt");
    c.warmup_steps = s.geti("warmup_steps");
    c.weight_decay = s.getd("weight_decay");
    c.beta1 = s.getd("beta1");
    c.beta2 = s.getd("beta2");
    c.eps = s.getd("eps");
    c.seed = s.getu("seed");
    c.log_every = s.geti("log_every");
    return c;
}

TowerConfig tower_config_from(const Settings& s) {
    TowerConfig c;
    c.dim = s.geti("dim");
    c.emb_dim = s.geti("emb_dim");
    c.buckets = s.geti("buckets");
    c.max_len = s.geti("tower_max_len");
    c.seed = s.getu("seed");
    return c;
}

std::vector<std::string> vocab_texts_for(const std::vector<Sample>& samples) {
    std::vector<std::string> texts;
    for (const auto& s : samples) {
        texts.push_back(s.question);
        for (const auto& a : s.answers) texts.push_back(a);
        texts.push_back(render_visual_context(s.visual_context));
        if (s.knowledge) {
            for (const auto& p : s.knowledge->passages) texts.push_back(p.text);
            if (s.knowledge->implicit_textual) {
                texts.push_back(s.knowledge->implicit_textual->tentative_answer);
                texts.push_back(s.knowledge->implicit_textual->evidence);
            }
            if (s.knowledge->implicit_multimodal) {
                texts.push_back(s.knowledge->implicit_multimodal->tentative_answer);
                texts.push_back(s.knowledge->implicit_multimodal->evidence);
            }
        }
    }
    return texts;
}

// A bundle with some but fewer passages than the model's k means retrieval
// and model config went out of sync. Zero passages stays legal so retrieval
// can be ablated away entirely; extras beyond k are simply not consumed.
void check_k_consistency(const std::vector<Sample>& samples, int k) {
    for (const auto& s : samples) {
        if (!s.knowledge) continue;
        size_t have = s.knowledge->passages.size();
        if (have > 0 && have < static_cast<size_t>(k))
            throw ValidationError("sample \"" + s.id + "\" carries " + std::to_string(have) +
                                  " passages but the model expects k=" + std::to_string(k));
    }
}

std::unique_ptr<KnowledgeBackend> make_backend(const std::string& kind,
                                               const std::string& fixtures, const Settings& s) {
    if (kind == "echo") return std::make_unique<EchoBackend>();
    if (kind == "replay") {
        if (fixtures.empty()) throw UsageError("--backend replay requires --fixtures");
        return std::make_unique<ReplayBackend>(fixtures);
    }
    if (kind == "remote") {
        RemoteConfig rc;
        rc.host = s.gets("remote_host");
        rc.port = s.geti("remote_port");
        rc.path = s.gets("remote_path");
        rc.timeout_sec = s.geti("remote_timeout");
        rc.max_retries = s.geti("remote_retries");
        rc.max_tokens = s.geti("max_tokens");
        return std::make_unique<RemoteBackend>(rc);
    }
    throw UsageError("unknown backend \"" + kind + "\" (expected replay, echo or remote)");
}

void write_json_file(const json& j, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os << j.dump(2) << "\n";
    if (!os) throw IoError("write failed for " + path);
}

std::vector<Prediction> generate_predictions(const Model& model,
                                             const std::vector<Sample>& samples,
                                             int64_t* truncated_out) {
    AssemblyOptions opts;
    opts.include_implicit_textual = model.config().include_implicit_textual;
    opts.include_implicit_multimodal = model.config().include_implicit_multimodal;
    std::vector<Prediction> preds;
    preds.reserve(samples.size());
    int64_t truncated = 0;
    for (const auto& s : samples) {
        AssembledInput input = assemble_input(s, model.config(), model.vocab(), opts);
        truncated += input.truncated_streams;
        Prediction p;
        p.sample_id = s.id;
        p.answer = model.predict(input, s.features);
        p.model_seed = static_cast<int>(model.config().seed);
        preds.push_back(std::move(p));
    }
    if (truncated_out) *truncated_out = truncated;
    return preds;
}

std::vector<std::pair<std::string, KnowledgeBundle>> retrieve_bundles(
    const PassageIndex& index, const EmbeddingTower& query_tower,
    const std::vector<Sample>& samples, int k) {
    std::vector<std::pair<std::string, KnowledgeBundle>> bundles;
    bundles.reserve(samples.size());
    for (const auto& sample : samples) {
        Eigen::VectorXd q =
            encode_query(sample.question, sample.visual_context.caption, query_tower);
        KnowledgeBundle b;
        b.passages = search(index, q, k);
        bundles.emplace_back(sample.id, std::move(b));
    }
    return bundles;
}

// Passage lists from a retrieval pass plus implicit fields from a knowledge
// file, joined by sample id. Samples without an implicit entry keep only
// their passages.
std::vector<std::pair<std::string, KnowledgeBundle>> merge_implicit(
    std::vector<std::pair<std::string, KnowledgeBundle>> retrieved,
    const std::string& knowledge_path) {
    if (knowledge_path.empty()) return retrieved;
    std::map<std::string, KnowledgeBundle> implicit;
    for (auto& [id, b] : load_knowledge(knowledge_path)) implicit[id] = std::move(b);
    for (auto& [id, b] : retrieved) {
        auto it = implicit.find(id);
        if (it == implicit.end()) continue;
        b.implicit_textual = it->second.implicit_textual;
        b.implicit_multimodal = it->second.implicit_multimodal;
    }
    return retrieved;
}

Model finetune_over(const Settings& s, const std::string& ckpt_path, bool fresh,
                    std::vector<Sample>& target, std::ostream* log, int64_t* steps_out) {
    std::optional<Model> model;
    if (fresh) {
        Vocabulary vocab = Vocabulary::build(vocab_texts_for(target), s.geti("vocab_size"));
        model.emplace(model_config_from(s), vocab);
    } else {
        if (ckpt_path.empty()) throw UsageError("finetune needs either --ckpt or --fresh");
        LoadedCheckpoint loaded = load_checkpoint(ckpt_path);
        model.emplace(std::move(loaded.model));
        // Assembly-time knobs may be overridden on top of a checkpoint; the
        // tensor-shaping fields stay as trained.
        ModelConfig& cfg = model->mutable_config();
        if (s.is_set("k")) cfg.k = s.geti("k");
        if (s.is_set("include_implicit_textual"))
            cfg.include_implicit_textual = s.getb("include_implicit_textual");
        if (s.is_set("include_implicit_multimodal"))
            cfg.include_implicit_multimodal = s.getb("include_implicit_multimodal");
        if (s.is_set("loss_mode")) cfg.loss_mode = s.gets("loss_mode");
        if (s.is_set("seed")) cfg.seed = s.getu("seed");
        cfg.validate();
    }
    check_k_consistency(target, model->config().k);

    TrainConfig tc = train_config_from(s);
    tc.stage = "finetune";
    std::vector<const Sample*> ptrs;
    ptrs.reserve(target.size());
    for (const auto& sample : target) ptrs.push_back(&sample);
    Trainer trainer(*model, tc, std::move(ptrs));
    trainer.run(log);
    if (steps_out) *steps_out = trainer.step();
    return std::move(*model);
}

void save_finetuned(const Settings& s, const Model& model, int64_t steps,
                    const std::string& path) {
    // Optimizer moments are not carried past a finished finetune run; resume
    // within a run goes through the library API, not the CLI.
    CheckpointExtra extra;
    extra.step = steps;
    extra.stage = "finetune";
    extra.meta_json = s.meta("finetune").dump();
    save_checkpoint(model, extra, path);
}

MetricsReport evaluate_model(const Settings& s, const Model& model, std::vector<Sample>& dataset,
                             const std::string& pred_out, const std::string& report_out) {
    check_k_consistency(dataset, model.config().k);
    int64_t truncated = 0;
    std::vector<Prediction> preds = generate_predictions(model, dataset, &truncated);
    if (!pred_out.empty()) save_predictions(preds, pred_out, s.meta_line("evaluate"));
    MetricsReport report = evaluate(preds, dataset, soft_mode_from_name(s.gets("mode")));
    if (truncated > 0) report.notes["truncated_streams"] = truncated;
    json out = report.to_json();
    out["meta"] = s.meta("evaluate");
    write_json_file(out, report_out);
    return report;
}

std::string format_pct(double v) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(2);
    os << v;
    return os.str();
}

// ---- commands -------------------------------------------------------------

int cmd_build_index(const Settings& s, const std::string& corpus_path,
                    const std::string& out_path) {
    auto corpus = load_corpus(corpus_path);
    EmbeddingTower tower = make_tower(EmbeddingTower::Role::passage, tower_config_from(s));
    PassageIndex index = build_index(corpus, tower);
    save_index(index, out_path, s.meta("build-index").dump());
    std::cout << "indexed " << index.passage_ids.size() << " passages (dim "
              << index.embeddings.cols() << ") -> " << out_path << "\n";
    return 0;
}

int cmd_retrieve(const Settings& s, const std::string& index_path, const std::string& dataset_path,
                 int k, const std::string& out_path) {
    PassageIndex index = load_index(index_path);
    EmbeddingTower query_tower = make_tower(EmbeddingTower::Role::query, index.tower_cfg);
    std::vector<Sample> samples = load_dataset(dataset_path, Split::inference);
    auto bundles = retrieve_bundles(index, query_tower, samples, k);
    save_knowledge(bundles, out_path, s.meta_line("retrieve"));
    std::cout << "retrieved top-" << k << " passages for " << bundles.size() << " samples -> "
              << out_path << "\n";
    return 0;
}

int cmd_gen_knowledge(const Settings& s, const std::string& dataset_path,
                      const std::string& backend_kind, const std::string& fixtures,
                      const std::string& cache_path, const std::string& retrieved_path,
                      const std::string& out_path) {
    std::vector<Sample> samples = load_dataset(dataset_path, Split::inference);
    if (!retrieved_path.empty())
        attach_knowledge(samples, load_knowledge(retrieved_path), /*required=*/true);

    auto backend = make_backend(backend_kind, fixtures, s);
    KnowledgeCache cache;
    if (!cache_path.empty()) cache.load(cache_path);

    EmbeddingTower query_tower = make_tower(EmbeddingTower::Role::query, tower_config_from(s));
    const int icl = s.geti("icl");
    if (icl < 0) throw UsageError("icl must be non-negative");
    const int jobs = std::max(1, s.geti("jobs"));

    std::vector<std::pair<std::string, KnowledgeBundle>> bundles(samples.size());
    std::vector<std::string> failures(samples.size());
    std::atomic<size_t> cursor{0};
    auto worker = [&]() {
        for (size_t i = cursor.fetch_add(1); i < samples.size(); i = cursor.fetch_add(1)) {
            const Sample& sample = samples[i];
            try {
                PromptOptions opts;
                opts.instructions = s.gets("instructions");
                opts.examples = dataset_examples(sample, samples, icl, query_tower);
                auto [textual, multimodal] =
                    fetch_implicit_knowledge(sample, *backend, *backend, cache, opts);
                KnowledgeBundle b;
                if (sample.knowledge) b.passages = sample.knowledge->passages;
                b.implicit_textual = std::move(textual);
                b.implicit_multimodal = std::move(multimodal);
                bundles[i] = {sample.id, std::move(b)};
            } catch (const std::exception& e) {
                failures[i] = e.what();
            }
        }
    };
    if (jobs == 1) {
        worker();
    } else {
        std::vector<std::thread> threads;
        threads.reserve(static_cast<size_t>(jobs));
        for (int t = 0; t < jobs; ++t) threads.emplace_back(worker);
        for (auto& t : threads) t.join();
    }
    for (size_t i = 0; i < samples.size(); ++i)
        if (!failures[i].empty())
            throw Error("knowledge generation failed for \"" + samples[i].id +
                        "\": " + failures[i]);

    save_knowledge(bundles, out_path, s.meta_line("gen-knowledge"));
    if (!cache_path.empty()) cache.save(cache_path);
    std::cout << "generated implicit knowledge for " << bundles.size() << " samples -> "
              << out_path << "\n";
    return 0;
}

int cmd_pretrain(const Settings& s, const std::string& source_path,
                 const std::string& knowledge_path, const std::vector<std::string>& vocab_paths,
                 const std::string& out_path, const std::string& log_path) {
    std::vector<Sample> source = load_dataset(source_path, Split::train);
    if (!knowledge_path.empty())
        attach_knowledge(source, load_knowledge(knowledge_path), /*required=*/true);
    check_k_consistency(source, s.geti("k"));

    // The vocabulary is frozen at pretraining time, so fold in the datasets
    // this model is later finetuned on; otherwise their words land on <unk>.
    std::vector<std::string> texts = vocab_texts_for(source);
    for (const auto& extra_path : vocab_paths) {
        std::vector<Sample> other = load_dataset(extra_path, Split::inference);
        auto more = vocab_texts_for(other);
        texts.insert(texts.end(), more.begin(), more.end());
    }
    Vocabulary vocab = Vocabulary::build(texts, s.geti("vocab_size"));

    Model model(model_config_from(s), vocab);
    TrainConfig tc = train_config_from(s);
    tc.stage = "pretrain";

    std::string log_file = log_path.empty() ? out_path + ".log" : log_path;
    std::ofstream log(log_file, std::ios::binary);
    if (!log) throw IoError("cannot open " + log_file + " for writing");
    log << s.meta_line("pretrain") << "\n";

    std::vector<const Sample*> ptrs;
    ptrs.reserve(source.size());
    for (const auto& sample : source) ptrs.push_back(&sample);
    Trainer trainer(model, tc, std::move(ptrs));
    trainer.run(&log);

    CheckpointExtra extra;
    extra.opt_m = trainer.optimizer().m;
    extra.opt_v = trainer.optimizer().v;
    extra.opt_t = trainer.optimizer().t;
    extra.step = trainer.step();
    extra.stage = "pretrain";
    extra.meta_json = s.meta("pretrain").dump();
    save_checkpoint(model, extra, out_path);
    std::cout << "pretrained " << trainer.step() << " steps -> " << out_path << "\n";
    return 0;
}

int cmd_finetune(const Settings& s, const std::string& ckpt_path, bool fresh,
                 const std::string& dataset_path, const std::string& knowledge_path,
                 const std::string& out_path, const std::string& log_path) {
    std::vector<Sample> target = load_dataset(dataset_path, Split::train);
    if (!knowledge_path.empty())
        attach_knowledge(target, load_knowledge(knowledge_path), /*required=*/true);

    std::string log_file = log_path.empty() ? out_path + ".log" : log_path;
    std::ofstream log(log_file, std::ios::binary);
    if (!log) throw IoError("cannot open " + log_file + " for writing");
    log << s.meta_line("finetune") << "\n";

    int64_t steps = 0;
    Model model = finetune_over(s, ckpt_path, fresh, target, &log, &steps);
    save_finetuned(s, model, steps, out_path);
    std::cout << "finetuned " << steps << " steps -> " << out_path << "\n";
    return 0;
}

int cmd_evaluate(const Settings& s, const std::string& dataset_path,
                 const std::string& predictions_path, const std::string& ckpt_path,
                 const std::string& knowledge_path, const std::string& pred_out,
                 const std::string& out_path) {
    std::vector<Sample> dataset = load_dataset(dataset_path, Split::eval);
    if (!knowledge_path.empty())
        attach_knowledge(dataset, load_knowledge(knowledge_path), /*required=*/true);

    MetricsReport report;
    if (!predictions_path.empty()) {
        std::vector<Prediction> predictions = load_predictions(predictions_path);
        report = evaluate(predictions, dataset, soft_mode_from_name(s.gets("mode")));
        json out = report.to_json();
        out["meta"] = s.meta("evaluate");
        write_json_file(out, out_path);
    } else if (!ckpt_path.empty()) {
        LoadedCheckpoint loaded = load_checkpoint(ckpt_path);
        report = evaluate_model(s, loaded.model, dataset, pred_out, out_path);
    } else {
        throw UsageError("evaluate needs either --predictions or --ckpt");
    }
    std::cout << "n=" << report.n << " acc=" << format_pct(report.acc)
              << " em=" << format_pct(report.em) << " -> " << out_path << "\n";
    return 0;
}

int cmd_ensemble(const Settings& s, const std::vector<std::string>& prediction_paths,
                 const std::string& out_path) {
    EnsembleConfig ec;
    ec.size = s.geti("ensemble_size");
    if (static_cast<int>(prediction_paths.size()) != ec.size)
        throw UsageError("ensemble expects " + std::to_string(ec.size) +
                         " prediction files, got " + std::to_string(prediction_paths.size()));
    std::vector<std::vector<Prediction>> runs;
    runs.reserve(prediction_paths.size());
    for (const auto& path : prediction_paths) runs.push_back(load_predictions(path));

    std::map<std::string, std::vector<std::pair<int, std::string>>> by_id;
    for (const auto& run : runs)
        for (const auto& p : run) by_id[p.sample_id].emplace_back(p.model_seed, p.answer);

    std::vector<Prediction> voted;
    voted.reserve(by_id.size());
    for (auto& [id, answers] : by_id) {
        if (static_cast<int>(answers.size()) != ec.size)
            throw ValidationError("sample \"" + id + "\" is covered by " +
                                  std::to_string(answers.size()) + " of " +
                                  std::to_string(ec.size) + " runs");
        Prediction p;
        p.sample_id = id;
        p.answer = ensemble_vote(answers, ec);
        p.model_seed = std::min_element(answers.begin(), answers.end())->first;
        voted.push_back(std::move(p));
    }
    save_predictions(voted, out_path, s.meta_line("ensemble"));
    std::cout << "ensembled " << runs.size() << " runs over " << voted.size() << " samples -> "
              << out_path << "\n";
    return 0;
}

int cmd_hit(const Settings& s, const std::string& dataset_path, const std::string& knowledge_path,
            const std::string& source, bool permissive, const std::string& out_path) {
    std::vector<Sample> dataset = load_dataset(dataset_path, Split::eval);
    if (!knowledge_path.empty())
        attach_knowledge(dataset, load_knowledge(knowledge_path), /*required=*/false);
    double rate = hit_rate(dataset, source, permissive);
    std::cout << "hit_rate " << source << " " << format_pct(rate) << "\n";
    if (!out_path.empty()) {
        json out;
        out["source"] = source;
        out["rate"] = rate;
        out["n"] = dataset.size();
        out["meta"] = s.meta("hit");
        write_json_file(out, out_path);
    }
    return 0;
}

int cmd_analyze(const Settings& s, const std::string& dataset_path,
                const std::string& knowledge_path, const std::vector<std::string>& report_specs,
                bool permissive, const std::string& out_path) {
    std::vector<Sample> dataset = load_dataset(dataset_path, Split::eval);
    if (!knowledge_path.empty())
        attach_knowledge(dataset, load_knowledge(knowledge_path), /*required=*/false);

    std::map<std::string, double> hits;
    std::map<std::string, MetricsReport> reports;
    for (const auto& spec : report_specs) {
        auto eq = spec.find('=');
        if (eq == std::string::npos)
            throw UsageError("--reports entries must look like source=report.json");
        std::string source = spec.substr(0, eq);
        std::string path = spec.substr(eq + 1);
        std::ifstream is(path);
        if (!is) throw IoError("cannot open report " + path);
        json j = json::parse(is, nullptr, false);
        if (j.is_discarded()) throw ParseError(path + ": invalid JSON");
        reports[source] = MetricsReport::from_json(j);
        hits[source] = hit_rate(dataset, source, permissive);
    }
    json table = analyze_conversion(hits, reports);
    table["meta"] = s.meta("analyze");
    write_json_file(table, out_path);
    std::cout << "analyzed " << reports.size() << " sources -> " << out_path << "\n";
    return 0;
}

struct SweepLeg {
    int k = 0;
    double acc = 0.0;
    double em = 0.0;
    std::string report_path;
    std::string error;
};

SweepLeg run_sweep_leg(const Settings& leg_s, int k, const std::string& index_path,
                       const std::string& train_path, const std::string& eval_path,
                       const std::string& knowledge_path, const std::string& ckpt_path,
                       bool fresh, const fs::path& leg_dir) {
    SweepLeg leg;
    leg.k = k;
    fs::create_directories(leg_dir);

    PassageIndex index = load_index(index_path);
    EmbeddingTower query_tower = make_tower(EmbeddingTower::Role::query, index.tower_cfg);

    std::vector<Sample> train_set = load_dataset(train_path, Split::train);
    std::vector<Sample> eval_set = load_dataset(eval_path, Split::eval);

    auto train_bundles =
        merge_implicit(retrieve_bundles(index, query_tower, train_set, k), knowledge_path);
    auto eval_bundles =
        merge_implicit(retrieve_bundles(index, query_tower, eval_set, k), knowledge_path);
    save_knowledge(train_bundles, (leg_dir / "train_knowledge.jsonl").string(),
                   leg_s.meta_line("sweep-k"));
    save_knowledge(eval_bundles, (leg_dir / "eval_knowledge.jsonl").string(),
                   leg_s.meta_line("sweep-k"));
    attach_knowledge(train_set, train_bundles, /*required=*/true);
    attach_knowledge(eval_set, eval_bundles, /*required=*/true);

    std::string log_file = (leg_dir / "train.log").string();
    std::ofstream log(log_file, std::ios::binary);
    if (!log) throw IoError("cannot open " + log_file + " for writing");
    log << leg_s.meta_line("sweep-k") << "\n";

    int64_t steps = 0;
    Model model = finetune_over(leg_s, ckpt_path, fresh, train_set, &log, &steps);
    save_finetuned(leg_s, model, steps, (leg_dir / "model.ckpt").string());

    leg.report_path = (leg_dir / "report.json").string();
    MetricsReport report =
        evaluate_model(leg_s, model, eval_set, (leg_dir / "predictions.jsonl").string(),
                       leg.report_path);
    leg.acc = report.acc;
    leg.em = report.em;
    return leg;
}

int cmd_sweep_k(const Settings& s, const std::vector<int>& ks, const std::string& index_path,
                const std::string& train_path, const std::string& eval_path,
                const std::string& knowledge_path, const std::string& ckpt_path, bool fresh,
                const std::string& out_dir, bool parallel) {
    if (ks.empty()) throw UsageError("--k list is empty");
    for (int k : ks)
        if (k <= 0) throw UsageError("sweep k values must be positive, got " + std::to_string(k));
    fs::create_directories(out_dir);

    std::vector<SweepLeg> legs(ks.size());
    auto run_one = [&](size_t i) {
        int k = ks[i];
        Settings leg_s = s;
        leg_s.set("k", std::to_string(k));
        fs::path leg_dir = fs::path(out_dir) / ("k" + std::to_string(k));
        try {
            legs[i] = run_sweep_leg(leg_s, k, index_path, train_path, eval_path, knowledge_path,
                                    ckpt_path, fresh, leg_dir);
        } catch (const std::exception& e) {
            legs[i].k = k;
            legs[i].error = e.what();
        }
    };

    if (parallel && ks.size() > 1) {
        std::vector<std::thread> threads;
        threads.reserve(ks.size());
        for (size_t i = 0; i < ks.size(); ++i) threads.emplace_back(run_one, i);
        for (auto& t : threads) t.join();
    } else {
        for (size_t i = 0; i < ks.size(); ++i) run_one(i);
    }

    for (const auto& leg : legs)
        if (!leg.error.empty())
            throw Error("sweep leg k=" + std::to_string(leg.k) + " failed: " + leg.error);

    json summary;
    summary["legs"] = json::array();
    for (const auto& leg : legs) {
        summary["legs"].push_back(
            {{"k", leg.k}, {"acc", leg.acc}, {"em", leg.em}, {"report", leg.report_path}});
        std::cout << "k=" << leg.k << " acc=" << format_pct(leg.acc)
                  << " em=" << format_pct(leg.em) << " -> " << leg.report_path << "\n";
    }
    summary["meta"] = s.meta("sweep-k");
    std::string summary_path = (fs::path(out_dir) / "summary.json").string();
    write_json_file(summary, summary_path);
    std::cout << "sweep summary -> " << summary_path << "\n";
    return 0;
}

// ---- argument wiring --------------------------------------------------------

struct CommonFlags {
    std::string config_path;
    std::vector<std::string> sets;
    std::string seed;

    void add_to(CLI::App* sub) {
        sub->add_option("--config", config_path, "key=value config file");
        sub->add_option("--set", sets, "explicit config override, key=value")->take_all();
        sub->add_option("--seed", seed, "root random seed");
    }

    Settings resolve() const {
        std::map<std::string, std::string> overrides;
        for (const auto& kv : sets) {
            auto eq = kv.find('=');
            if (eq == std::string::npos)
                throw UsageError("--set expects key=value, got \"" + kv + "\"");
            overrides[kv.substr(0, eq)] = kv.substr(eq + 1);
        }
        if (!seed.empty()) overrides["seed"] = seed;
        return Settings::resolve(config_path, overrides);
    }
};

std::string error_label(const Error& e) {
    if (dynamic_cast<const ParseError*>(&e)) return "parse error";
    if (dynamic_cast<const ValidationError*>(&e)) return "validation error";
    if (dynamic_cast<const IoError*>(&e)) return "io error";
    if (dynamic_cast<const BackendError*>(&e)) return "backend error";
    if (dynamic_cast<const MissingKnowledgeError*>(&e)) return "missing knowledge";
    return "error";
}

std::vector<int> parse_k_list(const std::string& spec) {
    std::vector<int> ks;
    for (const auto& part : split(spec, ',')) {
        std::string t = trim(part);
        if (t.empty()) continue;
        try {
            size_t pos = 0;
            int k = std::stoi(t, &pos);
            if (pos != t.size()) throw std::invalid_argument("trailing characters");
            ks.push_back(k);
        } catch (const std::exception&) {
            throw UsageError("--k expects a comma-separated integer list, got \"" + spec + "\"");
        }
    }
    return ks;
}

}  // namespace

int cli_main(int argc, char** argv) {
    CLI::App app{"thinking-while-observing VQA pipeline"};
    app.require_subcommand(1);
    int rc = 0;

    auto* bi = app.add_subcommand("build-index", "embed a passage corpus into a flat index");
    auto bi_common = std::make_shared<CommonFlags>();
    auto bi_corpus = std::make_shared<std::string>();
    auto bi_out = std::make_shared<std::string>();
    auto bi_dim = std::make_shared<std::string>();
    bi_common->add_to(bi);
    bi->add_option("--corpus", *bi_corpus, "passage corpus, JSONL {id, text}")->required();
    bi->add_option("--out", *bi_out, "output index file")->required();
    bi->add_option("--dim", *bi_dim, "embedding dimension");
    bi->callback([=, &rc]() {
        Settings s = bi_common->resolve();
        if (!bi_dim->empty()) s.set("dim", *bi_dim);
        rc = cmd_build_index(s, *bi_corpus, *bi_out);
    });

    auto* rt = app.add_subcommand("retrieve", "top-k passage search for every dataset sample");
    auto rt_common = std::make_shared<CommonFlags>();
    auto rt_index = std::make_shared<std::string>();
    auto rt_dataset = std::make_shared<std::string>();
    auto rt_k = std::make_shared<std::string>();
    auto rt_out = std::make_shared<std::string>();
    rt_common->add_to(rt);
    rt->add_option("--index", *rt_index, "index file from build-index")->required();
    rt->add_option("--dataset", *rt_dataset, "dataset JSONL")->required();
    rt->add_option("--k", *rt_k, "passages per sample");
    rt->add_option("--out", *rt_out, "output knowledge JSONL")->required();
    rt->callback([=, &rc]() {
        Settings s = rt_common->resolve();
        if (!rt_k->empty()) s.set("k", *rt_k);
        rc = cmd_retrieve(s, *rt_index, *rt_dataset, s.geti("k"), *rt_out);
    });

    auto* gk = app.add_subcommand("gen-knowledge",
                                  "elicit implicit knowledge through a prompt backend");
    auto gk_common = std::make_shared<CommonFlags>();
    auto gk_dataset = std::make_shared<std::string>();
    auto gk_backend = std::make_shared<std::string>("replay");
    auto gk_fixtures = std::make_shared<std::string>();
    auto gk_cache = std::make_shared<std::string>();
    auto gk_retrieved = std::make_shared<std::string>();
    auto gk_out = std::make_shared<std::string>();
    gk_common->add_to(gk);
    gk->add_option("--dataset", *gk_dataset, "dataset JSONL")->required();
    gk->add_option("--backend", *gk_backend, "replay, echo or remote");
    gk->add_option("--fixtures", *gk_fixtures, "replay fixture JSONL");
    gk->add_option("--cache", *gk_cache, "prompt cache file, read and updated");
    gk->add_option("--retrieved", *gk_retrieved, "knowledge JSONL whose passages to carry over");
    gk->add_option("--out", *gk_out, "output knowledge JSONL")->required();
    gk->callback([=, &rc]() {
        rc = cmd_gen_knowledge(gk_common->resolve(), *gk_dataset, *gk_backend, *gk_fixtures,
                               *gk_cache, *gk_retrieved, *gk_out);
    });

    auto* pt = app.add_subcommand("pretrain", "stage-one training on a source VQA dataset");
    auto pt_common = std::make_shared<CommonFlags>();
    auto pt_source = std::make_shared<std::string>();
    auto pt_knowledge = std::make_shared<std::string>();
    auto pt_vocab = std::make_shared<std::vector<std::string>>();
    auto pt_out = std::make_shared<std::string>();
    auto pt_log = std::make_shared<std::string>();
    pt_common->add_to(pt);
    pt->add_option("--source", *pt_source, "source dataset JSONL")->required();
    pt->add_option("--knowledge", *pt_knowledge, "knowledge JSONL for the source set");
    pt->add_option("--vocab-datasets", *pt_vocab, "extra datasets folded into the vocabulary")
        ->take_all();
    pt->add_option("--out", *pt_out, "output checkpoint")->required();
    pt->add_option("--log", *pt_log, "training log path (default: <out>.log)");
    pt->callback([=, &rc]() {
        rc = cmd_pretrain(pt_common->resolve(), *pt_source, *pt_knowledge, *pt_vocab, *pt_out,
                          *pt_log);
    });

    auto* ft = app.add_subcommand("finetune", "stage-two training on the target dataset");
    auto ft_common = std::make_shared<CommonFlags>();
    auto ft_ckpt = std::make_shared<std::string>();
    auto ft_fresh = std::make_shared<bool>(false);
    auto ft_dataset = std::make_shared<std::string>();
    auto ft_knowledge = std::make_shared<std::string>();
    auto ft_out = std::make_shared<std::string>();
    auto ft_log = std::make_shared<std::string>();
    ft_common->add_to(ft);
    ft->add_option("--ckpt", *ft_ckpt, "checkpoint to start from");
    ft->add_flag("--fresh", *ft_fresh, "start from random weights instead of a checkpoint");
    ft->add_option("--dataset", *ft_dataset, "target dataset JSONL")->required();
    ft->add_option("--knowledge", *ft_knowledge, "knowledge JSONL for the target set");
    ft->add_option("--out", *ft_out, "output checkpoint")->required();
    ft->add_option("--log", *ft_log, "training log path (default: <out>.log)");
    ft->callback([=, &rc]() {
        if (ft_ckpt->empty() == !*ft_fresh)
            throw UsageError("finetune needs exactly one of --ckpt or --fresh");
        rc = cmd_finetune(ft_common->resolve(), *ft_ckpt, *ft_fresh, *ft_dataset, *ft_knowledge,
                          *ft_out, *ft_log);
    });

    auto* ev = app.add_subcommand("evaluate", "score predictions or a checkpoint on a dataset");
    auto ev_common = std::make_shared<CommonFlags>();
    auto ev_dataset = std::make_shared<std::string>();
    auto ev_predictions = std::make_shared<std::string>();
    auto ev_ckpt = std::make_shared<std::string>();
    auto ev_knowledge = std::make_shared<std::string>();
    auto ev_pred_out = std::make_shared<std::string>();
    auto ev_mode = std::make_shared<std::string>();
    auto ev_out = std::make_shared<std::string>();
    ev_common->add_to(ev);
    ev->add_option("--dataset", *ev_dataset, "dataset JSONL with gold answers")->required();
    ev->add_option("--predictions", *ev_predictions, "predictions JSONL to score");
    ev->add_option("--ckpt", *ev_ckpt, "checkpoint to run instead of --predictions");
    ev->add_option("--knowledge", *ev_knowledge, "knowledge JSONL, joined before decoding");
    ev->add_option("--pred-out", *ev_pred_out, "where to write predictions made with --ckpt");
    ev->add_option("--mode", *ev_mode, "soft-accuracy mode, simple or official");
    ev->add_option("--out", *ev_out, "output report JSON")->required();
    ev->callback([=, &rc]() {
        Settings s = ev_common->resolve();
        if (!ev_mode->empty()) s.set("mode", *ev_mode);
        rc = cmd_evaluate(s, *ev_dataset, *ev_predictions, *ev_ckpt, *ev_knowledge, *ev_pred_out,
                          *ev_out);
    });

    auto* en = app.add_subcommand("ensemble", "majority-vote over per-seed prediction files");
    auto en_common = std::make_shared<CommonFlags>();
    auto en_predictions = std::make_shared<std::vector<std::string>>();
    auto en_out = std::make_shared<std::string>();
    en_common->add_to(en);
    en->add_option("--predictions", *en_predictions, "prediction files, one per member")
        ->required()
        ->take_all();
    en->add_option("--out", *en_out, "output predictions JSONL")->required();
    en->callback(
        [=, &rc]() { rc = cmd_ensemble(en_common->resolve(), *en_predictions, *en_out); });

    auto* ht = app.add_subcommand("hit", "knowledge hit rate for one source selector");
    auto ht_common = std::make_shared<CommonFlags>();
    auto ht_dataset = std::make_shared<std::string>();
    auto ht_knowledge = std::make_shared<std::string>();
    auto ht_source = std::make_shared<std::string>();
    auto ht_permissive = std::make_shared<bool>(false);
    auto ht_out = std::make_shared<std::string>();
    ht_common->add_to(ht);
    ht->add_option("--dataset", *ht_dataset, "dataset JSONL with gold answers")->required();
    ht->add_option("--knowledge", *ht_knowledge, "knowledge JSONL to join");
    ht->add_option("--source", *ht_source, "selector, e.g. wikipedia(5) or all")->required();
    ht->add_flag("--permissive", *ht_permissive, "count absent knowledge as a miss");
    ht->add_option("--out", *ht_out, "optional JSON output");
    ht->callback([=, &rc]() {
        rc = cmd_hit(ht_common->resolve(), *ht_dataset, *ht_knowledge, *ht_source, *ht_permissive,
                     *ht_out);
    });

    auto* an = app.add_subcommand("analyze", "hit-to-accuracy conversion table across sources");
    auto an_common = std::make_shared<CommonFlags>();
    auto an_dataset = std::make_shared<std::string>();
    auto an_knowledge = std::make_shared<std::string>();
    auto an_reports = std::make_shared<std::vector<std::string>>();
    auto an_permissive = std::make_shared<bool>(false);
    auto an_out = std::make_shared<std::string>();
    an_common->add_to(an);
    an->add_option("--dataset", *an_dataset, "dataset JSONL with gold answers")->required();
    an->add_option("--knowledge", *an_knowledge, "knowledge JSONL to join");
    an->add_option("--reports", *an_reports, "source=report.json pairs")->required()->take_all();
    an->add_flag("--permissive", *an_permissive, "count absent knowledge as a miss");
    an->add_option("--out", *an_out, "output table JSON")->required();
    an->callback([=, &rc]() {
        rc = cmd_analyze(an_common->resolve(), *an_dataset, *an_knowledge, *an_reports,
                         *an_permissive, *an_out);
    });

    auto* sk = app.add_subcommand("sweep-k",
                                  "retrieve, finetune and evaluate across a passage-count list");
    auto sk_common = std::make_shared<CommonFlags>();
    auto sk_ks = std::make_shared<std::string>();
    auto sk_index = std::make_shared<std::string>();
    auto sk_train = std::make_shared<std::string>();
    auto sk_eval = std::make_shared<std::string>();
    auto sk_knowledge = std::make_shared<std::string>();
    auto sk_ckpt = std::make_shared<std::string>();
    auto sk_fresh = std::make_shared<bool>(false);
    auto sk_out_dir = std::make_shared<std::string>();
    auto sk_parallel = std::make_shared<bool>(false);
    sk_common->add_to(sk);
    sk->add_option("--k", *sk_ks, "comma-separated k list, e.g. 5,10,25")->required();
    sk->add_option("--index", *sk_index, "index file from build-index")->required();
    sk->add_option("--train", *sk_train, "finetune dataset JSONL")->required();
    sk->add_option("--eval", *sk_eval, "evaluation dataset JSONL")->required();
    sk->add_option("--knowledge", *sk_knowledge, "implicit-knowledge JSONL merged into every leg");
    sk->add_option("--ckpt", *sk_ckpt, "checkpoint every leg finetunes from");
    sk->add_flag("--fresh", *sk_fresh, "legs start from random weights");
    sk->add_option("--out-dir", *sk_out_dir, "directory for per-leg outputs")->required();
    sk->add_flag("--parallel", *sk_parallel, "run legs concurrently");
    sk->callback([=, &rc]() {
        if (sk_ckpt->empty() == !*sk_fresh)
            throw UsageError("sweep-k needs exactly one of --ckpt or --fresh");
        rc = cmd_sweep_k(sk_common->resolve(), parse_k_list(*sk_ks), *sk_index, *sk_train,
                         *sk_eval, *sk_knowledge, *sk_ckpt, *sk_fresh, *sk_out_dir, *sk_parallel);
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << error_label(e) << ": " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return rc;
}

int run_cli(const std::vector<std::string>& args) {
    std::vector<std::string> full;
    full.reserve(args.size() + 1);
    full.emplace_back("two");
    full.insert(full.end(), args.begin(), args.end());
    std::vector<char*> argv;
    argv.reserve(full.size());
    for (auto& a : full) argv.push_back(a.data());
    return cli_main(static_cast<int>(argv.size()), argv.data());
}

}  // namespace two
