// Copyright (c) 2026 two contributors
// SPDX-License-Identifier: Apache-2.0

#include "two/retriever.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>

#include <json.hpp>

#include "two/common.hpp"
#include "two/rng.hpp"

using nlohmann::json;

namespace two {

namespace {

constexpr char kIndexMagic[4] = {'P', 'I', 'X', '1'};
constexpr char kMetaMagic[4] = {'M', 'E', 'T', 'A'};

std::vector<std::string> tokenize_lower(const std::string& text) {
    return split_ws(lower_ascii(text));
}

Eigen::VectorXd encode_text(const std::string& text, const EmbeddingTower& tower) {
    std::vector<std::string> tokens = tokenize_lower(text);
    if (static_cast<int>(tokens.size()) > tower.cfg.max_len) {
        tokens.resize(tower.cfg.max_len);
        if (tower.truncations) tower.truncations->fetch_add(1);
    }
    Eigen::VectorXd pooled = Eigen::VectorXd::Zero(tower.cfg.emb_dim);
    for (const auto& tok : tokens) {
        uint64_t bucket = fnv1a64(tok) % static_cast<uint64_t>(tower.cfg.buckets);
        pooled += tower.table.row(static_cast<Eigen::Index>(bucket)).transpose();
    }
    if (!tokens.empty()) pooled /= static_cast<double>(tokens.size());
    return tower.proj * pooled;
}

}  // namespace

EmbeddingTower make_tower(EmbeddingTower::Role role, const TowerConfig& cfg) {
    if (cfg.dim <= 0 || cfg.emb_dim <= 0 || cfg.buckets <= 0 || cfg.max_len <= 0)
        throw ValidationError("tower config fields must be positive");
    EmbeddingTower t;
    t.role = role;
    t.cfg = cfg;
    t.truncations = std::make_shared<std::atomic<uint64_t>>(0);
    const char* tag = role == EmbeddingTower::Role::query ? "tower.query" : "tower.passage";
    std::mt19937_64 gen(derive_seed(cfg.seed, tag));
    t.table = rng::glorot_matrix(gen, cfg.buckets, cfg.emb_dim);
    t.proj = rng::glorot_matrix(gen, cfg.dim, cfg.emb_dim);
    return t;
}

Eigen::VectorXd encode_query(const std::string& question, const std::string& caption,
                             const EmbeddingTower& tower) {
    if (tower.role != EmbeddingTower::Role::query)
        throw ValidationError("encode_query needs a query tower");
    if (trim(question).empty()) throw ValidationError("empty question");
    return encode_text(question + " [SEP] " + caption, tower);
}

Eigen::VectorXd encode_passage(const std::string& passage, const EmbeddingTower& tower) {
    if (tower.role != EmbeddingTower::Role::passage)
        throw ValidationError("encode_passage needs a passage tower");
    if (trim(passage).empty()) throw ValidationError("empty passage");
    return encode_text(passage, tower);
}

std::vector<std::pair<std::string, std::string>> load_corpus(const std::string& path) {
    std::vector<std::pair<std::string, std::string>> out;
    for_each_line(path, [&](size_t lineno, const std::string& line) {
        const std::string where = path + ":" + std::to_string(lineno);
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded()) throw ParseError(where + ": invalid record");
        if (j.contains("_meta")) return;
        if (!j.contains("id") || !j["id"].is_string())
            throw ParseError(where + ": missing \"id\"");
        if (!j.contains("text") || !j["text"].is_string())
            throw ParseError(where + ": missing \"text\"");
        out.emplace_back(j["id"].get<std::string>(), j["text"].get<std::string>());
    });
    return out;
}

PassageIndex build_index(const std::vector<std::pair<std::string, std::string>>& passages,
                         const EmbeddingTower& tower) {
    if (passages.empty()) throw ValidationError("empty corpus");
    PassageIndex index;
    index.tower_cfg = tower.cfg;
    index.embeddings.resize(static_cast<Eigen::Index>(passages.size()), tower.cfg.dim);
    std::set<std::string> seen;
    for (size_t i = 0; i < passages.size(); ++i) {
        const auto& [id, text] = passages[i];
        if (!seen.insert(id).second) throw ValidationError("duplicate passage id \"" + id + "\"");
        Eigen::VectorXd v = encode_passage(text, tower);
        // Embeddings are persisted as f32, so round at build time to make the
        // saved index search-identical to the in-memory one.
        for (int c = 0; c < tower.cfg.dim; ++c)
            index.embeddings(static_cast<Eigen::Index>(i), c) = static_cast<float>(v(c));
        index.passage_ids.push_back(id);
        index.texts[id] = text;
    }
    return index;
}

std::vector<ScoredPassage> search(const PassageIndex& index, const Eigen::VectorXd& query_vec,
                                  int k) {
    const Eigen::Index n = index.embeddings.rows();
    if (k < 1 || k > n)
        throw ValidationError("k=" + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
    if (query_vec.size() != index.embeddings.cols())
        throw ValidationError("query dim " + std::to_string(query_vec.size()) +
                              " does not match index dim " + std::to_string(index.embeddings.cols()));

    // Plain left-to-right accumulation; scores must be exact, not a fast
    // re-association of the same sum.
    std::vector<double> scores(static_cast<size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        double s = 0.0;
        for (Eigen::Index c = 0; c < index.embeddings.cols(); ++c)
            s += index.embeddings(i, c) * query_vec(c);
        scores[static_cast<size_t>(i)] = s;
    }

    std::vector<Eigen::Index> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    auto better = [&](Eigen::Index a, Eigen::Index b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return index.passage_ids[a] < index.passage_ids[b];
    };
    std::partial_sort(order.begin(), order.begin() + k, order.end(), better);

    std::vector<ScoredPassage> out;
    out.reserve(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) {
        Eigen::Index row = order[static_cast<size_t>(i)];
        ScoredPassage p;
        p.passage_id = index.passage_ids[static_cast<size_t>(row)];
        auto it = index.texts.find(p.passage_id);
        p.text = it == index.texts.end() ? std::string() : it->second;
        p.score = scores[static_cast<size_t>(row)];
        out.push_back(std::move(p));
    }
    return out;
}

void save_index(const PassageIndex& index, const std::string& path,
                const std::string& producer_json) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os.write(kIndexMagic, 4);
    write_u32(os, static_cast<uint32_t>(index.passage_ids.size()));
    write_u32(os, static_cast<uint32_t>(index.embeddings.cols()));
    for (const auto& id : index.passage_ids) write_lp_string(os, id);
    for (Eigen::Index r = 0; r < index.embeddings.rows(); ++r)
        for (Eigen::Index c = 0; c < index.embeddings.cols(); ++c)
            write_f32(os, static_cast<float>(index.embeddings(r, c)));

    // Trailer after the fixed layout: tower parameters and passage texts, so
    // a loaded index can rebuild its query tower and return passage bodies.
    json meta;
    meta["tower"] = {{"dim", index.tower_cfg.dim},
                     {"emb_dim", index.tower_cfg.emb_dim},
                     {"buckets", index.tower_cfg.buckets},
                     {"max_len", index.tower_cfg.max_len},
                     {"seed", index.tower_cfg.seed}};
    json texts = json::array();
    for (const auto& id : index.passage_ids) {
        auto it = index.texts.find(id);
        texts.push_back(it == index.texts.end() ? std::string() : it->second);
    }
    meta["texts"] = texts;
    if (!producer_json.empty()) meta["producer"] = json::parse(producer_json);
    os.write(kMetaMagic, 4);
    write_lp_string(os, meta.dump());
    if (!os) throw IoError("write failed for " + path);
}

PassageIndex load_index(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kIndexMagic, 4) != 0)
        throw ValidationError(path + ": not an index file (bad magic)");
    uint32_t count = read_u32(is, path);
    uint32_t dim = read_u32(is, path);
    if (count == 0) throw ValidationError(path + ": empty index");

    PassageIndex index;
    index.passage_ids.reserve(count);
    for (uint32_t i = 0; i < count; ++i) index.passage_ids.push_back(read_lp_string(is, path));
    index.embeddings.resize(count, dim);
    for (uint32_t r = 0; r < count; ++r)
        for (uint32_t c = 0; c < dim; ++c) index.embeddings(r, c) = read_f32(is, path);

    char meta_magic[4];
    is.read(meta_magic, 4);
    if (is && std::memcmp(meta_magic, kMetaMagic, 4) == 0) {
        json meta = json::parse(read_lp_string(is, path));
        if (meta.contains("tower")) {
            const json& t = meta["tower"];
            index.tower_cfg.dim = t.value("dim", static_cast<int>(dim));
            index.tower_cfg.emb_dim = t.value("emb_dim", 64);
            index.tower_cfg.buckets = t.value("buckets", 4096);
            index.tower_cfg.max_len = t.value("max_len", 128);
            index.tower_cfg.seed = t.value("seed", static_cast<uint64_t>(0));
        }
        if (meta.contains("texts")) {
            const json& texts = meta["texts"];
            if (texts.size() != index.passage_ids.size())
                throw ValidationError(path + ": text trailer does not match id count");
            for (size_t i = 0; i < index.passage_ids.size(); ++i)
                index.texts[index.passage_ids[i]] = texts[i].get<std::string>();
        }
    } else {
        index.tower_cfg.dim = static_cast<int>(dim);
    }
    return index;
}

}  // namespace two
