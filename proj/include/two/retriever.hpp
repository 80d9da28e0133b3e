// Copyright (c) 2026 two contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "two/datamodel.hpp"

namespace two {

struct TowerConfig {
    int dim = 64;       // output embedding size
    int emb_dim = 64;   // hashed token embedding size
    int buckets = 4096; // feature-hashing vocabulary
    int max_len = 128;  // tokens kept per input; the rest is truncated
    uint64_t seed = 0;

    bool operator==(const TowerConfig&) const = default;
};

// Frozen bag-of-embeddings text encoder: hashed token embeddings, mean pool,
// linear projection to dim. Query and passage roles derive independent
// parameter sets from the same seed.
struct EmbeddingTower {
    enum class Role { query, passage };

    Role role = Role::query;
    TowerConfig cfg;
    Matrix table;  // buckets x emb_dim
    Matrix proj;   // dim x emb_dim
    std::shared_ptr<std::atomic<uint64_t>> truncations;
};

EmbeddingTower make_tower(EmbeddingTower::Role role, const TowerConfig& cfg);

Eigen::VectorXd encode_query(const std::string& question, const std::string& caption,
                             const EmbeddingTower& tower);
Eigen::VectorXd encode_passage(const std::string& passage, const EmbeddingTower& tower);

struct PassageIndex {
    std::vector<std::string> passage_ids;
    Matrix embeddings;  // |D| rows x dim, row i belongs to passage_ids[i]
    std::unordered_map<std::string, std::string> texts;
    TowerConfig tower_cfg;
};

std::vector<std::pair<std::string, std::string>> load_corpus(const std::string& path);

PassageIndex build_index(const std::vector<std::pair<std::string, std::string>>& passages,
                         const EmbeddingTower& tower);

// Exact top-k by inner product, ties broken by ascending passage_id.
std::vector<ScoredPassage> search(const PassageIndex& index, const Eigen::VectorXd& query_vec,
                                  int k);

void save_index(const PassageIndex& index, const std::string& path,
                const std::string& producer_json = "");
PassageIndex load_index(const std::string& path);

}  // namespace two
