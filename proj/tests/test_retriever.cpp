// Copyright (c) 2026 two contributors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>

#include "two/common.hpp"
#include "two/retriever.hpp"
#include "two/rng.hpp"
#include "helpers.hpp"

using namespace two;
using testutil::TempDir;

namespace {

std::string random_words(std::mt19937_64& gen, int n) {
    static const std::vector<std::string> pool = {
        "sun",  "river", "stone", "walk", "glass", "yellow", "train", "cloud",
        "cold", "round", "light", "seed", "north", "metal",  "cloud", "grass"};
    std::vector<std::string> words;
    for (int i = 0; i < n; ++i) words.push_back(pool[rng::below(gen, pool.size())]);
    return join(words, " ");
}

std::vector<std::pair<std::string, std::string>> random_corpus(std::mt19937_64& gen, int n) {
    std::vector<std::pair<std::string, std::string>> corpus;
    for (int i = 0; i < n; ++i) {
        char id[16];
        std::snprintf(id, sizeof(id), "p%05d", i);
        corpus.emplace_back(id, random_words(gen, 3 + static_cast<int>(rng::below(gen, 10))));
    }
    return corpus;
}

// Reference top-k: score every row with the same left-to-right accumulation,
// then fully sort (score desc, id asc). Any deviation in the production
// search, including a re-associated sum, shows up as a mismatch.
std::vector<ScoredPassage> brute_force(const PassageIndex& index, const Eigen::VectorXd& q,
                                       int k) {
    const Eigen::Index n = index.embeddings.rows();
    std::vector<double> scores(static_cast<size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        double s = 0.0;
        for (Eigen::Index c = 0; c < index.embeddings.cols(); ++c)
            s += index.embeddings(i, c) * q(c);
        scores[static_cast<size_t>(i)] = s;
    }
    std::vector<Eigen::Index> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return index.passage_ids[a] < index.passage_ids[b];
    });
    std::vector<ScoredPassage> out;
    for (int i = 0; i < k; ++i) {
        Eigen::Index row = order[static_cast<size_t>(i)];
        out.push_back({index.passage_ids[static_cast<size_t>(row)],
                       index.texts.at(index.passage_ids[static_cast<size_t>(row)]),
                       scores[static_cast<size_t>(row)]});
    }
    return out;
}

TowerConfig small_cfg() {
    TowerConfig cfg;
    cfg.dim = 16;
    cfg.emb_dim = 12;
    cfg.buckets = 64;
    cfg.max_len = 32;
    cfg.seed = 5;
    return cfg;
}

}  // namespace

TEST_CASE("towers are deterministic and role-separated") {
    TowerConfig cfg = small_cfg();
    EmbeddingTower q1 = make_tower(EmbeddingTower::Role::query, cfg);
    EmbeddingTower q2 = make_tower(EmbeddingTower::Role::query, cfg);
    EmbeddingTower p = make_tower(EmbeddingTower::Role::passage, cfg);
    CHECK(q1.table == q2.table);
    CHECK(q1.proj == q2.proj);
    CHECK(q1.table != p.table);

    Eigen::VectorXd a = encode_passage("a stone by the river", p);
    Eigen::VectorXd b = encode_passage("a stone by the river", p);
    CHECK(a == b);
    CHECK(a.size() == cfg.dim);
    CHECK(encode_passage("a stone by the river", p) !=
          encode_passage("a cloud over the train", p));
}

TEST_CASE("query encoding folds the caption in") {
    EmbeddingTower q = make_tower(EmbeddingTower::Role::query, small_cfg());
    CHECK(encode_query("what is this", "a stone", q) != encode_query("what is this", "", q));
}

TEST_CASE("towers count truncations past max_len") {
    TowerConfig cfg = small_cfg();
    cfg.max_len = 4;
    EmbeddingTower p = make_tower(EmbeddingTower::Role::passage, cfg);
    uint64_t before = p.truncations->load();
    encode_passage("one two three four", p);
    CHECK(p.truncations->load() == before);
    encode_passage("one two three four five", p);
    CHECK(p.truncations->load() == before + 1);
}

TEST_CASE("search matches the brute-force oracle bit for bit") {
    std::mt19937_64 gen(91);
    TowerConfig cfg = small_cfg();
    auto corpus = random_corpus(gen, 200);
    PassageIndex index = build_index(corpus, make_tower(EmbeddingTower::Role::passage, cfg));
    EmbeddingTower qt = make_tower(EmbeddingTower::Role::query, cfg);

    for (int trial = 0; trial < 20; ++trial) {
        Eigen::VectorXd q = encode_query(random_words(gen, 5), random_words(gen, 4), qt);
        for (int k : {1, 7, 50, 200}) {
            auto got = search(index, q, k);
            auto want = brute_force(index, q, k);
            REQUIRE(got.size() == want.size());
            for (size_t i = 0; i < got.size(); ++i) {
                CHECK(got[i].passage_id == want[i].passage_id);
                CHECK(got[i].score == want[i].score);
                CHECK(got[i].text == want[i].text);
            }
        }
    }
}

TEST_CASE("search ties break by ascending passage id") {
    PassageIndex index;
    index.tower_cfg = small_cfg();
    index.passage_ids = {"pb", "pa", "pc"};
    index.embeddings.resize(3, 2);
    index.embeddings << 1.0, 0.0, 1.0, 0.0, 0.5, 0.0;
    index.texts = {{"pa", "ta"}, {"pb", "tb"}, {"pc", "tc"}};
    Eigen::VectorXd q(2);
    q << 1.0, 0.0;
    auto got = search(index, q, 3);
    REQUIRE(got.size() == 3);
    CHECK(got[0].passage_id == "pa");
    CHECK(got[1].passage_id == "pb");
    CHECK(got[2].passage_id == "pc");
}

TEST_CASE("search validates k and the query dimension") {
    std::mt19937_64 gen(3);
    PassageIndex index =
        build_index(random_corpus(gen, 5), make_tower(EmbeddingTower::Role::passage, small_cfg()));
    Eigen::VectorXd q = Eigen::VectorXd::Zero(small_cfg().dim);
    CHECK_THROWS_AS(search(index, q, 0), ValidationError);
    CHECK_THROWS_AS(search(index, q, 6), ValidationError);
    CHECK_THROWS_AS(search(index, Eigen::VectorXd::Zero(3), 1), ValidationError);
}

TEST_CASE("build_index rejects empty corpora and duplicate ids") {
    EmbeddingTower p = make_tower(EmbeddingTower::Role::passage, small_cfg());
    CHECK_THROWS_AS(build_index({}, p), ValidationError);
    CHECK_THROWS_AS(build_index({{"a", "x"}, {"a", "y"}}, p), ValidationError);
}

TEST_CASE("index roundtrip preserves everything search depends on") {
    TempDir tmp;
    std::mt19937_64 gen(17);
    TowerConfig cfg = small_cfg();
    auto corpus = random_corpus(gen, 60);
    PassageIndex index = build_index(corpus, make_tower(EmbeddingTower::Role::passage, cfg));
    const std::string path = tmp.file("idx.pix");
    save_index(index, path, "{\"command\":\"build-index\"}");
    PassageIndex back = load_index(path);

    CHECK(back.passage_ids == index.passage_ids);
    CHECK(back.tower_cfg == index.tower_cfg);
    CHECK(back.texts == index.texts);
    CHECK(back.embeddings == index.embeddings);

    EmbeddingTower qt = make_tower(EmbeddingTower::Role::query, cfg);
    Eigen::VectorXd q = encode_query("what color is the train", "a train", qt);
    auto a = search(index, q, 10);
    auto b = search(back, q, 10);
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].passage_id == b[i].passage_id);
        CHECK(a[i].score == b[i].score);
    }
}

TEST_CASE("index files reject a foreign magic") {
    TempDir tmp;
    write_text_file(tmp.file("junk.pix"), "JUNKJUNKJUNK");
    CHECK_THROWS_AS(load_index(tmp.file("junk.pix")), ValidationError);
    CHECK_THROWS_AS(load_index(tmp.file("absent.pix")), IoError);
}
