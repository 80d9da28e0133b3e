// Copyright (c) 2026 two contributors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <atomic>
#include <thread>

#include "two/common.hpp"
#include "two/implicit.hpp"
#include "two/rng.hpp"
#include "helpers.hpp"

#include <httplib.h>

using namespace two;
using testutil::TempDir;

namespace {

Sample make_sample(const std::string& id, const std::string& question,
                   const std::string& caption, const std::vector<std::string>& answers) {
    std::mt19937_64 gen(fnv1a64(id));
    Sample s;
    s.id = id;
    s.question = question;
    s.image_ref = "img-" + id;
    s.features.object_features = rng::uniform_matrix(gen, 2, 4, 0.0, 1.0);
    s.features.boxes = rng::uniform_matrix(gen, 2, 4, 0.0, 1.0);
    s.visual_context.caption = caption;
    s.visual_context.labels = {{{}, "thing"}};
    s.answers = answers;
    return s;
}

class CountingBackend : public KnowledgeBackend {
public:
    explicit CountingBackend(std::string reply) : reply_(std::move(reply)) {}
    std::string query(const Prompt& prompt) override {
        ++calls;
        last_kind = prompt.kind;
        return reply_;
    }
    std::string name() const override { return "counting"; }

    int calls = 0;
    PromptKind last_kind = PromptKind::answer_textual;

private:
    std::string reply_;
};

}  // namespace

TEST_CASE("clean_knowledge_text strips degenerate tokens and collapses space") {
    CHECK(clean_knowledge_text("  a  red   bus ") == "a red bus");
    CHECK(clean_knowledge_text("yesno") == "");
    CHECK(clean_knowledge_text("NoNoNo maybe YesYes") == "maybe");
    CHECK(clean_knowledge_text("yes") == "yes");
    CHECK(clean_knowledge_text("no") == "no");
    CHECK(clean_knowledge_text("nose") == "nose");
    CleanConfig cfg;
    cfg.extra_degenerate_tokens = {"unk"};
    CHECK(clean_knowledge_text("unk answer", cfg) == "answer");
}

TEST_CASE("fingerprints depend on kind and text, not attachments") {
    Sample s = make_sample("s1", "what is it", "a cap", {"cat"});
    Prompt a{"same text", PromptKind::answer_textual, std::nullopt};
    Prompt b{"same text", PromptKind::answer_textual, s.features};
    Prompt c{"same text", PromptKind::answer_multimodal, std::nullopt};
    Prompt d{"other text", PromptKind::answer_textual, std::nullopt};
    CHECK(prompt_fingerprint(a) == prompt_fingerprint(b));
    CHECK(prompt_fingerprint(a) != prompt_fingerprint(c));
    CHECK(prompt_fingerprint(a) != prompt_fingerprint(d));
}

TEST_CASE("prompt kinds roundtrip through their names") {
    for (PromptKind k : {PromptKind::answer_textual, PromptKind::evidence_textual,
                         PromptKind::answer_multimodal, PromptKind::evidence_multimodal})
        CHECK(prompt_kind_from_name(prompt_kind_name(k)) == k);
    CHECK_THROWS_AS(prompt_kind_from_name("bogus"), ParseError);
}

TEST_CASE("textual answer prompts carry instructions, examples, then the target") {
    Sample ex = make_sample("e", "what flies", "a sky scene", {"kite", "kite", "plane"});
    Sample target = make_sample("t", "what swims", "a sea scene", {"fish"});
    PromptOptions opts;
    opts.instructions = "Answer briefly.";
    opts.examples = {&ex};
    Prompt p = build_answer_prompt_textual(target, opts);
    CHECK(p.kind == PromptKind::answer_textual);
    CHECK_FALSE(p.attachments.has_value());
    CHECK(p.text ==
          "Answer briefly.\n"
          "Context: a sky scene+thing. Q: what flies A: kite\n"
          "Context: a sea scene+thing. Q: what swims A:");
}

TEST_CASE("example answers pick the most frequent gold, ties lexicographic") {
    CHECK(example_answer(make_sample("a", "q", "c", {"kite", "kite", "plane"})) == "kite");
    CHECK(example_answer(make_sample("b", "q", "c", {"b", "a"})) == "a");
    CHECK_THROWS_AS(example_answer(make_sample("c", "q", "c", {})), ValidationError);
}

TEST_CASE("evidence prompts embed the question and tentative answer") {
    Prompt t = build_evidence_prompt_textual("why is the sky blue?", " scattering ");
    CHECK(t.text == "why is the sky blue? scattering. This is because");
    CHECK(t.kind == PromptKind::evidence_textual);
    CHECK_THROWS_AS(build_evidence_prompt_textual("", "a"), ValidationError);
    CHECK_THROWS_AS(build_evidence_prompt_textual("q", "  "), ValidationError);

    Sample s = make_sample("s", "what is it", "cap", {"cat"});
    Prompt m = build_evidence_prompt_multimodal("what is it", "a cat.", s.features);
    CHECK(m.text == "what is it Why a cat?");
    CHECK(m.kind == PromptKind::evidence_multimodal);
    REQUIRE(m.attachments.has_value());
    CHECK(m.attachments->rows() == 2);

    Prompt a = build_answer_prompt_multimodal(s);
    CHECK(a.text == "what is it");
    REQUIRE(a.attachments.has_value());
}

TEST_CASE("cache roundtrips and query_backend is cache-through") {
    TempDir tmp;
    KnowledgeCache cache;
    CountingBackend backend("a tabby cat");
    Prompt p{"what cat is this", PromptKind::answer_textual, std::nullopt};

    CHECK(query_backend(backend, p, cache) == "a tabby cat");
    CHECK(backend.calls == 1);
    CHECK(query_backend(backend, p, cache) == "a tabby cat");
    CHECK(backend.calls == 1);
    CHECK(cache.size() == 1);

    cache.save(tmp.file("cache.jsonl"));
    KnowledgeCache reloaded;
    reloaded.load(tmp.file("cache.jsonl"));
    CHECK(reloaded.size() == 1);
    CHECK(reloaded.get(prompt_fingerprint(p)) == std::string("a tabby cat"));

    KnowledgeCache empty;
    empty.load(tmp.file("missing.jsonl"));
    CHECK(empty.size() == 0);
}

TEST_CASE("echo returns the prompt text; replay serves fixtures and errors on misses") {
    TempDir tmp;
    EchoBackend echo;
    Prompt p{"repeat me", PromptKind::answer_textual, std::nullopt};
    CHECK(echo.query(p) == "repeat me");

    KnowledgeCache cache;
    cache.put(prompt_fingerprint(p), p.kind, "canned");
    cache.save(tmp.file("fixture.jsonl"));
    ReplayBackend replay(tmp.file("fixture.jsonl"));
    CHECK(replay.query(p) == "canned");
    Prompt q{"unseen prompt", PromptKind::answer_textual, std::nullopt};
    CHECK_THROWS_AS(replay.query(q), MissingKnowledgeError);
    CHECK_THROWS_AS(ReplayBackend(tmp.file("absent.jsonl")), IoError);
}

TEST_CASE("in-context selection ranks by similarity with id tie-breaks") {
    TowerConfig cfg;
    cfg.dim = 16;
    cfg.emb_dim = 12;
    cfg.buckets = 64;
    cfg.max_len = 32;
    EmbeddingTower qt = make_tower(EmbeddingTower::Role::query, cfg);

    std::vector<Sample> pool = {
        make_sample("p1", "what bird is on the fence", "a bird photo", {"crow"}),
        make_sample("p2", "what bird sits on the fence", "a bird photo", {"crow"}),
        make_sample("p3", "how many cars are parked", "a street photo", {"two"}),
    };
    Sample target = make_sample("t", "what bird is on the fence", "a bird photo", {"crow"});

    auto picks = select_in_context_examples(target, pool, 2, qt);
    REQUIRE(picks.size() == 2);
    CHECK(picks[0]->id == "p1");
    CHECK(picks[1]->id == "p2");

    CHECK(select_in_context_examples(target, pool, 0, qt).empty());
    CHECK_THROWS_AS(select_in_context_examples(target, pool, 4, qt), ValidationError);

    // The target itself ranks first when it belongs to the pool;
    // dataset_examples removes it.
    auto with_self = select_in_context_examples(pool[2], pool, 1, qt);
    CHECK(with_self[0]->id == "p3");
    auto without_self = dataset_examples(pool[2], pool, 1, qt);
    REQUIRE(without_self.size() == 1);
    CHECK(without_self[0]->id != "p3");
    CHECK(dataset_examples(pool[2], pool, 2, qt).size() == 2);
}

TEST_CASE("the two-step fetch protocol short-circuits on empty answers") {
    KnowledgeCache cache;
    Sample s = make_sample("s", "what is it", "cap", {"cat"});
    PromptOptions opts;

    SUBCASE("happy path yields both records") {
        CountingBackend textual("a cat");
        CountingBackend multimodal("a dog");
        auto [t, m] = fetch_implicit_knowledge(s, textual, multimodal, cache, opts);
        REQUIRE(t.has_value());
        REQUIRE(m.has_value());
        CHECK(t->tentative_answer == "a cat");
        CHECK(t->evidence == "a cat");
        CHECK(t->source_tag == KnowledgeSource::textual);
        CHECK(m->tentative_answer == "a dog");
        CHECK(m->source_tag == KnowledgeSource::multimodal);
        CHECK(textual.calls == 2);
        CHECK(multimodal.calls == 2);
        CHECK(textual.last_kind == PromptKind::evidence_textual);
        CHECK(multimodal.last_kind == PromptKind::evidence_multimodal);
    }
    SUBCASE("degenerate answers suppress the evidence prompt") {
        CountingBackend textual("yesno");
        CountingBackend multimodal("a dog");
        auto [t, m] = fetch_implicit_knowledge(s, textual, multimodal, cache, opts);
        CHECK_FALSE(t.has_value());
        REQUIRE(m.has_value());
        CHECK(textual.calls == 1);
        CHECK(multimodal.calls == 2);
    }
}

TEST_CASE("the remote backend posts prompts and retries transient failures") {
    httplib::Server server;
    std::atomic<int> hits{0};
    server.Post("/generate", [&](const httplib::Request& req, httplib::Response& res) {
        int n = ++hits;
        auto j = nlohmann::json::parse(req.body);
        if (n == 1) {
            res.status = 500;
            return;
        }
        nlohmann::json out;
        out["text"] = "remote says " + j.at("prompt").get<std::string>();
        res.set_content(out.dump(), "application/json");
    });
    int port = server.bind_to_any_port("127.0.0.1");
    REQUIRE(port > 0);
    std::thread worker([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    RemoteConfig cfg;
    cfg.host = "127.0.0.1";
    cfg.port = port;
    cfg.max_retries = 2;
    RemoteBackend backend(cfg);
    Prompt p{"ping", PromptKind::answer_textual, std::nullopt};
    CHECK(backend.query(p) == "remote says ping");
    CHECK(hits.load() == 2);

    server.stop();
    worker.join();

    RemoteConfig dead = cfg;
    dead.port = port;
    dead.max_retries = 1;
    dead.timeout_sec = 1;
    RemoteBackend unreachable(dead);
    CHECK_THROWS_AS(unreachable.query(p), BackendError);
}
