// Copyright (c) 2026 two contributors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "two/eval.hpp"
#include "helpers.hpp"

using namespace two;
using nlohmann::json;

namespace {

Sample mini_sample(std::string id, std::vector<std::string> answers) {
    Sample s;
    s.id = std::move(id);
    s.question = "q";
    s.image_ref = "img";
    s.answers = std::move(answers);
    return s;
}

// Four samples covering present, partially present and absent knowledge.
std::vector<Sample> hit_dataset() {
    Sample s1 = mini_sample("s1", {"red"});
    s1.visual_context = {"a red ball", {{{"red"}, "ball"}}, {"exit"}};
    s1.knowledge = KnowledgeBundle{{{"w1", "shiny red thing", 3.0}, {"w2", "nothing here", 2.0}},
                                   ImplicitKnowledge{"red", "it is red"},
                                   ImplicitKnowledge{"blue", "the sky", KnowledgeSource::multimodal}};

    Sample s2 = mini_sample("s2", {"dog"});
    s2.visual_context = {"a cat", {{{}, "dog"}}, {}};
    s2.knowledge = KnowledgeBundle{{{"w3", "a dog runs", 1.0}},
                                   ImplicitKnowledge{"cat", "cats sleep"},
                                   ImplicitKnowledge{"dog", "a dog", KnowledgeSource::multimodal}};

    Sample s3 = mini_sample("s3", {"sun"});
    s3.visual_context = {"bright sun", {}, {}};
    s3.knowledge = KnowledgeBundle{{{"w4", "the moon is bright", 2.0}, {"w5", "sun and moon", 1.5}},
                                   ImplicitKnowledge{"moon", "at night"},
                                   std::nullopt};

    Sample s4 = mini_sample("s4", {"kite"});
    s4.visual_context = {"flying high", {}, {}};
    return {s1, s2, s3, s4};
}

}  // namespace

TEST_CASE("answers normalize to lowercase article-free word sequences") {
    CHECK(normalize_answer("The Red  Apple!") == "red apple");
    CHECK(normalize_answer("an answer, a good one") == "answer good one");
    CHECK(normalize_answer("42nd St.") == "42nd st");
    CHECK(normalize_answer("tab\tand\nnewline") == "tab and newline");
    CHECK(normalize_answer("D\xc3\xa9j\xc3\xa0 Vu") == "d\xc3\xa9j\xc3\xa0 vu");
    CHECK(normalize_answer("a an the") == "");
    CHECK(normalize_answer("") == "");
}

TEST_CASE("simple soft accuracy counts matching annotations over three") {
    std::vector<std::string> answers = {"red", "Red!", "blue"};
    CHECK(soft_accuracy("red", answers) == doctest::Approx(2.0 / 3.0));
    CHECK(soft_accuracy("RED", answers) == doctest::Approx(2.0 / 3.0));
    CHECK(soft_accuracy("blue", answers) == doctest::Approx(1.0 / 3.0));
    CHECK(soft_accuracy("green", answers) == 0.0);
    CHECK(soft_accuracy("red", {"red", "red", "red", "red"}) == 1.0);
    CHECK_THROWS_AS(soft_accuracy("red", {}), ValidationError);
}

TEST_CASE("official soft accuracy averages leave-one-out subsets") {
    // Ten distinct annotations, two matching: leaving out a match scores
    // 1/3, leaving out anything else scores 2/3.
    std::vector<std::string> ten = {"red", "red", "b1", "b2", "b3", "b4", "b5", "b6", "b7", "b8"};
    CHECK(soft_accuracy("red", ten, SoftMode::official) ==
          doctest::Approx((2.0 * (1.0 / 3.0) + 8.0 * (2.0 / 3.0)) / 10.0));

    // Short annotation lists are cycled up to ten before averaging, which
    // can lift the official score above the simple one.
    std::vector<std::string> two = {"red", "blue"};
    CHECK(soft_accuracy("red", two, SoftMode::simple) == doctest::Approx(1.0 / 3.0));
    CHECK(soft_accuracy("red", two, SoftMode::official) == 1.0);

    CHECK(soft_accuracy("green", ten, SoftMode::official) == 0.0);
}

TEST_CASE("soft mode names parse strictly") {
    CHECK(soft_mode_from_name("simple") == SoftMode::simple);
    CHECK(soft_mode_from_name("official") == SoftMode::official);
    CHECK_THROWS_AS(soft_mode_from_name("strict"), UsageError);
}

TEST_CASE("exact match is normalized membership") {
    CHECK(exact_match("The Cat", {"cat", "dog"}) == 1);
    CHECK(exact_match("cats", {"cat", "dog"}) == 0);
    CHECK(exact_match("", {"cat"}) == 0);
    CHECK_THROWS_AS(exact_match("x", {}), ValidationError);
}

TEST_CASE("hits require a contiguous normalized token run") {
    std::vector<std::string> answers = {"red apple"};
    CHECK(hit("the big red apple fell", answers));
    CHECK(hit("A Red, APPLE!", answers));
    CHECK_FALSE(hit("the apple is red", answers));
    CHECK_FALSE(hit("red tasty apple", answers));
    CHECK_FALSE(hit("red", answers));
    CHECK(hit("some text", {"missing", "text"}));
    CHECK_FALSE(hit("", answers));
    CHECK_FALSE(hit("words here", {}));
    CHECK_FALSE(hit("words here", {""}));
}

TEST_CASE("the selector table is fixed") {
    CHECK(kHitSelectors ==
          std::vector<std::string>{"gpt3_ans", "gpt3_evi", "gpt3_ans+evi", "ofa_ans", "ofa_evi",
                                   "ofa_ans+evi", "caption", "labels", "ocr", "visual_context",
                                   "wikipedia", "all"});
}

TEST_CASE("hit rates per source over a small dataset") {
    auto data = hit_dataset();

    SUBCASE("visual sources never depend on knowledge") {
        CHECK(hit_rate(data, "caption") == doctest::Approx(50.0));
        CHECK(hit_rate(data, "labels") == doctest::Approx(50.0));
        CHECK(hit_rate(data, "ocr") == doctest::Approx(0.0));
        CHECK(hit_rate(data, "visual_context") == doctest::Approx(75.0));
    }
    SUBCASE("strict mode reports absent fields with counts") {
        CHECK_THROWS_WITH_AS(hit_rate(data, "gpt3_ans"),
                             "source \"gpt3_ans\" is absent on 1 of 4 samples",
                             MissingKnowledgeError);
        CHECK_THROWS_WITH_AS(hit_rate(data, "ofa_ans"),
                             "source \"ofa_ans\" is absent on 2 of 4 samples",
                             MissingKnowledgeError);
    }
    SUBCASE("permissive mode scores misses against the full denominator") {
        CHECK(hit_rate(data, "gpt3_ans", true) == doctest::Approx(25.0));
        CHECK(hit_rate(data, "ofa_ans", true) == doctest::Approx(25.0));
        // A sample missing any referenced field counts as a miss outright,
        // even when its present fields would have matched.
        CHECK(hit_rate(data, "all", true) == doctest::Approx(50.0));
    }
    SUBCASE("wikipedia depth changes the searched text") {
        std::vector<Sample> known(data.begin(), data.begin() + 3);
        CHECK(hit_rate(known, "wikipedia(1)") == doctest::Approx(100.0 * 2.0 / 3.0));
        CHECK(hit_rate(known, "wikipedia(2)") == doctest::Approx(100.0));
        CHECK(hit_rate(known, "wikipedia(9)") == doctest::Approx(100.0));
        CHECK(hit_rate(known, "wikipedia") == doctest::Approx(100.0));
    }
    SUBCASE("selector parsing is strict") {
        CHECK_THROWS_AS(hit_rate(data, "wikipedia(0)"), UsageError);
        CHECK_THROWS_AS(hit_rate(data, "wikipedia()"), UsageError);
        CHECK_THROWS_AS(hit_rate(data, "caption(2)"), UsageError);
        CHECK_THROWS_AS(hit_rate(data, "bogus"), UsageError);
        CHECK_THROWS_AS(hit_rate({}, "caption"), ValidationError);
    }
}

TEST_CASE("ensemble voting is frequency first then lowest seed") {
    CHECK(ensemble_vote({{0, "green"}, {1, "blue"}, {2, "red"}, {3, "blue"}, {4, "red"},
                         {5, "red"}}) == "red");
    CHECK(ensemble_vote({{0, "The Red"}, {1, "red"}, {2, "red!"}, {3, "blue"}, {4, "blue"},
                         {5, "green"}}) == "The Red");
    CHECK(ensemble_vote({{1, "red"}, {0, "blue"}, {3, "red"}, {2, "blue"}, {5, "red"},
                         {4, "blue"}}) == "blue");
    CHECK(ensemble_vote({{3, "x"}, {2, "y"}, {1, "y"}, {0, "x"}}, EnsembleConfig{4}) == "x");
    CHECK_THROWS_AS(ensemble_vote({{0, "red"}}), ValidationError);
}

TEST_CASE("evaluate joins predictions with annotations") {
    std::vector<Sample> data = {mini_sample("a", {"red", "red", "red"}),
                                mini_sample("b", {"dog", "cat", "cow"}),
                                mini_sample("c", {"sun", "sun", "moon"})};
    std::vector<Prediction> preds = {{"a", "red", 0}, {"b", "fox", 0}, {"c", "Sun", 0}};

    MetricsReport r = evaluate(preds, data);
    CHECK(r.n == 3);
    CHECK(r.acc == doctest::Approx(100.0 * (1.0 + 0.0 + 2.0 / 3.0) / 3.0));
    CHECK(r.em == doctest::Approx(100.0 * 2.0 / 3.0));
    REQUIRE(r.per_sample.size() == 3);
    CHECK(r.per_sample[0].id == "a");
    CHECK(r.per_sample[1].acc == 0.0);
    CHECK(r.per_sample[2].em == 1.0);

    SUBCASE("prediction set must cover the dataset exactly once") {
        auto dup = preds;
        dup.push_back({"a", "other", 1});
        CHECK_THROWS_AS(evaluate(dup, data), ValidationError);
        auto extra = preds;
        extra.push_back({"ghost", "x", 0});
        CHECK_THROWS_AS(evaluate(extra, data), ValidationError);
        CHECK_THROWS_WITH_AS(evaluate({preds[0], preds[1]}, data),
                             "missing predictions for 1 samples: c", ValidationError);
        CHECK_THROWS_AS(evaluate(preds, {}), ValidationError);
    }
}

TEST_CASE("fixture predictions score the pinned rates") {
    auto data = load_dataset(testutil::fixture("eval20/dataset.jsonl"), Split::eval);
    auto preds = load_predictions(testutil::fixture("eval20/predictions.jsonl"));
    REQUIRE(data.size() == 20);

    MetricsReport simple = evaluate(preds, data, SoftMode::simple);
    CHECK(simple.acc == doctest::Approx(70.0).epsilon(1e-9));
    CHECK(simple.em == doctest::Approx(85.0).epsilon(1e-9));

    MetricsReport official = evaluate(preds, data, SoftMode::official);
    CHECK(official.acc == doctest::Approx(66.5).epsilon(1e-9));
    CHECK(official.em == doctest::Approx(85.0).epsilon(1e-9));

    attach_knowledge(data, load_knowledge(testutil::fixture("eval20/knowledge.jsonl")), true);
    CHECK(hit_rate(data, "caption") == doctest::Approx(45.0));
    CHECK(hit_rate(data, "gpt3_ans+evi") == doctest::Approx(80.0));
    CHECK(hit_rate(data, "wikipedia(1)") == doctest::Approx(45.0));
    CHECK(hit_rate(data, "all") == doctest::Approx(95.0));
}

TEST_CASE("metrics reports roundtrip through json") {
    MetricsReport r;
    r.acc = 61.25;
    r.em = 40.0;
    r.n = 8;
    r.per_sample = {{"a", 1.0, 1.0}, {"b", 0.25, 0.0}};
    r.hit_rates = {{"caption", 50.0}, {"all", 87.5}};
    r.notes = {{"truncated_streams", 3}};

    MetricsReport back = MetricsReport::from_json(r.to_json());
    CHECK(back.acc == r.acc);
    CHECK(back.em == r.em);
    CHECK(back.n == r.n);
    REQUIRE(back.per_sample.size() == 2);
    CHECK(back.per_sample[1].id == "b");
    CHECK(back.per_sample[1].acc == 0.25);
    CHECK(back.hit_rates == r.hit_rates);
    CHECK(back.notes == r.notes);
}

TEST_CASE("conversion tables pair hit rates with accuracy reports") {
    MetricsReport low;
    low.acc = 10.0;
    low.em = 5.0;
    MetricsReport high;
    high.acc = 60.0;
    high.em = 50.0;

    json table = analyze_conversion({{"caption", 40.0}, {"all", 90.0}},
                                    {{"caption", low}, {"all", high}});
    REQUIRE(table.at("rows").size() == 2);
    CHECK(table["rows"][0]["source"] == "all");
    CHECK(table["rows"][0]["hit"] == 90.0);
    CHECK(table["rows"][0]["acc"] == 60.0);
    CHECK(table["rows"][1]["source"] == "caption");
    CHECK(table["rows"][1]["em"] == 5.0);

    CHECK_THROWS_AS(analyze_conversion({{"caption", 40.0}}, {}), ValidationError);
    CHECK_THROWS_AS(analyze_conversion({{"caption", 40.0}}, {{"caption", low}, {"ocr", high}}),
                    ValidationError);
    CHECK_THROWS_AS(analyze_conversion({}, {}), ValidationError);
}
