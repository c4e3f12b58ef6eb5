#include <cmath>
#include <string>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "rac/eval.hpp"
#include "rac/jsonl.hpp"
#include "rac/rng.hpp"
#include "rac/text.hpp"

using rac::text::StopwordSet;
using rac::text::TokenSeq;

namespace {

// Random token sequences over a small pool so candidate/passage overlap is
// common but not guaranteed.
TokenSeq random_seq(rac::Rng& rng, const std::vector<std::string>& pool, size_t max_len) {
    TokenSeq out;
    size_t len = rng.below(max_len + 1);
    for (size_t i = 0; i < len; ++i) out.push_back(pool[rng.below(pool.size())]);
    return out;
}

const std::vector<std::string>& word_pool() {
    static const std::vector<std::string> pool{"the",  "of",   "cat",  "dog",   "fox",
                                               "hen",  "owl",  "red",  "blue",  "barn",
                                               "moss", "tide", "stone", "night", "camp"};
    return pool;
}

}  // namespace

TEST_CASE("parent_components reports both overlap directions") {
    StopwordSet stops{"the", "of"};
    TokenSeq cand{"red", "fox", "barn"};
    std::vector<TokenSeq> passages{{"the", "red", "fox"}, {"owl", "of", "barn"}};
    TokenSeq ref{"red", "fox"};

    auto pc = rac::eval::parent_components(cand, passages, &ref, stops);
    CHECK(pc.has_ref);
    // candidate units: red, fox, barn, red-fox, fox-barn, red-fox-barn (6).
    // grounded: red, fox, barn, red-fox -> 4/6.
    CHECK(pc.r_in == doctest::Approx(4.0 / 6.0).epsilon(1e-12));
    // reference units: red, fox, red-fox (3), all covered by the candidate.
    CHECK(pc.r_ref == doctest::Approx(1.0).epsilon(1e-12));

    auto no_ref = rac::eval::parent_components(cand, passages, nullptr, stops);
    CHECK_FALSE(no_ref.has_ref);
    CHECK(no_ref.r_in == pc.r_in);

    TokenSeq empty_ref{"the", "of"};  // stopwords only: no usable units
    auto pc2 = rac::eval::parent_components(cand, passages, &empty_ref, stops);
    CHECK_FALSE(pc2.has_ref);
}

TEST_CASE("parent_recall is the geometric mean when a reference exists") {
    StopwordSet stops{"the", "of"};
    TokenSeq cand{"red", "fox", "barn"};
    std::vector<TokenSeq> passages{{"the", "red", "fox"}, {"owl", "of", "barn"}};
    TokenSeq ref{"red", "fox"};

    double with_ref = rac::eval::parent_recall(cand, passages, &ref, stops);
    CHECK(with_ref == doctest::Approx(std::sqrt(4.0 / 6.0)).epsilon(1e-12));
    double no_ref = rac::eval::parent_recall(cand, passages, nullptr, stops);
    CHECK(no_ref == doctest::Approx(4.0 / 6.0).epsilon(1e-12));
}

TEST_CASE("parent_recall and hallucination_rate match the oracle") {
    StopwordSet stops{"the", "of"};
    rac::Rng rng(41);
    for (int trial = 0; trial < 50; ++trial) {
        TokenSeq cand = random_seq(rng, word_pool(), 8);
        TokenSeq ref = random_seq(rng, word_pool(), 8);
        std::vector<TokenSeq> passages;
        size_t np = 1 + rng.below(3);
        for (size_t i = 0; i < np; ++i) passages.push_back(random_seq(rng, word_pool(), 12));

        double pr = rac::eval::parent_recall(cand, passages, &ref, stops);
        CHECK(pr == doctest::Approx(oracle::parent_recall(cand, passages, &ref, stops))
                        .epsilon(1e-12));
        double pr_solo = rac::eval::parent_recall(cand, passages, nullptr, stops);
        CHECK(pr_solo == doctest::Approx(oracle::parent_recall(cand, passages, nullptr, stops))
                             .epsilon(1e-12));
        double hr = rac::eval::hallucination_rate(cand, passages, stops);
        CHECK(hr ==
              doctest::Approx(oracle::hallucination_rate(cand, passages, stops)).epsilon(1e-12));
    }
}

TEST_CASE("passage order and duplication do not change grounding metrics") {
    StopwordSet stops{"the"};
    TokenSeq cand{"red", "fox", "tide", "stone"};
    std::vector<TokenSeq> passages{{"red", "fox", "barn"}, {"tide", "moss"}, {"owl", "stone"}};
    std::vector<TokenSeq> shuffled{passages[2], passages[0], passages[1]};
    std::vector<TokenSeq> duplicated{passages[0], passages[1], passages[2],
                                     passages[1], passages[0]};

    double base = rac::eval::hallucination_rate(cand, passages, stops);
    CHECK(rac::eval::hallucination_rate(cand, shuffled, stops) == base);
    CHECK(rac::eval::hallucination_rate(cand, duplicated, stops) == base);
    double pr = rac::eval::parent_recall(cand, passages, nullptr, stops);
    CHECK(rac::eval::parent_recall(cand, shuffled, nullptr, stops) == pr);
    CHECK(rac::eval::parent_recall(cand, duplicated, nullptr, stops) == pr);
}

TEST_CASE("candidates without content units score zero, not one") {
    StopwordSet stops{"the", "of"};
    std::vector<TokenSeq> passages{{"red", "fox"}};
    TokenSeq glue_only{"the", "of", "the"};
    CHECK(rac::eval::parent_recall(glue_only, passages, nullptr, stops) == 0.0);
    CHECK(rac::eval::hallucination_rate(glue_only, passages, stops) == 0.0);
    CHECK(rac::eval::parent_recall({}, passages, nullptr, stops) == 0.0);
    CHECK(rac::eval::hallucination_rate({}, passages, stops) == 0.0);

    // No passages at all: every unit is unsupported.
    TokenSeq cand{"red", "fox"};
    CHECK(rac::eval::hallucination_rate(cand, {}, stops) == 1.0);
    CHECK(rac::eval::parent_recall(cand, {}, nullptr, stops) == 0.0);
}

TEST_CASE("bleu on pinned cases") {
    TokenSeq abc{"a", "b", "c"};
    CHECK(rac::eval::bleu(abc, abc) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(rac::eval::bleu(abc, {"x", "y", "z"}) == 0.0);
    CHECK(rac::eval::bleu({}, abc) == 0.0);
    CHECK(rac::eval::bleu(abc, {}) == 0.0);

    // p1=2/3, p2=(1+1)/(2+1), p3=(0+1)/(1+1), p4=1 (no 4-grams), bp=1:
    // score = (2/3 * 2/3 * 1/2)^(1/4) = (2/9)^(1/4).
    double expect = std::pow(2.0 / 9.0, 0.25);
    CHECK(rac::eval::bleu(abc, {"a", "b", "d"}) == doctest::Approx(expect).epsilon(1e-12));

    // Shorter candidate pays the brevity penalty on top of its precisions.
    TokenSeq cand{"a", "b"};
    TokenSeq ref{"a", "b", "c", "d"};
    double p_orders = std::pow(1.0, 0.25) * std::pow(1.0, 0.25)  // p1=2/2, p2=(1+1)/(1+1)
                      * std::pow(1.0, 0.25) * std::pow(1.0, 0.25);
    double bp = std::exp(1.0 - 4.0 / 2.0);
    CHECK(rac::eval::bleu(cand, ref) == doctest::Approx(bp * p_orders).epsilon(1e-12));
}

TEST_CASE("bleu and rouge_l match the oracle on random pairs") {
    rac::Rng rng(43);
    for (int trial = 0; trial < 50; ++trial) {
        TokenSeq cand = random_seq(rng, word_pool(), 9);
        TokenSeq ref = random_seq(rng, word_pool(), 9);
        CHECK(rac::eval::bleu(cand, ref) ==
              doctest::Approx(oracle::bleu(cand, ref)).epsilon(1e-12));
        CHECK(rac::eval::rouge_l(cand, ref) ==
              doctest::Approx(oracle::rouge_l(cand, ref)).epsilon(1e-12));
    }
}

TEST_CASE("rouge_l on pinned cases") {
    TokenSeq cand{"the", "cat", "sat", "here"};
    TokenSeq ref{"a", "cat", "sat"};
    // LCS = {cat, sat} -> p=2/4, r=2/3, f1=2*(1/2)*(2/3)/(1/2+2/3).
    double p = 0.5, r = 2.0 / 3.0;
    CHECK(rac::eval::rouge_l(cand, ref) ==
          doctest::Approx(2.0 * p * r / (p + r)).epsilon(1e-12));
    CHECK(rac::eval::rouge_l(cand, cand) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(rac::eval::rouge_l(cand, {"owl"}) == 0.0);
    CHECK(rac::eval::rouge_l({}, ref) == 0.0);

    // Order matters: a reversed candidate keeps unigrams but shrinks the LCS.
    TokenSeq fwd{"a", "b", "c", "d"};
    TokenSeq rev{"d", "c", "b", "a"};
    CHECK(rac::eval::rouge_l(fwd, rev) == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("parse_question_templates sorts longest first and skips junk") {
    auto templates = rac::eval::parse_question_templates(
        "# leading comment\n"
        "are you\n"
        "\n"
        "are you looking for   # trailing comment\n"
        "which\n");
    REQUIRE(templates.size() == 3);
    CHECK(templates[0] == TokenSeq{"are", "you", "looking", "for"});
    CHECK(templates[1] == TokenSeq{"are", "you"});
    CHECK(templates[2] == TokenSeq{"which"});

    CHECK(rac::eval::parse_question_templates("# only comments\n\n").empty());

    const auto& defaults = rac::eval::default_question_templates();
    CHECK(!defaults.empty());
    for (size_t i = 1; i < defaults.size(); ++i)
        CHECK(defaults[i - 1].size() >= defaults[i].size());
}

TEST_CASE("question_to_declarative keeps only the asserted content") {
    StopwordSet stops{"the", "or", "of"};
    auto templates = rac::eval::parse_question_templates("are you looking for\nare you\n");
    TokenSeq query{"silver", "fox"};

    TokenSeq question{"are", "you", "looking", "for", "the", "history",
                      "or",  "the", "pricing", "of",  "the", "silver",
                      "fox", "?"};
    TokenSeq decl = rac::eval::question_to_declarative(question, query, templates, stops);
    CHECK(decl == TokenSeq{"history", "pricing"});

    SUBCASE("longest template wins over its own prefix") {
        // With short-first matching "are you" would leave "looking for" behind.
        TokenSeq q{"are", "you", "looking", "for", "maps", "?"};
        CHECK(rac::eval::question_to_declarative(q, {}, templates, stops) == TokenSeq{"maps"});
    }

    SUBCASE("templates strip repeatedly") {
        TokenSeq q{"are", "you", "are", "you", "looking", "for", "maps"};
        CHECK(rac::eval::question_to_declarative(q, {}, templates, stops) == TokenSeq{"maps"});
    }

    SUBCASE("idempotent") {
        TokenSeq once = rac::eval::question_to_declarative(question, query, templates, stops);
        TokenSeq twice = rac::eval::question_to_declarative(once, query, templates, stops);
        CHECK(twice == once);
    }

    SUBCASE("query tokens are treated as given, not asserted") {
        TokenSeq q{"history", "silver", "fox", "history"};
        CHECK(rac::eval::question_to_declarative(q, query, templates, stops) ==
              TokenSeq{"history", "history"});
    }

    SUBCASE("a question that is all template and glue asserts nothing") {
        TokenSeq q{"are", "you", "looking", "for", "the", "silver", "?"};
        CHECK(rac::eval::question_to_declarative(q, query, templates, stops).empty());
    }
}

TEST_CASE("question_to_declarative string overload uses the default assets") {
    std::string decl = rac::eval::question_to_declarative(
        "Are you looking for the history or the pricing of the amber owl?", "amber owl");
    CHECK(decl == "history pricing");
    // Already-declarative text passes through minus query words and glue.
    CHECK(rac::eval::question_to_declarative("history pricing", "amber owl") ==
          "history pricing");
}

TEST_CASE("lexical entailment scores hypothesis support") {
    rac::eval::LexicalEntailmentScorer scorer;
    SUBCASE("single premise") {
        CHECK(scorer.score("the red fox sleeps", "red fox") == doctest::Approx(1.0));
        CHECK(scorer.score("the red fox sleeps", "blue fox") < 1.0);
        CHECK(scorer.score("nothing related", "red fox") == 0.0);
        CHECK(scorer.score("anything", "the of") == 0.0);  // no content units
    }
    SUBCASE("evidence union beats any single passage") {
        // "red" and "fox" live in different passages; the best single passage
        // supports half the unigrams, the union supports both.
        std::vector<std::string> passages{"red barn", "fox den"};
        std::string hyp = "red fox";  // units: red, fox, red-fox
        double best_single =
            std::max(scorer.score(passages[0], hyp), scorer.score(passages[1], hyp));
        CHECK(best_single == doctest::Approx(1.0 / 3.0));
        CHECK(scorer.score_evidence(passages, hyp) == doctest::Approx(2.0 / 3.0));
    }
    SUBCASE("base-class aggregation takes the best single passage") {
        struct Fixed : rac::eval::EntailmentScorer {
            double score(const std::string& premise, const std::string&) const override {
                return premise == "good" ? 0.8 : 0.1;
            }
        } fixed;
        CHECK(fixed.score_evidence({"bad", "good", "bad"}, "x") == doctest::Approx(0.8));
        CHECK(fixed.score_evidence({}, "x") == 0.0);
    }
}

TEST_CASE("entailment_proxy complements hallucination_rate for the lexical scorer") {
    const StopwordSet& stops = rac::text::default_stopwords();
    rac::eval::LexicalEntailmentScorer scorer(&stops);
    rac::Rng rng(47);
    int nontrivial = 0;
    for (int trial = 0; trial < 50; ++trial) {
        TokenSeq hyp = random_seq(rng, word_pool(), 6);
        std::vector<TokenSeq> passages;
        size_t np = 1 + rng.below(3);
        for (size_t i = 0; i < np; ++i) passages.push_back(random_seq(rng, word_pool(), 10));
        double ent = rac::eval::entailment_proxy(passages, hyp, scorer);
        double hall = rac::eval::hallucination_rate(hyp, passages, stops);
        if (rac::text::content_units(hyp, stops).empty()) {
            CHECK(ent == 0.0);  // empty hypotheses get no credit either way
        } else {
            CHECK(ent == doctest::Approx(1.0 - hall).epsilon(1e-12));
            ++nontrivial;
        }
    }
    CHECK(nontrivial > 25);
    CHECK(rac::eval::entailment_proxy({{"red", "fox"}}, {}, scorer) == 0.0);
}

TEST_CASE("evaluate_run averages per-record metrics") {
    const StopwordSet& stops = rac::text::default_stopwords();
    rac::eval::LexicalEntailmentScorer scorer;

    rac::eval::EvalRecord a;
    a.record_id = "a";
    a.query = {"amber", "owl"};
    a.passages = {{"the", "amber", "owl", "history", "guide"}, {"pricing", "notes"}};
    a.candidate = {"are", "you", "looking", "for", "the", "history", "or",
                   "the", "pricing", "of", "the", "amber", "owl", "?"};
    a.reference = a.candidate;
    a.has_reference = true;

    rac::eval::EvalRecord b;
    b.record_id = "b";
    b.query = {"amber", "owl"};
    b.passages = a.passages;
    b.candidate = {"are", "you", "looking", "for", "the", "folklore", "of", "the",
                   "amber", "owl", "?"};
    b.reference = a.reference;
    b.has_reference = true;

    rac::eval::EvalRecord c;  // no reference: excluded from bleu/rouge means
    c.record_id = "c";
    c.query = b.query;
    c.passages = b.passages;
    c.candidate = b.candidate;

    std::string detail_path = temp_path("eval_detail");
    FileGuard guard{detail_path};
    rac::eval::MetricReport rep;
    {
        rac::JsonlWriter detail(detail_path);
        rep = rac::eval::evaluate_run({a, b, c}, scorer, &detail);
    }

    CHECK(rep.num_records == 3);
    CHECK(rep.num_with_reference == 2);

    auto hand_mean = [&](auto&& f) {
        return (f(a) + f(b) + f(c)) / 3.0;
    };
    auto par = [&](const rac::eval::EvalRecord& r) {
        const TokenSeq* ref = r.has_reference ? &r.reference : nullptr;
        return rac::eval::parent_recall(r.candidate, r.passages, ref, stops);
    };
    auto hall = [&](const rac::eval::EvalRecord& r) {
        return rac::eval::hallucination_rate(r.candidate, r.passages, stops);
    };
    auto ent = [&](const rac::eval::EvalRecord& r) {
        TokenSeq decl = rac::eval::question_to_declarative(
            r.candidate, r.query, rac::eval::default_question_templates(), stops);
        return rac::eval::entailment_proxy(r.passages, decl, scorer);
    };
    CHECK(rep.parent_recall == doctest::Approx(hand_mean(par)).epsilon(1e-12));
    CHECK(rep.hallucination_rate == doctest::Approx(hand_mean(hall)).epsilon(1e-12));
    CHECK(rep.grounding_precision ==
          doctest::Approx(1.0 - rep.hallucination_rate).epsilon(1e-12));
    CHECK(rep.entailment == doctest::Approx(hand_mean(ent)).epsilon(1e-12));
    double bleu_mean =
        (rac::eval::bleu(a.candidate, a.reference) + rac::eval::bleu(b.candidate, b.reference)) /
        2.0;
    CHECK(rep.bleu == doctest::Approx(bleu_mean).epsilon(1e-12));
    double rouge_mean = (rac::eval::rouge_l(a.candidate, a.reference) +
                         rac::eval::rouge_l(b.candidate, b.reference)) /
                        2.0;
    CHECK(rep.rouge_l == doctest::Approx(rouge_mean).epsilon(1e-12));

    auto lines = rac::read_jsonl(detail_path);
    REQUIRE(lines.size() == 3);
    CHECK(lines[0]["record_id"] == "a");
    CHECK(lines[0].contains("bleu"));
    CHECK(lines[0]["declarative"] == "history pricing");
    CHECK(lines[2]["record_id"] == "c");
    CHECK_FALSE(lines[2].contains("bleu"));  // no reference, no overlap scores
    CHECK(lines[2]["candidate"] == rac::text::join(c.candidate));

    CHECK_THROWS_WITH_AS(rac::eval::evaluate_run({}, scorer), "evaluate_run: no records",
                         std::invalid_argument);
}

TEST_CASE("report_to_json carries every field") {
    rac::eval::MetricReport rep;
    rep.parent_recall = 0.5;
    rep.entailment = 0.25;
    rep.hallucination_rate = 0.125;
    rep.grounding_precision = 0.875;
    rep.bleu = 0.75;
    rep.rouge_l = 0.8125;
    rep.num_records = 7;
    rep.num_with_reference = 4;
    rac::json j = rac::eval::report_to_json(rep);
    CHECK(j["parent_recall"] == 0.5);
    CHECK(j["entailment"] == 0.25);
    CHECK(j["hallucination_rate"] == 0.125);
    CHECK(j["grounding_precision"] == 0.875);
    CHECK(j["bleu"] == 0.75);
    CHECK(j["rouge_l"] == 0.8125);
    CHECK(j["num_records"] == 7);
    CHECK(j["num_with_reference"] == 4);
}

TEST_CASE("spearman oracle behaves on known rankings") {
    // The sweep monotonicity check leans on this oracle, so pin it down.
    CHECK(oracle::spearman_rho({1, 2, 3, 4}, {10, 20, 30, 40}) == doctest::Approx(1.0));
    CHECK(oracle::spearman_rho({1, 2, 3, 4}, {40, 30, 20, 10}) == doctest::Approx(-1.0));
    CHECK(oracle::spearman_rho({1, 2, 3, 4}, {7, 7, 7, 7}) == 0.0);
    // Ties get midranks: {1,1,2} vs {3,3,9} is still a perfect agreement.
    CHECK(oracle::spearman_rho({1, 1, 2}, {3, 3, 9}) == doctest::Approx(1.0));
}
