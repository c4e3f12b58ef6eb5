#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "doctest.h"
#include "oracles.hpp"
#include "rac/retrieval.hpp"
#include "rac/rng.hpp"

using namespace rac;
using namespace rac::retrieval;
using rac::text::Passage;
using rac::text::TokenSeq;

namespace {

Passage make_passage(const std::string& id, const TokenSeq& tokens) {
    Passage p;
    p.doc_id = id.substr(0, id.find('#'));
    p.passage_id = id;
    p.tokens = tokens;
    p.text = text::join(tokens);
    return p;
}

// Small randomized corpus over a limited word pool so df/tf vary.
std::vector<Passage> random_corpus(size_t n, Rng& rng) {
    std::vector<std::string> pool{"ant", "bee", "cat", "dog", "elk", "fox",
                                  "gnu", "hen", "ibis", "jay", "koi", "lynx"};
    std::vector<Passage> out;
    for (size_t i = 0; i < n; ++i) {
        TokenSeq toks;
        size_t len = 3 + rng.below(20);
        for (size_t j = 0; j < len; ++j) toks.push_back(pool[rng.below(pool.size())]);
        out.push_back(make_passage("p" + std::to_string(i) + "#0", toks));
    }
    return out;
}

TokenSeq random_query(Rng& rng) {
    std::vector<std::string> pool{"ant", "bee", "cat", "dog", "elk", "fox", "zebra"};
    TokenSeq q;
    size_t len = 1 + rng.below(4);
    for (size_t j = 0; j < len; ++j) q.push_back(pool[rng.below(pool.size())]);
    return q;
}

}  // namespace

TEST_CASE("single-document bm25 has a closed form") {
    // N=1, df=1: idf = ln((1-1+0.5)/(1+0.5) + 1) = ln(4/3). With tf=1 and
    // dl == avgdl the tf factor is (k1+1)/(1+k1) = 1, so score = ln(4/3).
    InvertedIndex ix = InvertedIndex::build({make_passage("a#0", {"x"})});
    double got = ix.bm25_score({"x"}, "a#0");
    CHECK(got == doctest::Approx(std::log(4.0 / 3.0)).epsilon(1e-12));

    // Two-term doc, one matching term, still dl == avgdl.
    InvertedIndex ix2 = InvertedIndex::build({make_passage("a#0", {"x", "y"})});
    CHECK(ix2.bm25_score({"x"}, "a#0") == doctest::Approx(std::log(4.0 / 3.0)).epsilon(1e-12));
    CHECK(ix2.idf("x") == doctest::Approx(std::log(4.0 / 3.0)).epsilon(1e-12));
    CHECK(std::abs(ix2.bm25_score({"x"}, "a#0") - 0.28768207245178085) < 1e-15);
}

TEST_CASE("bm25 accessors expose corpus statistics") {
    std::vector<Passage> ps{make_passage("a#0", {"x", "y", "x"}),
                            make_passage("b#0", {"y"}),
                            make_passage("c#0", {"z", "z", "z", "z"})};
    InvertedIndex ix = InvertedIndex::build(ps);
    CHECK(ix.num_docs() == 3);
    CHECK(ix.avg_doc_len() == doctest::Approx((3 + 1 + 4) / 3.0));
    CHECK(ix.doc_len("a#0") == 3);
    CHECK(ix.df("y") == 2);
    CHECK(ix.df("x") == 1);
    CHECK(ix.df("missing") == 0);
    CHECK(ix.passage_ids() == std::vector<std::string>{"a#0", "b#0", "c#0"});
    CHECK_THROWS(ix.doc_len("nope#0"));
}

TEST_CASE("bm25 scores match the brute-force oracle") {
    Rng rng(11);
    std::vector<Passage> corpus = random_corpus(200, rng);
    InvertedIndex ix = InvertedIndex::build(corpus);
    BM25Params params;
    for (int trial = 0; trial < 50; ++trial) {
        TokenSeq q = random_query(rng);
        for (size_t i = 0; i < corpus.size(); i += 17) {
            double want = oracle::bm25_score(corpus, q, corpus[i].passage_id, params.k1, params.b);
            double got = ix.bm25_score(q, corpus[i].passage_id, params);
            CHECK(std::abs(want - got) < 1e-9);
        }
    }
}

TEST_CASE("retrieve_topk matches the oracle ranking") {
    Rng rng(13);
    std::vector<Passage> corpus = random_corpus(120, rng);
    InvertedIndex ix = InvertedIndex::build(corpus);
    RetrievalConfig cfg;
    cfg.k = 7;
    for (int trial = 0; trial < 30; ++trial) {
        TokenSeq q = random_query(rng);
        auto got = ix.retrieve_topk(q, cfg);
        auto want = oracle::retrieve_topk(corpus, q, size_t(cfg.k), 0.9, 0.4);
        REQUIRE(got.size() == want.size());
        for (size_t i = 0; i < got.size(); ++i) {
            CHECK(got[i].passage_id == want[i].passage_id);
            CHECK(std::abs(got[i].score - want[i].score) < 1e-9);
        }
    }
}

TEST_CASE("retrieve_topk excludes zero-score passages") {
    std::vector<Passage> ps{make_passage("a#0", {"x"}), make_passage("b#0", {"y"})};
    InvertedIndex ix = InvertedIndex::build(ps);
    RetrievalConfig cfg;
    cfg.k = 5;
    auto res = ix.retrieve_topk({"x"}, cfg);
    REQUIRE(res.size() == 1);
    CHECK(res[0].passage_id == "a#0");
    CHECK(ix.retrieve_topk({"zebra"}, cfg).empty());
    CHECK(ix.retrieve_topk({}, cfg).empty());
}

TEST_CASE("retrieve_topk breaks score ties by ascending passage id") {
    // Identical passages score identically; order must be lexicographic.
    std::vector<Passage> ps{make_passage("c#0", {"x"}), make_passage("a#0", {"x"}),
                            make_passage("b#0", {"x"})};
    InvertedIndex ix = InvertedIndex::build(ps);
    RetrievalConfig cfg;
    cfg.k = 3;
    auto res = ix.retrieve_topk({"x"}, cfg);
    REQUIRE(res.size() == 3);
    CHECK(res[0].passage_id == "a#0");
    CHECK(res[1].passage_id == "b#0");
    CHECK(res[2].passage_id == "c#0");
}

TEST_CASE("index is insertion-order independent") {
    Rng rng(17);
    std::vector<Passage> corpus = random_corpus(40, rng);
    std::vector<Passage> reversed(corpus.rbegin(), corpus.rend());
    InvertedIndex a = InvertedIndex::build(corpus);
    InvertedIndex b = InvertedIndex::build(reversed);
    CHECK(a.passage_ids() == b.passage_ids());
    TokenSeq q{"cat", "dog"};
    RetrievalConfig cfg;
    cfg.k = 10;
    auto ra = a.retrieve_topk(q, cfg);
    auto rb = b.retrieve_topk(q, cfg);
    REQUIRE(ra.size() == rb.size());
    for (size_t i = 0; i < ra.size(); ++i) {
        CHECK(ra[i].passage_id == rb[i].passage_id);
        CHECK(ra[i].score == rb[i].score);
    }
}

TEST_CASE("random_retrieve is seeded and returns distinct ids") {
    Rng rng(19);
    std::vector<Passage> corpus = random_corpus(30, rng);
    InvertedIndex ix = InvertedIndex::build(corpus);
    RetrievalConfig cfg;
    cfg.k = 10;
    cfg.strategy = Strategy::random_k;
    cfg.seed = 99;
    auto first = ix.random_retrieve(cfg);
    auto second = ix.random_retrieve(cfg);
    CHECK(first == second);
    CHECK(first.size() == 10);
    std::set<std::string> uniq(first.begin(), first.end());
    CHECK(uniq.size() == first.size());

    cfg.seed = 100;
    CHECK(ix.random_retrieve(cfg) != first);

    cfg.k = 1000;  // more than the corpus holds
    CHECK_THROWS(ix.random_retrieve(cfg));
}

TEST_CASE("index save/load round-trips") {
    Rng rng(23);
    std::vector<Passage> corpus = random_corpus(25, rng);
    InvertedIndex ix = InvertedIndex::build(corpus);
    FileGuard f(temp_path("index"));
    ix.save(f.path);
    InvertedIndex loaded = InvertedIndex::load(f.path);
    CHECK(loaded.num_docs() == ix.num_docs());
    CHECK(loaded.avg_doc_len() == ix.avg_doc_len());
    CHECK(loaded.passage_ids() == ix.passage_ids());
    TokenSeq q{"cat", "fox"};
    RetrievalConfig cfg;
    cfg.k = 8;
    auto ra = ix.retrieve_topk(q, cfg);
    auto rb = loaded.retrieve_topk(q, cfg);
    REQUIRE(ra.size() == rb.size());
    for (size_t i = 0; i < ra.size(); ++i) {
        CHECK(ra[i].passage_id == rb[i].passage_id);
        CHECK(ra[i].score == rb[i].score);
    }
}

TEST_CASE("index load rejects damaged files") {
    SUBCASE("missing") { CHECK_THROWS(InvertedIndex::load("no_such_index.bin")); }
    SUBCASE("bad magic") {
        FileGuard f(temp_path("index_magic"));
        std::ofstream(f.path, std::ios::binary) << "NOTANIDX blah blah";
        CHECK_THROWS(InvertedIndex::load(f.path));
    }
    SUBCASE("truncated") {
        Rng rng(29);
        InvertedIndex ix = InvertedIndex::build(random_corpus(10, rng));
        FileGuard full(temp_path("index_full"));
        ix.save(full.path);
        std::ifstream in(full.path, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)), {});
        FileGuard cut(temp_path("index_cut"));
        std::ofstream(cut.path, std::ios::binary) << bytes.substr(0, bytes.size() / 2);
        CHECK_THROWS(InvertedIndex::load(cut.path));
    }
}

TEST_CASE("parse_strategy maps names both ways") {
    CHECK(parse_strategy("bm25") == Strategy::bm25);
    CHECK(parse_strategy("random") == Strategy::random_k);
    CHECK_THROWS(parse_strategy("best"));
    CHECK(strategy_name(Strategy::bm25) == "bm25");
    CHECK(strategy_name(Strategy::random_k) == "random");
}

TEST_CASE("rewrite_query appends novel question content") {
    text::StopwordSet stops{"are", "you", "looking", "for", "the", "or", "of", "?"};
    TokenSeq query{"opal", "badger", "proteins"};
    TokenSeq question{"are", "you",   "looking", "for",   "the",    "navigation", "or",
                      "the", "photography", "of", "the", "opal", "badger", "?"};
    TokenSeq got = rewrite_query(query, question, stops);
    CHECK(got == TokenSeq{"opal", "badger", "proteins", "navigation", "photography"});
}

TEST_CASE("rewrite_query deduplicates and keeps first occurrences") {
    text::StopwordSet stops{"the"};
    CHECK(rewrite_query({"a", "b", "a"}, {"b", "c", "the", "c"}, stops) ==
          TokenSeq{"a", "b", "c"});
    CHECK(rewrite_query({}, {"the"}, stops).empty());
    CHECK(rewrite_query({"q"}, {}, stops) == TokenSeq{"q"});
}
