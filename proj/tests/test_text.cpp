#include <fstream>

#include "doctest.h"
#include "oracles.hpp"
#include "rac/rng.hpp"
#include "rac/text.hpp"

using namespace rac::text;

TEST_CASE("tokenize lowercases and splits punctuation") {
    CHECK(tokenize("Hello, World!") == TokenSeq{"hello", ",", "world", "!"});
    CHECK(tokenize("are you looking?") == TokenSeq{"are", "you", "looking", "?"});
    CHECK(tokenize("a-b") == TokenSeq{"a", "-", "b"});
    CHECK(tokenize("season 15") == TokenSeq{"season", "15"});
    CHECK(tokenize("x2go") == TokenSeq{"x2go"});
    CHECK(tokenize("") == TokenSeq{});
    CHECK(tokenize(" \t\n ") == TokenSeq{});
}

TEST_CASE("tokenize treats high bytes as word characters") {
    TokenSeq toks = tokenize("caf\xc3\xa9 au lait");
    CHECK(toks == TokenSeq{"caf\xc3\xa9", "au", "lait"});
}

TEST_CASE("tokenize is idempotent through join") {
    for (const char* s : {"Hello, World!", "a  b\tc", "A.B.C", "don't stop", "1,000 items"}) {
        TokenSeq once = tokenize(s);
        CHECK(tokenize(join(once)) == once);
    }
}

TEST_CASE("join round-trips space-separated tokens") {
    CHECK(join({"a", "b", "c"}) == "a b c");
    CHECK(join({}) == "");
    CHECK(join({"solo"}) == "solo");
}

TEST_CASE("vocab reserves the first five ids") {
    Vocab v;
    CHECK(v.size() == 5);
    CHECK(v.lookup("<pad>") == Vocab::kPad);
    CHECK(v.lookup("<bos>") == Vocab::kBos);
    CHECK(v.lookup("<eos>") == Vocab::kEos);
    CHECK(v.lookup("<unk>") == Vocab::kUnk);
    CHECK(v.lookup("<sep>") == Vocab::kSep);
    CHECK(v.surface(Vocab::kSep) == "<sep>");
}

TEST_CASE("vocab build assigns first-seen order and maps unknowns to unk") {
    Vocab v = Vocab::build({{"b", "a"}, {"a", "c"}});
    CHECK(v.size() == 8);
    CHECK(v.lookup("b") == 5);
    CHECK(v.lookup("a") == 6);
    CHECK(v.lookup("c") == 7);
    CHECK(v.lookup("zzz") == Vocab::kUnk);
    CHECK(v.ids({"a", "zzz", "b"}) == std::vector<int>{6, Vocab::kUnk, 5});
    CHECK_THROWS_AS((void)v.surface(8), std::out_of_range);
    CHECK_THROWS_AS((void)v.surface(-1), std::out_of_range);
}

TEST_CASE("vocab surfaces drop reserved ids") {
    Vocab v = Vocab::build({{"x", "y"}});
    std::vector<int> ids{Vocab::kBos, 5, Vocab::kSep, 6, Vocab::kEos};
    CHECK(v.surfaces(ids) == TokenSeq{"x", "y"});
    CHECK(v.to_text(ids) == "x y");
}

TEST_CASE("vocab save/load round-trips") {
    Vocab v = Vocab::build({{"alpha", "beta", "gamma"}});
    FileGuard f(temp_path("vocab"));
    v.save(f.path);
    Vocab loaded = Vocab::load(f.path);
    CHECK(loaded.size() == v.size());
    for (int id = 0; id < int(v.size()); ++id) CHECK(loaded.surface(id) == v.surface(id));
}

TEST_CASE("vocab load rejects damaged files") {
    SUBCASE("missing file") { CHECK_THROWS(Vocab::load("no_such_vocab_file.txt")); }
    SUBCASE("truncated reserved block") {
        FileGuard f(temp_path("vocab_trunc"));
        std::ofstream(f.path) << "<pad>\n<bos>\n";
        CHECK_THROWS_WITH_AS(Vocab::load(f.path), doctest::Contains("truncated"),
                             std::runtime_error);
    }
    SUBCASE("wrong reserved entry") {
        FileGuard f(temp_path("vocab_bad"));
        std::ofstream(f.path) << "<pad>\n<bos>\n<eos>\n<oops>\n<sep>\n";
        CHECK_THROWS_WITH_AS(Vocab::load(f.path), doctest::Contains("reserved"),
                             std::runtime_error);
    }
}

TEST_CASE("chunk_passages splits and preserves the token stream") {
    TokenSeq doc;
    for (int i = 0; i < 613; ++i) doc.push_back("w" + std::to_string(i));
    std::vector<Passage> chunks = chunk_passages("doc7", doc, 250);
    REQUIRE(chunks.size() == 3);
    CHECK(chunks[0].tokens.size() == 250);
    CHECK(chunks[1].tokens.size() == 250);
    CHECK(chunks[2].tokens.size() == 113);
    CHECK(chunks[0].passage_id == "doc7#0");
    CHECK(chunks[2].passage_id == "doc7#2");
    CHECK(chunks[1].doc_id == "doc7");
    CHECK(chunks[1].text == join(chunks[1].tokens));

    TokenSeq glued;
    for (const Passage& p : chunks) glued.insert(glued.end(), p.tokens.begin(), p.tokens.end());
    CHECK(glued == doc);
}

TEST_CASE("chunk_passages edge cases") {
    CHECK(chunk_passages("d", {}, 10).empty());
    std::vector<Passage> one = chunk_passages("d", {"a", "b"}, 10);
    REQUIRE(one.size() == 1);
    CHECK(one[0].tokens == TokenSeq{"a", "b"});
    CHECK_THROWS_AS(chunk_passages("d", {"a"}, 0), std::invalid_argument);
}

TEST_CASE("extract_ngrams counts multiplicities") {
    TokenSeq t{"a", "b", "a", "b"};
    auto uni = extract_ngrams(t, 1);
    CHECK(uni[{"a"}] == 2);
    CHECK(uni[{"b"}] == 2);
    auto bi = extract_ngrams(t, 2);
    CHECK(bi[Ngram{"a", "b"}] == 2);
    CHECK(bi[Ngram{"b", "a"}] == 1);
    CHECK(extract_ngrams(t, 5).empty());
    CHECK(extract_ngrams({}, 1).empty());
    CHECK(extract_ngrams(t, 0).empty());
}

TEST_CASE("content_units filters stopwords before forming n-grams") {
    StopwordSet stops{"the", "of"};
    UnitSet units = content_units({"the", "cat", "of", "doom"}, stops);
    // bigram spans the removed stopword
    CHECK(units.count({"cat", "doom"}) == 1);
    CHECK(units.count({"cat"}) == 1);
    CHECK(units.count({"doom"}) == 1);
    CHECK(units.size() == 3);
    for (const Ngram& u : units)
        for (const std::string& w : u) CHECK(stops.count(w) == 0);
}

TEST_CASE("content_units drops duplicates and handles stopword-only input") {
    StopwordSet stops{"the"};
    CHECK(content_units({"the", "the"}, stops).empty());
    CHECK(content_units({}, stops).empty());
    UnitSet twice = content_units({"cat", "cat"}, stops);
    CHECK(twice.count({"cat"}) == 1);
    CHECK(twice.count({"cat", "cat"}) == 1);
}

TEST_CASE("content_units matches the independent oracle") {
    StopwordSet stops{"the", "a", "of", "or"};
    rac::Rng rng(7);
    std::vector<std::string> pool{"the", "a", "of", "or", "cat", "dog", "fox", "hen", "owl"};
    for (int trial = 0; trial < 50; ++trial) {
        TokenSeq toks;
        size_t len = rng.below(12);
        for (size_t i = 0; i < len; ++i) toks.push_back(pool[rng.below(pool.size())]);
        CHECK(content_units(toks, stops) == oracle::content_units(toks, stops));
    }
}

TEST_CASE("appending tokens never removes content units") {
    StopwordSet stops{"the"};
    TokenSeq toks{"cat", "the", "dog"};
    UnitSet before = content_units(toks, stops);
    toks.push_back("fox");
    toks.push_back("the");
    UnitSet after = content_units(toks, stops);
    for (const Ngram& u : before) CHECK(after.count(u) == 1);
}

TEST_CASE("parse_stopwords skips comments and blanks") {
    StopwordSet s = parse_stopwords("# header\nthe\n\n  \na\r\nof \n#tail");
    CHECK(s.count("the") == 1);
    CHECK(s.count("a") == 1);
    CHECK(s.count("of") == 1);
    CHECK(s.size() == 3);
}

TEST_CASE("default stopwords cover the question template glue") {
    const StopwordSet& s = default_stopwords();
    for (const char* w : {"are", "you", "looking", "for", "the", "or", "of", "?"})
        CHECK_MESSAGE(s.count(w) == 1, w);
    CHECK(s.count("history") == 0);
    CHECK(s.count("silver") == 0);
}
