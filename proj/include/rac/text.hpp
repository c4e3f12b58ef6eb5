#pragma once

#include <map>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace rac::text {

using TokenSeq = std::vector<std::string>;
using StopwordSet = std::unordered_set<std::string>;

struct Token {
    int id;
    std::string surface;
};

// Lowercases and splits on whitespace; ASCII punctuation becomes its own
// single-character token. Bytes >= 0x80 are treated as word characters, so
// UTF-8 text passes through unsplit. Normalization is idempotent:
// tokenize(join(tokenize(s))) == tokenize(s).
TokenSeq tokenize(std::string_view s);

// Space-joined surface form.
std::string join(const TokenSeq& tokens);

// Token-id table with five reserved entries at fixed positions. Unknown
// surfaces map to kUnk. Built with a min-frequency cutoff of 1, i.e. every
// surface seen at least once gets an id.
class Vocab {
  public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kUnk = 3;
    static constexpr int kSep = 4;
    static constexpr int kNumReserved = 5;

    Vocab();
    static Vocab build(const std::vector<TokenSeq>& streams);

    int lookup(std::string_view surface) const;          // kUnk if absent
    const std::string& surface(int id) const;            // throws on bad id
    std::vector<int> ids(const TokenSeq& tokens) const;
    Token token(std::string_view surface) const { return {lookup(surface), std::string(surface)}; }

    // Surfaces for a generated id sequence, dropping reserved ids.
    TokenSeq surfaces(const std::vector<int>& ids) const;
    std::string to_text(const std::vector<int>& ids) const { return join(surfaces(ids)); }

    size_t size() const { return entries_.size(); }

    void save(const std::string& path) const;
    static Vocab load(const std::string& path);

  private:
    std::vector<std::string> entries_;
    std::unordered_map<std::string, int> index_;
    void insert(const std::string& surface);
};

struct Passage {
    std::string doc_id;
    std::string passage_id;  // "<doc_id>#<chunk index>", stable across runs
    TokenSeq tokens;
    std::string text;  // normalized join of tokens
};

// Greedy fixed-size chunking; the last chunk keeps the remainder, and
// concatenating the chunks reproduces the input token sequence.
std::vector<Passage> chunk_passages(const std::string& doc_id, const TokenSeq& doc_tokens,
                                    size_t chunk_size = 250);

using Ngram = std::vector<std::string>;

// Multiset of n-grams with multiplicities; empty when n exceeds the length.
std::map<Ngram, int> extract_ngrams(const TokenSeq& tokens, size_t n);

// Content units: the deduplicated union of 1-, 2- and 3-grams built over the
// token sequence after stopword removal. Appending tokens never removes
// units, and stopword-only input yields the empty set.
using UnitSet = std::set<Ngram>;
UnitSet content_units(const TokenSeq& tokens, const StopwordSet& stopwords);

// Parses a stopword asset: one token per line, '#' comments, blank lines
// ignored.
StopwordSet parse_stopwords(std::string_view content);

// The embedded copy of assets/stopwords.txt.
const StopwordSet& default_stopwords();

}  // namespace rac::text
