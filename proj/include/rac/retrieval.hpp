#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "rac/text.hpp"

namespace rac::retrieval {

struct BM25Params {
    double k1 = 0.9;
    double b = 0.4;
};

enum class Strategy { bm25, random_k };

Strategy parse_strategy(const std::string& name);  // "bm25" | "random"
std::string strategy_name(Strategy s);

struct RetrievalConfig {
    int k = 5;
    Strategy strategy = Strategy::bm25;
    uint64_t seed = 0;  // used by the random strategy only
};

struct Posting {
    uint32_t doc = 0;  // index into the sorted passage-id table
    uint64_t tf = 0;
};

struct ScoredPassage {
    std::string passage_id;
    double score = 0.0;
};

// Inverted index over tokenized passages. Passages are kept in lexicographic
// passage_id order internally, so the index content is independent of
// insertion order and every traversal is deterministic.
class InvertedIndex {
  public:
    static InvertedIndex build(const std::vector<text::Passage>& passages);

    size_t num_docs() const { return ids_.size(); }
    double avg_doc_len() const { return avgdl_; }
    uint64_t doc_len(const std::string& passage_id) const;
    uint64_t df(const std::string& term) const;
    const std::vector<std::string>& passage_ids() const { return ids_; }

    // Non-negative IDF variant: ln((N - df + 0.5) / (df + 0.5) + 1).
    double idf(const std::string& term) const;

    // Sum over unique query terms of idf * tf*(k1+1) / (tf + k1*(1-b+b*dl/avgdl)).
    double bm25_score(const text::TokenSeq& query, const std::string& passage_id,
                      const BM25Params& params = {}) const;

    // Top-k by score, descending, ties broken by ascending passage_id.
    // Passages that share no term with the query are never returned, so the
    // result holds min(k, number of positive-score passages) entries.
    std::vector<ScoredPassage> retrieve_topk(const text::TokenSeq& query,
                                             const RetrievalConfig& cfg,
                                             const BM25Params& params = {}) const;

    // Seeded sample of k distinct passage ids, uniform over the corpus;
    // throws when k exceeds the corpus size.
    std::vector<std::string> random_retrieve(const RetrievalConfig& cfg) const;

    // Binary snapshot, magic "RACIX1". Load validates the magic and the
    // declared counts and rejects truncated files.
    void save(const std::string& path) const;
    static InvertedIndex load(const std::string& path);

    // Debug export: one JSON line per term plus a summary line.
    void export_jsonl(const std::string& path) const;

  private:
    std::vector<std::string> ids_;      // sorted passage ids
    std::vector<uint64_t> doc_len_;     // aligned with ids_
    std::map<std::string, std::vector<Posting>> postings_;
    std::unordered_map<std::string, uint32_t> id_index_;
    double avgdl_ = 0.0;

    void rebuild_id_index();
};

// U_q followed by the content-bearing tokens of the clarifying question
// (stopwords removed), deduplicated keeping first occurrences.
text::TokenSeq rewrite_query(const text::TokenSeq& query, const text::TokenSeq& question,
                             const text::StopwordSet& stopwords);

}  // namespace rac::retrieval
