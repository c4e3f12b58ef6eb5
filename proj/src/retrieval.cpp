#include "rac/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <stdexcept>

#include "rac/jsonl.hpp"
#include "rac/rng.hpp"

namespace rac::retrieval {

namespace {

void write_u32(std::ostream& out, uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }
void write_u64(std::ostream& out, uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); }
void write_f64(std::ostream& out, double v) { out.write(reinterpret_cast<const char*>(&v), 8); }
void write_str(std::ostream& out, const std::string& s) {
    write_u32(out, uint32_t(s.size()));
    out.write(s.data(), std::streamsize(s.size()));
}

uint32_t read_u32(std::istream& in) {
    uint32_t v;
    in.read(reinterpret_cast<char*>(&v), 4);
    if (!in) throw std::runtime_error("index file truncated");
    return v;
}
uint64_t read_u64(std::istream& in) {
    uint64_t v;
    in.read(reinterpret_cast<char*>(&v), 8);
    if (!in) throw std::runtime_error("index file truncated");
    return v;
}
double read_f64(std::istream& in) {
    double v;
    in.read(reinterpret_cast<char*>(&v), 8);
    if (!in) throw std::runtime_error("index file truncated");
    return v;
}
std::string read_str(std::istream& in) {
    uint32_t n = read_u32(in);
    std::string s(n, '\0');
    in.read(s.data(), n);
    if (!in) throw std::runtime_error("index file truncated");
    return s;
}

constexpr char kMagic[6] = {'R', 'A', 'C', 'I', 'X', '1'};

}  // namespace

Strategy parse_strategy(const std::string& name) {
    if (name == "bm25") return Strategy::bm25;
    if (name == "random") return Strategy::random_k;
    throw std::invalid_argument("unknown retrieval strategy: " + name);
}

std::string strategy_name(Strategy s) {
    return s == Strategy::bm25 ? "bm25" : "random";
}

void InvertedIndex::rebuild_id_index() {
    id_index_.clear();
    for (uint32_t i = 0; i < ids_.size(); ++i) id_index_.emplace(ids_[i], i);
}

InvertedIndex InvertedIndex::build(const std::vector<text::Passage>& passages) {
    InvertedIndex idx;
    std::vector<const text::Passage*> sorted;
    sorted.reserve(passages.size());
    for (const auto& p : passages) sorted.push_back(&p);
    std::sort(sorted.begin(), sorted.end(),
              [](const text::Passage* a, const text::Passage* b) {
                  return a->passage_id < b->passage_id;
              });
    for (size_t i = 0; i + 1 < sorted.size(); ++i)
        if (sorted[i]->passage_id == sorted[i + 1]->passage_id)
            throw std::invalid_argument("duplicate passage_id: " + sorted[i]->passage_id);

    uint64_t total_len = 0;
    for (uint32_t d = 0; d < sorted.size(); ++d) {
        const auto& p = *sorted[d];
        idx.ids_.push_back(p.passage_id);
        idx.doc_len_.push_back(p.tokens.size());
        total_len += p.tokens.size();
        std::map<std::string, uint64_t> counts;
        for (const auto& t : p.tokens) ++counts[t];
        for (const auto& [term, tf] : counts) idx.postings_[term].push_back({d, tf});
    }
    idx.avgdl_ = idx.ids_.empty() ? 0.0 : double(total_len) / double(idx.ids_.size());
    idx.rebuild_id_index();
    return idx;
}

uint64_t InvertedIndex::doc_len(const std::string& passage_id) const {
    auto it = id_index_.find(passage_id);
    if (it == id_index_.end())
        throw std::invalid_argument("unknown passage_id: " + passage_id);
    return doc_len_[it->second];
}

uint64_t InvertedIndex::df(const std::string& term) const {
    auto it = postings_.find(term);
    return it == postings_.end() ? 0 : it->second.size();
}

double InvertedIndex::idf(const std::string& term) const {
    double n = double(num_docs());
    double d = double(df(term));
    return std::log((n - d + 0.5) / (d + 0.5) + 1.0);
}

double InvertedIndex::bm25_score(const text::TokenSeq& query, const std::string& passage_id,
                                 const BM25Params& params) const {
    auto it = id_index_.find(passage_id);
    if (it == id_index_.end())
        throw std::invalid_argument("unknown passage_id: " + passage_id);
    uint32_t doc = it->second;
    double dl = double(doc_len_[doc]);
    double norm = params.k1 * (1.0 - params.b + params.b * dl / (avgdl_ > 0 ? avgdl_ : 1.0));

    std::set<std::string> unique_terms(query.begin(), query.end());
    double score = 0.0;
    for (const auto& term : unique_terms) {
        auto pit = postings_.find(term);
        if (pit == postings_.end()) continue;
        const auto& plist = pit->second;
        auto dit = std::lower_bound(plist.begin(), plist.end(), doc,
                                    [](const Posting& p, uint32_t d) { return p.doc < d; });
        if (dit == plist.end() || dit->doc != doc) continue;
        double tf = double(dit->tf);
        score += idf(term) * tf * (params.k1 + 1.0) / (tf + norm);
    }
    return score;
}

std::vector<ScoredPassage> InvertedIndex::retrieve_topk(const text::TokenSeq& query,
                                                        const RetrievalConfig& cfg,
                                                        const BM25Params& params) const {
    if (cfg.k <= 0) return {};
    std::set<std::string> unique_terms(query.begin(), query.end());
    // Gather candidate docs that share at least one term with the query;
    // every candidate ends up with a strictly positive score because the
    // +1-inside-log idf is positive for any df.
    std::map<uint32_t, double> scores;
    for (const auto& term : unique_terms) {
        auto pit = postings_.find(term);
        if (pit == postings_.end()) continue;
        double w = idf(term);
        for (const Posting& p : pit->second) {
            double dl = double(doc_len_[p.doc]);
            double norm =
                params.k1 * (1.0 - params.b + params.b * dl / (avgdl_ > 0 ? avgdl_ : 1.0));
            double tf = double(p.tf);
            scores[p.doc] += w * tf * (params.k1 + 1.0) / (tf + norm);
        }
    }
    std::vector<ScoredPassage> ranked;
    ranked.reserve(scores.size());
    for (const auto& [doc, score] : scores)
        if (score > 0.0) ranked.push_back({ids_[doc], score});
    std::sort(ranked.begin(), ranked.end(), [](const ScoredPassage& a, const ScoredPassage& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.passage_id < b.passage_id;
    });
    if (ranked.size() > size_t(cfg.k)) ranked.resize(size_t(cfg.k));
    return ranked;
}

std::vector<std::string> InvertedIndex::random_retrieve(const RetrievalConfig& cfg) const {
    if (cfg.k < 0 || size_t(cfg.k) > num_docs())
        throw std::invalid_argument("random_retrieve: k exceeds corpus size");
    std::vector<std::string> pool = ids_;  // sorted base order
    Rng rng(cfg.seed);
    std::vector<std::string> out;
    out.reserve(size_t(cfg.k));
    for (size_t i = 0; i < size_t(cfg.k); ++i) {
        size_t j = i + size_t(rng.below(pool.size() - i));
        std::swap(pool[i], pool[j]);
        out.push_back(pool[i]);
    }
    return out;
}

void InvertedIndex::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path);
    out.write(kMagic, sizeof(kMagic));
    write_u64(out, num_docs());
    write_f64(out, avgdl_);
    for (size_t i = 0; i < ids_.size(); ++i) {
        write_str(out, ids_[i]);
        write_u64(out, doc_len_[i]);
    }
    write_u64(out, postings_.size());
    for (const auto& [term, plist] : postings_) {
        write_str(out, term);
        write_u64(out, plist.size());
        for (const Posting& p : plist) {
            write_u32(out, p.doc);
            write_u64(out, p.tf);
        }
    }
    if (!out) throw std::runtime_error("failed writing " + path);
}

InvertedIndex InvertedIndex::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    char magic[6];
    in.read(magic, 6);
    if (!in || std::memcmp(magic, kMagic, 6) != 0)
        throw std::runtime_error(path + ": not an index file (bad magic)");
    InvertedIndex idx;
    uint64_t ndocs = read_u64(in);
    idx.avgdl_ = read_f64(in);
    idx.ids_.reserve(ndocs);
    idx.doc_len_.reserve(ndocs);
    for (uint64_t i = 0; i < ndocs; ++i) {
        idx.ids_.push_back(read_str(in));
        idx.doc_len_.push_back(read_u64(in));
    }
    uint64_t nterms = read_u64(in);
    for (uint64_t t = 0; t < nterms; ++t) {
        std::string term = read_str(in);
        uint64_t df = read_u64(in);
        std::vector<Posting> plist;
        plist.reserve(df);
        for (uint64_t i = 0; i < df; ++i) {
            Posting p;
            p.doc = read_u32(in);
            p.tf = read_u64(in);
            if (p.doc >= ndocs)
                throw std::runtime_error(path + ": posting refers to unknown doc");
            plist.push_back(p);
        }
        idx.postings_.emplace(std::move(term), std::move(plist));
    }
    idx.rebuild_id_index();
    return idx;
}

void InvertedIndex::export_jsonl(const std::string& path) const {
    JsonlWriter out(path);
    out.write(json{{"type", "summary"},
                   {"num_docs", num_docs()},
                   {"avg_doc_len", avgdl_},
                   {"num_terms", postings_.size()}});
    for (const auto& [term, plist] : postings_) {
        json postings = json::array();
        for (const Posting& p : plist)
            postings.push_back(json{{"passage_id", ids_[p.doc]}, {"tf", p.tf}});
        out.write(json{{"term", term}, {"df", plist.size()}, {"postings", postings}});
    }
}

text::TokenSeq rewrite_query(const text::TokenSeq& query, const text::TokenSeq& question,
                             const text::StopwordSet& stopwords) {
    text::TokenSeq out;
    std::set<std::string> seen;
    for (const auto& t : query) {
        if (seen.insert(t).second) out.push_back(t);
    }
    for (const auto& t : question) {
        if (stopwords.count(t)) continue;
        if (seen.insert(t).second) out.push_back(t);
    }
    return out;
}

}  // namespace rac::retrieval
