#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rac/decode.hpp"
#include "rac/eval.hpp"
#include "rac/jsonl.hpp"
#include "rac/lm.hpp"
#include "rac/retrieval.hpp"
#include "rac/text.hpp"
#include "rac/train.hpp"

namespace rac::pipeline {

// ---------------------------------------------------------------------------
// synthetic corpus

struct SyntheticCorpusSpec {
    int num_topics = 400;
    int facets_per_topic = 4;  // every query must stay ambiguous: >= 2
    int docs_per_facet = 1;
    uint64_t seed = 0;
};

struct Document {
    std::string doc_id;
    std::string topic_id;
    std::string text;
};

// One gold clarification: the ambiguous query plus a question contrasting two
// facets that the topic's documents cover. The query names one detail word
// from each facet's document but not the facets themselves, so resolving
// which facets to ask about requires the documents.
struct GoldRecord {
    std::string query_id;  // "<topic_id>#<pair index>"
    std::string topic_id;
    std::string query;
    std::string question;
    std::string facet_a;
    std::string facet_b;
    std::string detail_a;  // the query's hint word drawn from facet_a's document
    std::string detail_b;
};

struct CorpusBundle {
    std::vector<Document> documents;
    std::vector<GoldRecord> gold;
};

// Template-grammar corpus: each topic is a unique adjective+noun pair and
// each of its facets gets a dedicated document. Detail vocabularies are
// reassigned to facet names independently per topic, so the mapping from a
// query's detail hints to the facet names the question must contrast exists
// nowhere except in the topic's own documents — a model that ignores its
// retrieved passages cannot recover it. Deterministic given the seed.
CorpusBundle make_synthetic_corpus(const SyntheticCorpusSpec& spec);

// Word pools the grammar draws from, exposed for tests (disjointness from
// stopwords/templates is what guarantees groundedness by construction).
const std::vector<std::string>& corpus_adjectives();
const std::vector<std::string>& corpus_nouns();
const std::vector<std::string>& corpus_facets();
const std::vector<std::vector<std::string>>& corpus_detail_sets();

void save_corpus(const CorpusBundle& bundle, const std::string& docs_path,
                 const std::string& gold_path, const std::string& config_hash, uint64_t seed);
CorpusBundle load_corpus(const std::string& docs_path, const std::string& gold_path);

// ---------------------------------------------------------------------------
// run configuration

// Flat key/value configuration for the whole pipeline; one JSON object drives
// every stage. Unknown keys are rejected so typos fail loudly.
struct RunConfig {
    uint64_t seed = 1;

    // corpus
    int num_topics = 1200;
    int facets_per_topic = 4;
    int docs_per_facet = 1;
    int chunk_size = 250;

    // retrieval
    int k = 5;
    double k1 = 0.9;
    double b = 0.4;
    std::string retrieval_strategy = "bm25";  // or "random"

    // model
    int d_model = 32;
    int n_layers = 2;
    int n_heads = 4;
    int context_len = 384;

    // optimization
    double lr_sft = 3e-3;
    double lr_dpo = 1e-3;
    std::string schedule = "linear";
    int epochs = 2;      // supervised fine-tuning passes
    int dpo_epochs = 3;  // preference-alignment passes
    int batch_size = 32;
    double beta = 0.1;
    double gamma = 0.5;

    // decoding / negatives
    double alpha = 0.7;
    double temperature = 1.0;
    int top_k = 10;
    int max_len = 20;
    std::string negative_source = "uncond";  // or "base_lm"
    int negatives_per_tuple = 1;
    bool gold_positive = false;  // use gold questions as C+ instead of greedy decodes

    // data handling
    double val_fraction = 0.2;
    std::string sft_data = "half";  // "half": split train into SFT and T2 halves; "all": reuse
    int pretrain_epochs = 10;       // next-token pretraining for the base model

    bool operator==(const RunConfig&) const = default;

    static RunConfig from_json(const json& j);  // throws on unknown keys
    json to_json() const;
    static RunConfig load(const std::string& path);
    void validate() const;
    std::string config_hash() const;  // stable hex digest of to_json()

    // module-config views
    SyntheticCorpusSpec corpus_spec() const;
    retrieval::BM25Params bm25_params() const;
    lm::LMConfig lm_config(int vocab_size) const;
    train::TrainConfig sft_train_config() const;
    train::TrainConfig dpo_train_config() const;
    decode::SampleConfig sample_config(uint64_t seed) const;
    decode::MixtureConfig mixture_config(uint64_t seed) const;
};

// ---------------------------------------------------------------------------
// dataset adaptation

// One adapted training tuple, in surface-token space; passages stay as ids
// into the passage store.
struct T1Record {
    std::string query_id;
    std::string topic_id;
    text::TokenSeq query;
    text::TokenSeq query_rewritten;
    std::vector<std::string> passage_ids;  // ranked, length <= k
    text::TokenSeq target;                 // gold clarifying question
};

// Chunked corpus passages addressable by id.
class PassageStore {
  public:
    void add(text::Passage passage);
    const text::Passage& get(const std::string& passage_id) const;  // throws if unknown
    const std::vector<text::Passage>& all() const { return passages_; }
    std::vector<std::vector<int>> resolve(const std::vector<std::string>& ids,
                                          const text::Vocab& vocab) const;
    // Reorders retrieved ids into corpus order. Contexts present evidence the
    // way the source documents lay it out; retrieval decides what the model
    // sees, never in which order.
    std::vector<std::string> corpus_order(std::vector<std::string> ids) const;

    static PassageStore from_documents(const std::vector<Document>& docs, int chunk_size);
    void save(const std::string& path, const std::string& config_hash, uint64_t seed) const;
    static PassageStore load(const std::string& path);

  private:
    std::vector<text::Passage> passages_;
    std::map<std::string, size_t> index_;
};

// Token vocabulary over everything the models must read or write: passages,
// queries, and gold questions.
text::Vocab build_vocab(const CorpusBundle& bundle, int chunk_size);

struct AdaptResult {
    std::vector<T1Record> records;
    size_t dropped = 0;  // tuples whose retrieval came back empty
};

// Query rewriting + pseudo-relevant retrieval for every gold record. The
// rewritten query folds the gold question's content words into the raw query;
// retrieval runs over the rewrite. Tuples with no retrieved passages are
// dropped and counted.
AdaptResult adapt_dataset(const std::vector<GoldRecord>& gold,
                          const retrieval::InvertedIndex& index, int k,
                          retrieval::Strategy strategy, const retrieval::BM25Params& params,
                          uint64_t seed);

struct SplitResult {
    std::vector<T1Record> train_a;  // supervised fine-tuning half
    std::vector<T1Record> train_b;  // preference-pair source half
    std::vector<T1Record> val;
};

// 80/20-style split by query (equivalently by topic, since queries and topics
// are one-to-one), then the training side is halved by query again.
SplitResult split_dataset(const std::vector<T1Record>& records, double val_fraction,
                          uint64_t seed);

void save_t1(const std::vector<T1Record>& records, size_t dropped, const std::string& path,
             const std::string& config_hash, uint64_t seed);
std::pair<std::vector<T1Record>, size_t> load_t1(const std::string& path);

// id-space encoding for the trainers
train::ClarificationTuple to_training_tuple(const T1Record& rec, const PassageStore& store,
                                            const text::Vocab& vocab);
std::vector<train::ClarificationTuple> to_training_tuples(const std::vector<T1Record>& recs,
                                                          const PassageStore& store,
                                                          const text::Vocab& vocab);

// Fresh base model: random init plus cfg.pretrain_epochs next-token passes
// over the passage store (none by default). Every fine-tune starts here.
lm::LMParams pretrained_base(const RunConfig& cfg, const PassageStore& store,
                             const text::Vocab& vocab, train::TrainLog* pretrain_log = nullptr);

// ---------------------------------------------------------------------------
// preference data

struct T2Record {
    std::string record_id;  // "<query_id>~<negative index>"
    std::string query_id;
    double alpha = 0.0;
    uint64_t seed = 0;  // seed the negative was decoded with
    std::vector<int> chosen;    // token ids, no trailing <eos>
    std::vector<int> rejected;
    std::vector<uint8_t> gates;  // per rejected token: 1 = query-only model
    bool retried = false;
};

struct BuildT2Result {
    std::vector<T2Record> records;
    size_t dropped = 0;      // pairs still identical after one regeneration
    size_t regenerated = 0;  // pairs that needed the second attempt
};

// For every tuple: a faithful candidate from the grounded model (greedy, or
// gold when cfg.gold_positive) and cfg.negatives_per_tuple mixture-decoded
// unfaithful candidates. Pairs whose sides come out identical are regenerated
// once from a fresh seed, then dropped.
BuildT2Result build_t2(const std::vector<T1Record>& tuples, const lm::LMParams& grounded,
                       const lm::LMParams& negative_model, lm::ModelRole negative_role,
                       const PassageStore& store, const text::Vocab& vocab, const RunConfig& cfg,
                       uint64_t stage_seed);

void save_t2(const BuildT2Result& result, const text::Vocab& vocab, const std::string& path,
             const std::string& config_hash, uint64_t seed);
std::vector<T2Record> load_t2(const std::string& path);

std::vector<train::PreferencePair> to_preference_pairs(const std::vector<T2Record>& records,
                                                       const std::vector<T1Record>& tuples,
                                                       const PassageStore& store,
                                                       const text::Vocab& vocab);

// ---------------------------------------------------------------------------
// orchestration

void write_train_log(const train::TrainLog& log, const std::string& path,
                     const std::string& config_hash, uint64_t seed);

// Runs corpus -> index -> adapt -> split -> SFT (grounded + query-only) ->
// negatives -> preference training -> paired evaluation, leaving every
// artifact under out_dir. Any stage failure is rethrown tagged with the stage
// name; artifacts written so far stay on disk.
json run_end_to_end(const RunConfig& cfg, const std::string& out_dir);

// Mixture-noise ablation over a fixed tuple slice; per-record seeds are
// shared across alphas so the comparison is paired.
json sweep_alpha(const RunConfig& cfg, const std::vector<double>& alphas,
                 const std::string& out_dir);

// Passage-count ablation: adapts once at max(ks), truncates the ranked lists
// per arm (k=0 keeps the tuple with no passages: the query-only condition),
// retrains, and reports held-out per-token NLL plus grounding metrics.
json sweep_passages(const RunConfig& cfg, const std::vector<int>& ks, const std::string& out_dir);

// BM25 vs random retrieval under an otherwise identical protocol.
json sweep_retrieval(const RunConfig& cfg, const std::string& out_dir);

// Spearman rank correlation (average ranks on ties).
double spearman_rho(const std::vector<double>& xs, const std::vector<double>& ys);

}  // namespace rac::pipeline
