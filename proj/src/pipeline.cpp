#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <set>
#include <stdexcept>

#include "rac/hash.hpp"
#include "rac/pipeline.hpp"
#include "rac/rng.hpp"

namespace rac::pipeline {

namespace fs = std::filesystem;

namespace {

void shuffle(std::vector<std::string>& v, Rng& rng) {
    for (size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

std::vector<int> strip_trailing_eos(std::vector<int> tokens) {
    if (!tokens.empty() && tokens.back() == text::Vocab::kEos) tokens.pop_back();
    return tokens;
}

std::vector<std::string> query_ids_of(const std::vector<T1Record>& records) {
    std::vector<std::string> ids;
    ids.reserve(records.size());
    for (const T1Record& r : records) ids.push_back(r.query_id);
    return ids;
}

// "half" trains SFT on one train half and mines negatives from the other;
// "all" reuses the full train set on both sides.
void assign_halves(const RunConfig& cfg, const std::vector<T1Record>& all,
                   const SplitResult& split, std::vector<T1Record>& sft_records,
                   std::vector<T1Record>& pref_records) {
    if (cfg.sft_data == "all") {
        std::set<std::string> val_ids;
        for (const T1Record& r : split.val) val_ids.insert(r.query_id);
        std::vector<T1Record> merged;
        for (const T1Record& r : all)
            if (!val_ids.count(r.query_id)) merged.push_back(r);
        sft_records = merged;
        pref_records = std::move(merged);
    } else {
        sft_records = split.train_a;
        pref_records = split.train_b;
    }
}

// Everything up to (but not including) model training, derived from the run
// seed with the same stage tags run_end_to_end uses, so sweeps see the exact
// corpus and splits a plain run would.
struct DataPrefix {
    CorpusBundle bundle;
    PassageStore store;
    retrieval::InvertedIndex index;
    text::Vocab vocab;
    AdaptResult adapted;
    SplitResult split;
    std::vector<T1Record> sft_records, pref_records;
};

DataPrefix build_data(const RunConfig& cfg) {
    DataPrefix d;
    d.bundle = make_synthetic_corpus(cfg.corpus_spec());
    d.store = PassageStore::from_documents(d.bundle.documents, cfg.chunk_size);
    d.index = retrieval::InvertedIndex::build(d.store.all());
    d.vocab = build_vocab(d.bundle, cfg.chunk_size);
    d.adapted = adapt_dataset(d.bundle.gold, d.index, cfg.k,
                              retrieval::parse_strategy(cfg.retrieval_strategy),
                              cfg.bm25_params(), derive_seed(cfg.seed, "adapt"));
    d.split = split_dataset(d.adapted.records, cfg.val_fraction, derive_seed(cfg.seed, "split"));
    assign_halves(cfg, d.adapted.records, d.split, d.sft_records, d.pref_records);
    return d;
}

lm::LMParams init_base(const RunConfig& cfg, const DataPrefix& d,
                       train::TrainLog* pretrain_log = nullptr) {
    return pretrained_base(cfg, d.store, d.vocab, pretrain_log);
}

lm::LMParams fit_sft(const RunConfig& cfg, const lm::LMParams& base,
                     const std::vector<train::ClarificationTuple>& tuples, lm::ModelRole role,
                     const char* seed_tag, train::TrainLog* log_out = nullptr) {
    lm::LMParams model = base;
    train::TrainConfig tc = cfg.sft_train_config();
    tc.seed = derive_seed(cfg.seed, seed_tag);
    train::TrainLog log = train::train_sft(model, tuples, role, tc);
    if (log_out) *log_out = std::move(log);
    return model;
}

// Held-out evaluation inputs: one record per unique val topic, retrieved from
// the raw query (no gold question is available at eval time), with the first
// gold clarification of the topic as reference. Candidates are filled in per
// model so both sides of a comparison see identical contexts.
struct EvalPrep {
    std::vector<eval::EvalRecord> records;
    std::vector<std::vector<int>> contexts;
};

EvalPrep prepare_eval(const std::vector<T1Record>& val, const retrieval::InvertedIndex& index,
                      const PassageStore& store, const text::Vocab& vocab, const RunConfig& cfg,
                      uint64_t seed) {
    EvalPrep prep;
    retrieval::Strategy strategy = retrieval::parse_strategy(cfg.retrieval_strategy);
    std::set<std::string> seen;
    size_t idx = 0;
    for (const T1Record& rec : val) {
        if (!seen.insert(rec.topic_id).second) continue;
        retrieval::RetrievalConfig rcfg{cfg.k, strategy, derive_seed(seed, idx++)};
        std::vector<std::string> pids;
        if (strategy == retrieval::Strategy::bm25) {
            for (const retrieval::ScoredPassage& sp :
                 index.retrieve_topk(rec.query, rcfg, cfg.bm25_params()))
                pids.push_back(sp.passage_id);
        } else {
            pids = index.random_retrieve(rcfg);
        }
        pids = store.corpus_order(pids);
        eval::EvalRecord er;
        er.record_id = rec.topic_id;
        er.query = rec.query;
        for (const std::string& pid : pids) er.passages.push_back(store.get(pid).tokens);
        er.reference = rec.target;
        er.has_reference = true;
        prep.contexts.push_back(lm::encode_context(vocab.ids(rec.query), store.resolve(pids, vocab),
                                                   lm::ModelRole::grounded));
        prep.records.push_back(std::move(er));
    }
    return prep;
}

std::vector<eval::EvalRecord> decode_candidates(const lm::LMParams& model, const EvalPrep& prep,
                                                const RunConfig& cfg, const text::Vocab& vocab) {
    std::vector<eval::EvalRecord> out = prep.records;
    decode::SampleConfig greedy = cfg.sample_config(0);  // argmax consumes no randomness
    greedy.top_k = 1;
    for (size_t i = 0; i < out.size(); ++i)
        out[i].candidate = vocab.surfaces(decode::generate(model, prep.contexts[i], greedy).tokens);
    return out;
}

// Mean per-token negative log-likelihood of the gold targets.
double heldout_nll(const lm::LMParams& model, const std::vector<train::ClarificationTuple>& tuples,
                   int context_len) {
    double lp = 0.0;
    size_t toks = 0;
    for (const train::ClarificationTuple& t : tuples) {
        lm::SequenceEncoding enc =
            lm::encode_sequence(t.query, t.passages, t.target, lm::ModelRole::grounded, context_len);
        lp += lm::masked_log_prob(model, enc, 0.0, nullptr);
        for (uint8_t m : enc.loss_mask) toks += m;
    }
    if (toks == 0) throw std::runtime_error("no target tokens to score");
    return -lp / double(toks);
}

void write_json_file(const std::string& path, const json& j) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << j.dump(2) << "\n";
}

// Numeric cells go through the json encoder so reruns are byte-stable.
void write_csv(const std::string& path, const std::string& header,
               const std::vector<std::vector<double>>& rows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << header << "\n";
    for (const std::vector<double>& row : rows) {
        for (size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << json(row[i]).dump();
        out << "\n";
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// run configuration

RunConfig RunConfig::from_json(const json& j) {
    if (!j.is_object()) throw std::invalid_argument("config must be a json object");
    RunConfig cfg;
    for (const auto& [key, value] : j.items()) {
        if (key == "seed") cfg.seed = value.get<uint64_t>();
        else if (key == "num_topics") cfg.num_topics = value.get<int>();
        else if (key == "facets_per_topic") cfg.facets_per_topic = value.get<int>();
        else if (key == "docs_per_facet") cfg.docs_per_facet = value.get<int>();
        else if (key == "chunk_size") cfg.chunk_size = value.get<int>();
        else if (key == "k") cfg.k = value.get<int>();
        else if (key == "k1") cfg.k1 = value.get<double>();
        else if (key == "b") cfg.b = value.get<double>();
        else if (key == "retrieval_strategy") cfg.retrieval_strategy = value.get<std::string>();
        else if (key == "d_model") cfg.d_model = value.get<int>();
        else if (key == "n_layers") cfg.n_layers = value.get<int>();
        else if (key == "n_heads") cfg.n_heads = value.get<int>();
        else if (key == "context_len") cfg.context_len = value.get<int>();
        else if (key == "lr_sft") cfg.lr_sft = value.get<double>();
        else if (key == "lr_dpo") cfg.lr_dpo = value.get<double>();
        else if (key == "schedule") cfg.schedule = value.get<std::string>();
        else if (key == "epochs") cfg.epochs = value.get<int>();
        else if (key == "dpo_epochs") cfg.dpo_epochs = value.get<int>();
        else if (key == "batch_size") cfg.batch_size = value.get<int>();
        else if (key == "beta") cfg.beta = value.get<double>();
        else if (key == "gamma") cfg.gamma = value.get<double>();
        else if (key == "alpha") cfg.alpha = value.get<double>();
        else if (key == "temperature") cfg.temperature = value.get<double>();
        else if (key == "top_k") cfg.top_k = value.get<int>();
        else if (key == "max_len") cfg.max_len = value.get<int>();
        else if (key == "negative_source") cfg.negative_source = value.get<std::string>();
        else if (key == "negatives_per_tuple") cfg.negatives_per_tuple = value.get<int>();
        else if (key == "gold_positive") cfg.gold_positive = value.get<bool>();
        else if (key == "val_fraction") cfg.val_fraction = value.get<double>();
        else if (key == "sft_data") cfg.sft_data = value.get<std::string>();
        else if (key == "pretrain_epochs") cfg.pretrain_epochs = value.get<int>();
        else throw std::invalid_argument("unknown config key: " + key);
    }
    cfg.validate();
    return cfg;
}

json RunConfig::to_json() const {
    return json{{"seed", seed},
                {"num_topics", num_topics},
                {"facets_per_topic", facets_per_topic},
                {"docs_per_facet", docs_per_facet},
                {"chunk_size", chunk_size},
                {"k", k},
                {"k1", k1},
                {"b", b},
                {"retrieval_strategy", retrieval_strategy},
                {"d_model", d_model},
                {"n_layers", n_layers},
                {"n_heads", n_heads},
                {"context_len", context_len},
                {"lr_sft", lr_sft},
                {"lr_dpo", lr_dpo},
                {"schedule", schedule},
                {"epochs", epochs},
                {"dpo_epochs", dpo_epochs},
                {"batch_size", batch_size},
                {"beta", beta},
                {"gamma", gamma},
                {"alpha", alpha},
                {"temperature", temperature},
                {"top_k", top_k},
                {"max_len", max_len},
                {"negative_source", negative_source},
                {"negatives_per_tuple", negatives_per_tuple},
                {"gold_positive", gold_positive},
                {"val_fraction", val_fraction},
                {"sft_data", sft_data},
                {"pretrain_epochs", pretrain_epochs}};
}

RunConfig RunConfig::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    json j;
    in >> j;
    return from_json(j);
}

void RunConfig::validate() const {
    auto require = [](bool ok, const char* what) {
        if (!ok) throw std::invalid_argument(std::string("config: ") + what);
    };
    require(num_topics > 0, "num_topics must be positive");
    require(facets_per_topic >= 2, "facets_per_topic must be at least 2");
    require(docs_per_facet > 0, "docs_per_facet must be positive");
    require(chunk_size > 0, "chunk_size must be positive");
    require(k >= 1, "k must be at least 1");
    require(k1 >= 0.0, "k1 must be non-negative");
    require(b >= 0.0 && b <= 1.0, "b must lie in [0, 1]");
    retrieval::parse_strategy(retrieval_strategy);  // throws on unknown names
    require(d_model > 0 && n_layers > 0 && n_heads > 0, "model dimensions must be positive");
    require(d_model % n_heads == 0, "d_model must be divisible by n_heads");
    require(context_len > 0, "context_len must be positive");
    require(lr_sft > 0.0 && lr_dpo > 0.0, "learning rates must be positive");
    require(schedule == "linear" || schedule == "constant", "unknown schedule");
    require(epochs > 0, "epochs must be positive");
    require(dpo_epochs > 0, "dpo_epochs must be positive");
    require(batch_size > 0, "batch_size must be positive");
    require(beta > 0.0, "beta must be positive");
    require(gamma >= 0.0 && gamma <= 1.0, "gamma must lie in [0, 1]");
    require(alpha >= 0.0 && alpha <= 1.0, "alpha must lie in [0, 1]");
    require(temperature > 0.0, "temperature must be positive");
    require(max_len >= 2, "max_len must allow at least one token plus <eos>");
    require(negative_source == "uncond" || negative_source == "base_lm",
            "negative_source must be 'uncond' or 'base_lm'");
    require(negatives_per_tuple >= 1, "negatives_per_tuple must be positive");
    require(val_fraction > 0.0 && val_fraction < 1.0, "val_fraction must lie in (0, 1)");
    require(sft_data == "half" || sft_data == "all", "sft_data must be 'half' or 'all'");
    require(pretrain_epochs >= 0, "pretrain_epochs must be non-negative");
}

std::string RunConfig::config_hash() const { return to_hex(fnv1a64(to_json().dump())); }

SyntheticCorpusSpec RunConfig::corpus_spec() const {
    return {num_topics, facets_per_topic, docs_per_facet, derive_seed(seed, "corpus")};
}

retrieval::BM25Params RunConfig::bm25_params() const { return {k1, b}; }

lm::LMConfig RunConfig::lm_config(int vocab_size) const {
    lm::LMConfig cfg;
    cfg.vocab_size = vocab_size;
    cfg.d_model = d_model;
    cfg.n_layers = n_layers;
    cfg.n_heads = n_heads;
    cfg.context_len = context_len;
    cfg.seed = derive_seed(seed, "model_init");
    return cfg;
}

train::TrainConfig RunConfig::sft_train_config() const {
    return {lr_sft, schedule, epochs, batch_size, beta, gamma, derive_seed(seed, "train_sft")};
}

train::TrainConfig RunConfig::dpo_train_config() const {
    return {lr_dpo, schedule, dpo_epochs, batch_size, beta, gamma, derive_seed(seed, "train_dpo")};
}

decode::SampleConfig RunConfig::sample_config(uint64_t sample_seed) const {
    return {temperature, top_k, max_len, sample_seed};
}

decode::MixtureConfig RunConfig::mixture_config(uint64_t sample_seed) const {
    return {alpha, sample_config(sample_seed)};
}

// ---------------------------------------------------------------------------
// passages and vocabulary

void PassageStore::add(text::Passage passage) {
    auto [it, fresh] = index_.try_emplace(passage.passage_id, passages_.size());
    if (!fresh) throw std::invalid_argument("duplicate passage id: " + passage.passage_id);
    passages_.push_back(std::move(passage));
}

const text::Passage& PassageStore::get(const std::string& passage_id) const {
    auto it = index_.find(passage_id);
    if (it == index_.end()) throw std::out_of_range("unknown passage id: " + passage_id);
    return passages_[it->second];
}

std::vector<std::vector<int>> PassageStore::resolve(const std::vector<std::string>& ids,
                                                    const text::Vocab& vocab) const {
    std::vector<std::vector<int>> out;
    out.reserve(ids.size());
    for (const std::string& id : ids) out.push_back(vocab.ids(get(id).tokens));
    return out;
}

std::vector<std::string> PassageStore::corpus_order(std::vector<std::string> ids) const {
    std::vector<size_t> position(ids.size());
    for (size_t i = 0; i < ids.size(); ++i) {
        auto it = index_.find(ids[i]);
        if (it == index_.end()) throw std::out_of_range("unknown passage id: " + ids[i]);
        position[i] = it->second;
    }
    std::vector<size_t> order(ids.size());
    std::iota(order.begin(), order.end(), size_t(0));
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return position[a] < position[b]; });
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (size_t i : order) out.push_back(std::move(ids[i]));
    return out;
}

PassageStore PassageStore::from_documents(const std::vector<Document>& docs, int chunk_size) {
    if (chunk_size <= 0) throw std::invalid_argument("chunk_size must be positive");
    PassageStore store;
    for (const Document& doc : docs)
        for (text::Passage& p :
             text::chunk_passages(doc.doc_id, text::tokenize(doc.text), size_t(chunk_size)))
            store.add(std::move(p));
    return store;
}

void PassageStore::save(const std::string& path, const std::string& config_hash,
                        uint64_t seed) const {
    JsonlWriter w(path);
    w.write(make_header(config_hash, seed));
    for (const text::Passage& p : passages_)
        w.write(json{{"doc_id", p.doc_id}, {"passage_id", p.passage_id}, {"text", p.text}});
}

PassageStore PassageStore::load(const std::string& path) {
    PassageStore store;
    for (const json& j : read_jsonl_records(path)) {
        text::Passage p;
        p.doc_id = j.at("doc_id").get<std::string>();
        p.passage_id = j.at("passage_id").get<std::string>();
        p.text = j.at("text").get<std::string>();
        p.tokens = text::tokenize(p.text);
        store.add(std::move(p));
    }
    return store;
}

text::Vocab build_vocab(const CorpusBundle& bundle, int chunk_size) {
    std::vector<text::TokenSeq> streams;
    PassageStore store = PassageStore::from_documents(bundle.documents, chunk_size);
    for (const text::Passage& p : store.all()) streams.push_back(p.tokens);
    for (const GoldRecord& g : bundle.gold) {
        streams.push_back(text::tokenize(g.query));
        streams.push_back(text::tokenize(g.question));
    }
    return text::Vocab::build(streams);
}

// ---------------------------------------------------------------------------
// dataset adaptation

AdaptResult adapt_dataset(const std::vector<GoldRecord>& gold,
                          const retrieval::InvertedIndex& index, int k,
                          retrieval::Strategy strategy, const retrieval::BM25Params& params,
                          uint64_t seed) {
    const text::StopwordSet& stopwords = text::default_stopwords();
    AdaptResult out;
    for (size_t i = 0; i < gold.size(); ++i) {
        const GoldRecord& g = gold[i];
        T1Record rec;
        rec.query_id = g.query_id;
        rec.topic_id = g.topic_id;
        rec.query = text::tokenize(g.query);
        rec.target = text::tokenize(g.question);
        rec.query_rewritten = retrieval::rewrite_query(rec.query, rec.target, stopwords);
        retrieval::RetrievalConfig rcfg{k, strategy, derive_seed(seed, uint64_t(i))};
        if (strategy == retrieval::Strategy::bm25) {
            for (const retrieval::ScoredPassage& sp :
                 index.retrieve_topk(rec.query_rewritten, rcfg, params))
                rec.passage_ids.push_back(sp.passage_id);
        } else {
            rec.passage_ids = index.random_retrieve(rcfg);
        }
        if (k > 0 && rec.passage_ids.empty()) {
            ++out.dropped;
            continue;
        }
        out.records.push_back(std::move(rec));
    }
    return out;
}

SplitResult split_dataset(const std::vector<T1Record>& records, double val_fraction,
                          uint64_t seed) {
    if (!(val_fraction > 0.0 && val_fraction < 1.0))
        throw std::invalid_argument("val_fraction must lie in (0, 1)");
    std::vector<std::string> topics;
    std::set<std::string> seen;
    for (const T1Record& r : records)
        if (seen.insert(r.topic_id).second) topics.push_back(r.topic_id);
    if (topics.size() < 3)
        throw std::invalid_argument("split needs at least 3 topics, got " +
                                    std::to_string(topics.size()));

    Rng rng(seed);
    shuffle(topics, rng);
    size_t n = topics.size();
    auto n_val = size_t(std::llround(val_fraction * double(n)));
    n_val = std::clamp<size_t>(n_val, 1, n - 2);
    size_t n_a = (n - n_val + 1) / 2;

    std::map<std::string, int> bucket;  // 0 = train A, 1 = train B, 2 = val
    for (size_t i = 0; i < n; ++i)
        bucket[topics[i]] = i < n_val ? 2 : (i - n_val < n_a ? 0 : 1);

    SplitResult out;
    for (const T1Record& r : records) {
        switch (bucket[r.topic_id]) {
            case 0: out.train_a.push_back(r); break;
            case 1: out.train_b.push_back(r); break;
            default: out.val.push_back(r); break;
        }
    }
    return out;
}

void save_t1(const std::vector<T1Record>& records, size_t dropped, const std::string& path,
             const std::string& config_hash, uint64_t seed) {
    JsonlWriter w(path);
    w.write(make_header(config_hash, seed));
    for (const T1Record& r : records)
        w.write(json{{"query_id", r.query_id},
                     {"topic_id", r.topic_id},
                     {"query", r.query},
                     {"query_rewritten", r.query_rewritten},
                     {"passage_ids", r.passage_ids},
                     {"target", r.target}});
    w.write(json{{"type", "summary"}, {"records", records.size()}, {"dropped", dropped}});
}

std::pair<std::vector<T1Record>, size_t> load_t1(const std::string& path) {
    std::vector<T1Record> records;
    size_t dropped = 0;
    for (const json& j : read_jsonl_records(path)) {
        if (j.value("type", "") == "summary") {
            dropped = j.at("dropped").get<size_t>();
            continue;
        }
        T1Record r;
        r.query_id = j.at("query_id").get<std::string>();
        r.topic_id = j.at("topic_id").get<std::string>();
        r.query = j.at("query").get<text::TokenSeq>();
        r.query_rewritten = j.at("query_rewritten").get<text::TokenSeq>();
        r.passage_ids = j.at("passage_ids").get<std::vector<std::string>>();
        r.target = j.at("target").get<text::TokenSeq>();
        records.push_back(std::move(r));
    }
    return {std::move(records), dropped};
}

train::ClarificationTuple to_training_tuple(const T1Record& rec, const PassageStore& store,
                                            const text::Vocab& vocab) {
    train::ClarificationTuple t;
    t.query_id = rec.query_id;
    t.query = vocab.ids(rec.query);
    t.passages = store.resolve(store.corpus_order(rec.passage_ids), vocab);
    t.target = vocab.ids(rec.target);
    return t;
}

std::vector<train::ClarificationTuple> to_training_tuples(const std::vector<T1Record>& recs,
                                                          const PassageStore& store,
                                                          const text::Vocab& vocab) {
    std::vector<train::ClarificationTuple> out;
    out.reserve(recs.size());
    for (const T1Record& r : recs) out.push_back(to_training_tuple(r, store, vocab));
    return out;
}

lm::LMParams pretrained_base(const RunConfig& cfg, const PassageStore& store,
                             const text::Vocab& vocab, train::TrainLog* pretrain_log) {
    lm::LMParams base = lm::LMParams::init(cfg.lm_config(int(vocab.size())));
    if (cfg.pretrain_epochs > 0) {
        std::vector<std::vector<int>> seqs;
        for (const text::Passage& p : store.all()) seqs.push_back(vocab.ids(p.tokens));
        train::TrainConfig tc = cfg.sft_train_config();
        tc.epochs = cfg.pretrain_epochs;
        tc.seed = derive_seed(cfg.seed, "pretrain");
        train::TrainLog log = train::pretrain_next_token(base, seqs, tc);
        if (pretrain_log) *pretrain_log = std::move(log);
    }
    return base;
}

// ---------------------------------------------------------------------------
// preference data

BuildT2Result build_t2(const std::vector<T1Record>& tuples, const lm::LMParams& grounded,
                       const lm::LMParams& negative_model, lm::ModelRole negative_role,
                       const PassageStore& store, const text::Vocab& vocab, const RunConfig& cfg,
                       uint64_t stage_seed) {
    if (tuples.empty()) throw std::invalid_argument("build_t2: no tuples");
    BuildT2Result out;
    for (size_t i = 0; i < tuples.size(); ++i) {
        const T1Record& rec = tuples[i];
        uint64_t rec_seed = derive_seed(stage_seed, uint64_t(i));
        std::vector<int> query = vocab.ids(rec.query);
        std::vector<std::vector<int>> passages =
            store.resolve(store.corpus_order(rec.passage_ids), vocab);
        std::vector<int> grounded_ctx = lm::encode_context(query, passages, lm::ModelRole::grounded);
        std::vector<int> negative_ctx = lm::encode_context(query, passages, negative_role);

        std::vector<int> chosen;
        if (cfg.gold_positive) {
            chosen = vocab.ids(rec.target);
        } else {
            decode::SampleConfig greedy = cfg.sample_config(derive_seed(rec_seed, "chosen"));
            greedy.top_k = 1;
            chosen = strip_trailing_eos(decode::generate(grounded, grounded_ctx, greedy).tokens);
        }

        for (int neg = 0; neg < cfg.negatives_per_tuple; ++neg) {
            uint64_t neg_seed = derive_seed(rec_seed, uint64_t(neg));
            auto decode_negative = [&](uint64_t s) {
                decode::NoisyResult r = decode::noisy_generate(grounded, negative_model,
                                                               grounded_ctx, negative_ctx,
                                                               cfg.mixture_config(s));
                if (!r.tokens.empty() && r.tokens.back() == text::Vocab::kEos) {
                    r.tokens.pop_back();
                    r.gates.pop_back();
                }
                return r;
            };
            decode::NoisyResult noisy = decode_negative(neg_seed);
            if (noisy.tokens == chosen) {
                noisy = decode_negative(derive_seed(neg_seed, "fresh"));
                ++out.regenerated;
            }
            if (noisy.tokens == chosen) {
                ++out.dropped;
                continue;
            }
            T2Record t2;
            t2.record_id = rec.query_id + "~" + std::to_string(neg);
            t2.query_id = rec.query_id;
            t2.alpha = cfg.alpha;
            t2.seed = noisy.seed_used;
            t2.retried = noisy.retried;
            t2.chosen = chosen;
            t2.rejected = std::move(noisy.tokens);
            t2.gates = std::move(noisy.gates);
            out.records.push_back(std::move(t2));
        }
    }
    return out;
}

void save_t2(const BuildT2Result& result, const text::Vocab& vocab, const std::string& path,
             const std::string& config_hash, uint64_t seed) {
    JsonlWriter w(path);
    w.write(make_header(config_hash, seed));
    for (const T2Record& r : result.records)
        w.write(json{{"record_id", r.record_id},
                     {"query_id", r.query_id},
                     {"alpha", r.alpha},
                     {"seed", r.seed},
                     {"chosen", r.chosen},
                     {"chosen_text", vocab.to_text(r.chosen)},
                     {"rejected", r.rejected},
                     {"rejected_text", vocab.to_text(r.rejected)},
                     {"gates", r.gates},
                     {"retried", r.retried}});
    w.write(json{{"type", "summary"},
                 {"records", result.records.size()},
                 {"dropped", result.dropped},
                 {"regenerated", result.regenerated}});
}

std::vector<T2Record> load_t2(const std::string& path) {
    std::vector<T2Record> records;
    for (const json& j : read_jsonl_records(path)) {
        if (j.value("type", "") == "summary") continue;
        T2Record r;
        r.record_id = j.at("record_id").get<std::string>();
        r.query_id = j.at("query_id").get<std::string>();
        r.alpha = j.at("alpha").get<double>();
        r.seed = j.at("seed").get<uint64_t>();
        r.chosen = j.at("chosen").get<std::vector<int>>();
        r.rejected = j.at("rejected").get<std::vector<int>>();
        r.gates = j.at("gates").get<std::vector<uint8_t>>();
        r.retried = j.at("retried").get<bool>();
        records.push_back(std::move(r));
    }
    return records;
}

std::vector<train::PreferencePair> to_preference_pairs(const std::vector<T2Record>& records,
                                                       const std::vector<T1Record>& tuples,
                                                       const PassageStore& store,
                                                       const text::Vocab& vocab) {
    std::map<std::string, const T1Record*> by_id;
    for (const T1Record& t : tuples) by_id[t.query_id] = &t;
    std::vector<train::PreferencePair> out;
    out.reserve(records.size());
    for (const T2Record& r : records) {
        auto it = by_id.find(r.query_id);
        if (it == by_id.end())
            throw std::invalid_argument("preference record references unknown tuple: " +
                                        r.query_id);
        train::PreferencePair p;
        p.record_id = r.record_id;
        p.query = vocab.ids(it->second->query);
        p.passages = store.resolve(store.corpus_order(it->second->passage_ids), vocab);
        p.chosen = r.chosen;
        p.rejected = r.rejected;
        out.push_back(std::move(p));
    }
    return out;
}

// ---------------------------------------------------------------------------
// orchestration

void write_train_log(const train::TrainLog& log, const std::string& path,
                     const std::string& config_hash, uint64_t seed) {
    JsonlWriter w(path);
    w.write(make_header(config_hash, seed));
    for (const train::TrainLogEntry& e : log) {
        json j{{"step", e.step}, {"epoch", e.epoch}, {"loss", e.loss}, {"lr", e.lr}};
        if (e.has_pref) j["pref_acc"] = e.pref_acc;
        w.write(j);
    }
}

json run_end_to_end(const RunConfig& cfg, const std::string& out_dir) {
    cfg.validate();
    fs::create_directories(out_dir);
    const std::string hash = cfg.config_hash();
    auto path = [&](const char* name) { return (fs::path(out_dir) / name).string(); };

    json timings = json::object();
    auto stage = [&](const char* name, auto&& body) {
        auto t0 = std::chrono::steady_clock::now();
        try {
            body();
        } catch (const std::exception& e) {
            throw std::runtime_error(std::string("stage ") + name + ": " + e.what());
        }
        double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        timings[name] = secs;
        std::cerr << "[rac] " << name << ": " << secs << "s\n";
    };

    DataPrefix d;
    lm::LMParams base, sft, uncond, policy;
    std::vector<train::ClarificationTuple> sft_tuples;
    BuildT2Result t2;
    size_t eval_records = 0;
    json report;

    stage("corpus", [&] {
        d.bundle = make_synthetic_corpus(cfg.corpus_spec());
        save_corpus(d.bundle, path("corpus.jsonl"), path("gold.jsonl"), hash, cfg.seed);
    });
    stage("index", [&] {
        d.store = PassageStore::from_documents(d.bundle.documents, cfg.chunk_size);
        d.index = retrieval::InvertedIndex::build(d.store.all());
        d.index.save(path("index.bin"));
        d.store.save(path("passages.jsonl"), hash, cfg.seed);
    });
    stage("vocab", [&] {
        d.vocab = build_vocab(d.bundle, cfg.chunk_size);
        d.vocab.save(path("vocab.txt"));
    });
    stage("adapt", [&] {
        d.adapted = adapt_dataset(d.bundle.gold, d.index, cfg.k,
                                  retrieval::parse_strategy(cfg.retrieval_strategy),
                                  cfg.bm25_params(), derive_seed(cfg.seed, "adapt"));
        save_t1(d.adapted.records, d.adapted.dropped, path("t1.jsonl"), hash, cfg.seed);
    });
    stage("split", [&] {
        d.split = split_dataset(d.adapted.records, cfg.val_fraction, derive_seed(cfg.seed, "split"));
        assign_halves(cfg, d.adapted.records, d.split, d.sft_records, d.pref_records);
        write_json_file(path("splits.json"), json{{"config_hash", hash},
                                                  {"seed", cfg.seed},
                                                  {"train_a", query_ids_of(d.split.train_a)},
                                                  {"train_b", query_ids_of(d.split.train_b)},
                                                  {"val", query_ids_of(d.split.val)}});
    });
    stage("model_init", [&] {
        train::TrainLog pretrain_log;
        base = init_base(cfg, d, &pretrain_log);
        if (!pretrain_log.empty())
            write_train_log(pretrain_log, path("pretrain_log.jsonl"), hash, cfg.seed);
        base.save(path("base_lm.bin"));
    });
    stage("train_sft", [&] {
        sft_tuples = to_training_tuples(d.sft_records, d.store, d.vocab);
        if (sft_tuples.empty()) throw std::runtime_error("no supervised tuples after the split");
        train::TrainLog log;
        sft = fit_sft(cfg, base, sft_tuples, lm::ModelRole::grounded, "train_sft", &log);
        write_train_log(log, path("sft_log.jsonl"), hash, cfg.seed);
        sft.save(path("sft.bin"));
    });
    stage("train_uncond", [&] {
        train::TrainLog log;
        uncond = fit_sft(cfg, base, sft_tuples, lm::ModelRole::ungrounded, "train_uncond", &log);
        write_train_log(log, path("uncond_log.jsonl"), hash, cfg.seed);
        uncond.save(path("uncond.bin"));
    });
    stage("negatives", [&] {
        bool from_uncond = cfg.negative_source == "uncond";
        t2 = build_t2(d.pref_records, sft, from_uncond ? uncond : base,
                      from_uncond ? lm::ModelRole::ungrounded : lm::ModelRole::base_lm, d.store,
                      d.vocab, cfg, derive_seed(cfg.seed, "negatives"));
        save_t2(t2, d.vocab, path("negatives.jsonl"), hash, cfg.seed);
    });
    stage("train_dpo", [&] {
        std::vector<train::PreferencePair> pairs =
            to_preference_pairs(t2.records, d.pref_records, d.store, d.vocab);
        if (pairs.empty()) throw std::runtime_error("no preference pairs survived");
        policy = sft;
        train::TrainLog log =
            train::train_dpo(policy, sft, pairs, sft_tuples, lm::ModelRole::grounded,
                             cfg.dpo_train_config());
        write_train_log(log, path("dpo_log.jsonl"), hash, cfg.seed);
        policy.save(path("dpo.bin"));
    });
    stage("eval", [&] {
        EvalPrep prep = prepare_eval(d.split.val, d.index, d.store, d.vocab, cfg,
                                     derive_seed(cfg.seed, "eval_retrieval"));
        eval_records = prep.records.size();
        eval::LexicalEntailmentScorer scorer;
        {
            JsonlWriter detail(path("eval_sft.jsonl"));
            detail.write(make_header(hash, cfg.seed));
            report["sft"] = eval::report_to_json(
                eval::evaluate_run(decode_candidates(sft, prep, cfg, d.vocab), scorer, &detail));
        }
        {
            JsonlWriter detail(path("eval_dpo.jsonl"));
            detail.write(make_header(hash, cfg.seed));
            report["dpo"] = eval::report_to_json(
                eval::evaluate_run(decode_candidates(policy, prep, cfg, d.vocab), scorer, &detail));
        }
    });

    report["config"] = cfg.to_json();
    report["config_hash"] = hash;
    report["seed"] = cfg.seed;
    report["counts"] = json{{"documents", d.bundle.documents.size()},
                            {"gold", d.bundle.gold.size()},
                            {"passages", d.store.all().size()},
                            {"vocab", d.vocab.size()},
                            {"t1_records", d.adapted.records.size()},
                            {"t1_dropped", d.adapted.dropped},
                            {"train_a", d.split.train_a.size()},
                            {"train_b", d.split.train_b.size()},
                            {"val", d.split.val.size()},
                            {"t2_records", t2.records.size()},
                            {"t2_dropped", t2.dropped},
                            {"t2_regenerated", t2.regenerated},
                            {"eval_records", eval_records}};
    // report.json is a pure function of the config so reruns are bit-identical;
    // wall-clock timings land in a companion file.
    write_json_file(path("report.json"), report);
    write_json_file(path("timings.json"), timings);
    report["timings"] = timings;
    return report;
}

json sweep_alpha(const RunConfig& cfg, const std::vector<double>& alphas,
                 const std::string& out_dir) {
    cfg.validate();
    if (alphas.empty()) throw std::invalid_argument("sweep_alpha: no alphas");
    for (double a : alphas)
        if (!(a >= 0.0 && a <= 1.0)) throw std::invalid_argument("sweep_alpha: alpha outside [0, 1]");
    fs::create_directories(out_dir);

    DataPrefix d = build_data(cfg);
    lm::LMParams base = init_base(cfg, d);
    std::vector<train::ClarificationTuple> sft_tuples =
        to_training_tuples(d.sft_records, d.store, d.vocab);
    lm::LMParams sft = fit_sft(cfg, base, sft_tuples, lm::ModelRole::grounded, "train_sft");
    lm::LMParams uncond = fit_sft(cfg, base, sft_tuples, lm::ModelRole::ungrounded, "train_uncond");

    std::vector<T1Record> slice = d.pref_records;
    if (slice.size() > 200) slice.resize(200);
    if (slice.empty()) throw std::runtime_error("sweep_alpha: no records to decode");

    struct Item {
        std::string id;
        std::vector<int> grounded_ctx, uncond_ctx;
        std::vector<text::TokenSeq> passages;
        text::TokenSeq reference;
    };
    std::vector<Item> items;
    for (const T1Record& rec : slice) {
        Item it;
        it.id = rec.query_id;
        std::vector<int> query = d.vocab.ids(rec.query);
        std::vector<std::string> pids = d.store.corpus_order(rec.passage_ids);
        std::vector<std::vector<int>> passages = d.store.resolve(pids, d.vocab);
        it.grounded_ctx = lm::encode_context(query, passages, lm::ModelRole::grounded);
        it.uncond_ctx = lm::encode_context(query, passages, lm::ModelRole::ungrounded);
        for (const std::string& pid : pids) it.passages.push_back(d.store.get(pid).tokens);
        it.reference = rec.target;
        items.push_back(std::move(it));
    }

    const text::StopwordSet& stopwords = text::default_stopwords();
    uint64_t stage_seed = derive_seed(cfg.seed, "sweep_alpha");
    json arms = json::array();
    std::vector<double> mean_hall;
    std::vector<std::vector<double>> csv_rows;
    for (double alpha : alphas) {
        double hall_sum = 0.0, parent_sum = 0.0;
        json examples = json::array();
        for (size_t i = 0; i < items.size(); ++i) {
            decode::MixtureConfig mc;
            mc.alpha = alpha;
            mc.sample = cfg.sample_config(derive_seed(stage_seed, i));  // shared across alphas
            decode::NoisyResult noisy = decode::noisy_generate(sft, uncond, items[i].grounded_ctx,
                                                               items[i].uncond_ctx, mc);
            if (!noisy.tokens.empty() && noisy.tokens.back() == text::Vocab::kEos) {
                noisy.tokens.pop_back();
                noisy.gates.pop_back();
            }
            text::TokenSeq cand = d.vocab.surfaces(noisy.tokens);
            hall_sum += eval::hallucination_rate(cand, items[i].passages, stopwords);
            parent_sum +=
                eval::parent_recall(cand, items[i].passages, &items[i].reference, stopwords);
            if (examples.size() < 2) {
                std::string marked;  // tokens the query-only model produced, in brackets
                for (size_t t = 0; t < noisy.tokens.size(); ++t) {
                    if (t) marked += ' ';
                    if (noisy.gates[t]) marked += '[' + d.vocab.surface(noisy.tokens[t]) + ']';
                    else marked += d.vocab.surface(noisy.tokens[t]);
                }
                examples.push_back(json{{"record_id", items[i].id}, {"marked", marked}});
            }
        }
        double hall = hall_sum / double(items.size());
        double parent = parent_sum / double(items.size());
        mean_hall.push_back(hall);
        arms.push_back(json{{"alpha", alpha},
                            {"hallucination_rate", hall},
                            {"grounding_precision", 1.0 - hall},
                            {"parent_recall", parent},
                            {"examples", examples}});
        csv_rows.push_back({alpha, hall, 1.0 - hall, parent});
        std::cerr << "[rac] sweep_alpha alpha=" << alpha << " hallucination=" << hall << "\n";
    }

    json out{{"config_hash", cfg.config_hash()},
             {"seed", cfg.seed},
             {"num_records", items.size()},
             {"arms", arms},
             {"spearman_rho", spearman_rho(alphas, mean_hall)}};
    write_json_file((fs::path(out_dir) / "sweep_alpha.json").string(), out);
    write_csv((fs::path(out_dir) / "sweep_alpha.csv").string(),
              "alpha,hallucination_rate,grounding_precision,parent_recall", csv_rows);
    return out;
}

json sweep_passages(const RunConfig& cfg, const std::vector<int>& ks, const std::string& out_dir) {
    cfg.validate();
    if (ks.empty()) throw std::invalid_argument("sweep_passages: no ks");
    for (int k : ks)
        if (k < 0) throw std::invalid_argument("sweep_passages: k must be non-negative");
    int k_max = *std::max_element(ks.begin(), ks.end());
    if (k_max < 1) throw std::invalid_argument("sweep_passages: need at least one positive k");
    fs::create_directories(out_dir);

    // Adapt once at the largest k; each arm truncates the ranked lists, so
    // smaller k always sees a prefix of the same evidence.
    RunConfig base_cfg = cfg;
    base_cfg.k = k_max;
    DataPrefix d = build_data(base_cfg);
    lm::LMParams base = init_base(base_cfg, d);

    auto truncated = [&](std::vector<T1Record> recs, int k) {
        for (T1Record& r : recs)
            if (int(r.passage_ids.size()) > k) r.passage_ids.resize(size_t(k));
        return recs;
    };

    // Grounding is always judged against the full k_max evidence so arms
    // differ only in what the model saw, not in the yardstick.
    std::vector<std::vector<text::TokenSeq>> yardstick;
    for (const T1Record& rec : d.split.val) {
        std::vector<text::TokenSeq> passages;
        for (const std::string& pid : rec.passage_ids) passages.push_back(d.store.get(pid).tokens);
        yardstick.push_back(std::move(passages));
    }

    const text::StopwordSet& stopwords = text::default_stopwords();
    json arms = json::array();
    std::vector<std::vector<double>> csv_rows;
    for (int k : ks) {
        std::vector<train::ClarificationTuple> train_tuples =
            to_training_tuples(truncated(d.sft_records, k), d.store, d.vocab);
        lm::LMParams model =
            fit_sft(base_cfg, base, train_tuples, lm::ModelRole::grounded, "train_sft");

        std::vector<train::ClarificationTuple> val_tuples =
            to_training_tuples(truncated(d.split.val, k), d.store, d.vocab);
        double nll = heldout_nll(model, val_tuples, base_cfg.context_len);

        decode::SampleConfig greedy = base_cfg.sample_config(0);
        greedy.top_k = 1;
        double hall_sum = 0.0;
        for (size_t i = 0; i < val_tuples.size(); ++i) {
            std::vector<int> ctx = lm::encode_context(val_tuples[i].query, val_tuples[i].passages,
                                                      lm::ModelRole::grounded);
            text::TokenSeq cand = d.vocab.surfaces(decode::generate(model, ctx, greedy).tokens);
            hall_sum += eval::hallucination_rate(cand, yardstick[i], stopwords);
        }
        double grounding = 1.0 - hall_sum / double(val_tuples.size());
        arms.push_back(json{{"k", k}, {"nll", nll}, {"grounding_precision", grounding}});
        csv_rows.push_back({double(k), nll, grounding});
        std::cerr << "[rac] sweep_passages k=" << k << " nll=" << nll << "\n";
    }

    json out{{"config_hash", cfg.config_hash()}, {"seed", cfg.seed}, {"arms", arms}};
    write_json_file((fs::path(out_dir) / "sweep_passages.json").string(), out);
    write_csv((fs::path(out_dir) / "sweep_passages.csv").string(), "k,nll,grounding_precision",
              csv_rows);
    return out;
}

json sweep_retrieval(const RunConfig& cfg, const std::string& out_dir) {
    cfg.validate();
    fs::create_directories(out_dir);
    json arms = json::object();
    for (const char* strategy : {"bm25", "random"}) {
        RunConfig acfg = cfg;
        acfg.retrieval_strategy = strategy;
        DataPrefix d = build_data(acfg);
        lm::LMParams base = init_base(acfg, d);
        std::vector<train::ClarificationTuple> sft_tuples =
            to_training_tuples(d.sft_records, d.store, d.vocab);
        lm::LMParams sft = fit_sft(acfg, base, sft_tuples, lm::ModelRole::grounded, "train_sft");

        EvalPrep prep = prepare_eval(d.split.val, d.index, d.store, d.vocab, acfg,
                                     derive_seed(acfg.seed, "eval_retrieval"));
        eval::LexicalEntailmentScorer scorer;
        eval::MetricReport rep =
            eval::evaluate_run(decode_candidates(sft, prep, acfg, d.vocab), scorer);
        arms[strategy] = eval::report_to_json(rep);
        std::cerr << "[rac] sweep_retrieval " << strategy
                  << " grounding=" << rep.grounding_precision << "\n";
    }
    json out{{"config_hash", cfg.config_hash()}, {"seed", cfg.seed}, {"arms", arms}};
    write_json_file((fs::path(out_dir) / "sweep_retrieval.json").string(), out);
    return out;
}

double spearman_rho(const std::vector<double>& xs, const std::vector<double>& ys) {
    if (xs.size() != ys.size()) throw std::invalid_argument("spearman_rho: length mismatch");
    size_t n = xs.size();
    if (n < 2) throw std::invalid_argument("spearman_rho: need at least two points");

    auto ranks = [](const std::vector<double>& v) {
        std::vector<size_t> order(v.size());
        std::iota(order.begin(), order.end(), size_t(0));
        std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
        std::vector<double> r(v.size());
        size_t i = 0;
        while (i < order.size()) {
            size_t j = i;
            while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
            double avg = (double(i) + double(j)) / 2.0 + 1.0;  // ties share the mean rank
            for (size_t t = i; t <= j; ++t) r[order[t]] = avg;
            i = j + 1;
        }
        return r;
    };

    std::vector<double> rx = ranks(xs), ry = ranks(ys);
    double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / double(n);
    double my = std::accumulate(ry.begin(), ry.end(), 0.0) / double(n);
    double cov = 0.0, vx = 0.0, vy = 0.0;
    for (size_t i = 0; i < n; ++i) {
        cov += (rx[i] - mx) * (ry[i] - my);
        vx += (rx[i] - mx) * (rx[i] - mx);
        vy += (ry[i] - my) * (ry[i] - my);
    }
    if (vx == 0.0 || vy == 0.0) return 0.0;
    return cov / std::sqrt(vx * vy);
}

}  // namespace rac::pipeline
