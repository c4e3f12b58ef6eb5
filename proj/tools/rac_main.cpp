#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "rac/hash.hpp"
#include "rac/pipeline.hpp"

namespace fs = std::filesystem;
using rac::json;

namespace {

struct ConfigOpts {
    std::string path;
    std::vector<std::string> sets;
    std::optional<uint64_t> seed;
};

void add_config_opts(CLI::App* cmd, ConfigOpts& o) {
    cmd->add_option("--config", o.path, "run-config json file (defaults apply when omitted)");
    cmd->add_option("--set", o.sets, "override a config key, key=value (value parsed as json)");
    cmd->add_option("--seed", o.seed, "override the run seed");
}

json parse_value(const std::string& s) {
    json v = json::parse(s, nullptr, /*allow_exceptions=*/false);
    if (v.is_discarded()) return json(s);  // bare strings need no quotes
    return v;
}

rac::pipeline::RunConfig resolve_config(const ConfigOpts& o) {
    json j = json::object();
    if (!o.path.empty()) {
        std::ifstream in(o.path);
        if (!in) throw std::runtime_error("cannot open " + o.path);
        in >> j;
    }
    for (const std::string& kv : o.sets) {
        auto eq = kv.find('=');
        if (eq == std::string::npos || eq == 0)
            throw std::invalid_argument("--set expects key=value, got: " + kv);
        j[kv.substr(0, eq)] = parse_value(kv.substr(eq + 1));
    }
    if (o.seed) j["seed"] = *o.seed;
    return rac::pipeline::RunConfig::from_json(j);
}

// Stage commands share one artifact directory; explicit flags win over the
// conventional file names inside it.
std::string pick_path(const std::string& explicit_path, const std::string& dir, const char* name) {
    if (!explicit_path.empty()) return explicit_path;
    return (fs::path(dir) / name).string();
}

json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    json j;
    in >> j;
    return j;
}

void write_json_line(const json& j) { std::cout << j.dump() << "\n"; }

std::vector<rac::pipeline::T1Record> pick_records(const rac::pipeline::RunConfig& cfg,
                                                  const std::vector<rac::pipeline::T1Record>& t1,
                                                  const json& splits, bool preference_side) {
    std::set<std::string> want;
    auto add = [&](const char* key) {
        for (const json& id : splits.at(key)) want.insert(id.get<std::string>());
    };
    if (cfg.sft_data == "all") {
        add("train_a");
        add("train_b");
    } else {
        add(preference_side ? "train_b" : "train_a");
    }
    std::vector<rac::pipeline::T1Record> out;
    for (const rac::pipeline::T1Record& r : t1)
        if (want.count(r.query_id)) out.push_back(r);
    return out;
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    size_t start = 0;
    while (start <= s.size()) {
        size_t comma = s.find(',', start);
        if (comma == std::string::npos) {
            out.push_back(s.substr(start));
            break;
        }
        out.push_back(s.substr(start, comma - start));
        start = comma + 1;
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"retrieval-grounded clarification pipeline"};
    app.require_subcommand(1);

    // ---- make-corpus ------------------------------------------------------
    ConfigOpts corpus_cfg;
    std::string corpus_dir = "out";
    {
        auto* cmd = app.add_subcommand("make-corpus", "generate the synthetic corpus and gold set");
        add_config_opts(cmd, corpus_cfg);
        cmd->add_option("--dir", corpus_dir, "artifact directory");
        cmd->callback([&] {
            auto cfg = resolve_config(corpus_cfg);
            fs::create_directories(corpus_dir);
            auto bundle = rac::pipeline::make_synthetic_corpus(cfg.corpus_spec());
            rac::pipeline::save_corpus(bundle, pick_path("", corpus_dir, "corpus.jsonl"),
                                       pick_path("", corpus_dir, "gold.jsonl"), cfg.config_hash(),
                                       cfg.seed);
            write_json_line(json{{"documents", bundle.documents.size()},
                                 {"gold", bundle.gold.size()}});
        });
    }

    // ---- index ------------------------------------------------------------
    ConfigOpts index_cfg;
    std::string index_dir = "out", index_corpus, index_export;
    {
        auto* cmd = app.add_subcommand("index", "chunk documents and build the retrieval index");
        add_config_opts(cmd, index_cfg);
        cmd->add_option("--dir", index_dir, "artifact directory");
        cmd->add_option("--corpus", index_corpus, "corpus jsonl (default <dir>/corpus.jsonl)");
        cmd->add_option("--export-terms", index_export, "also dump the postings as jsonl");
        cmd->callback([&] {
            auto cfg = resolve_config(index_cfg);
            fs::create_directories(index_dir);
            std::vector<rac::pipeline::Document> docs;
            for (const json& j :
                 rac::read_jsonl_records(pick_path(index_corpus, index_dir, "corpus.jsonl"))) {
                docs.push_back({j.at("doc_id").get<std::string>(),
                                j.at("topic_id").get<std::string>(),
                                j.at("text").get<std::string>()});
            }
            auto store = rac::pipeline::PassageStore::from_documents(docs, cfg.chunk_size);
            auto index = rac::retrieval::InvertedIndex::build(store.all());
            index.save(pick_path("", index_dir, "index.bin"));
            store.save(pick_path("", index_dir, "passages.jsonl"), cfg.config_hash(), cfg.seed);
            if (!index_export.empty()) index.export_jsonl(index_export);
            write_json_line(json{{"passages", store.all().size()},
                                 {"avg_doc_len", index.avg_doc_len()}});
        });
    }

    // ---- adapt ------------------------------------------------------------
    ConfigOpts adapt_cfg;
    std::string adapt_dir = "out", adapt_corpus, adapt_gold, adapt_index;
    {
        auto* cmd = app.add_subcommand(
            "adapt", "rewrite queries, retrieve evidence, split, and build the vocabulary");
        add_config_opts(cmd, adapt_cfg);
        cmd->add_option("--dir", adapt_dir, "artifact directory");
        cmd->add_option("--corpus", adapt_corpus, "corpus jsonl");
        cmd->add_option("--gold", adapt_gold, "gold jsonl");
        cmd->add_option("--index", adapt_index, "retrieval index");
        cmd->callback([&] {
            auto cfg = resolve_config(adapt_cfg);
            fs::create_directories(adapt_dir);
            auto bundle =
                rac::pipeline::load_corpus(pick_path(adapt_corpus, adapt_dir, "corpus.jsonl"),
                                           pick_path(adapt_gold, adapt_dir, "gold.jsonl"));
            auto index =
                rac::retrieval::InvertedIndex::load(pick_path(adapt_index, adapt_dir, "index.bin"));
            auto adapted = rac::pipeline::adapt_dataset(
                bundle.gold, index, cfg.k, rac::retrieval::parse_strategy(cfg.retrieval_strategy),
                cfg.bm25_params(), rac::derive_seed(cfg.seed, "adapt"));
            rac::pipeline::save_t1(adapted.records, adapted.dropped,
                                   pick_path("", adapt_dir, "t1.jsonl"), cfg.config_hash(),
                                   cfg.seed);
            auto split = rac::pipeline::split_dataset(adapted.records, cfg.val_fraction,
                                                      rac::derive_seed(cfg.seed, "split"));
            auto ids = [](const std::vector<rac::pipeline::T1Record>& rs) {
                std::vector<std::string> v;
                for (const auto& r : rs) v.push_back(r.query_id);
                return v;
            };
            std::ofstream splits_out(pick_path("", adapt_dir, "splits.json"), std::ios::trunc);
            splits_out << json{{"config_hash", cfg.config_hash()},
                               {"seed", cfg.seed},
                               {"train_a", ids(split.train_a)},
                               {"train_b", ids(split.train_b)},
                               {"val", ids(split.val)}}
                              .dump(2)
                       << "\n";
            auto vocab = rac::pipeline::build_vocab(bundle, cfg.chunk_size);
            vocab.save(pick_path("", adapt_dir, "vocab.txt"));
            write_json_line(json{{"t1_records", adapted.records.size()},
                                 {"t1_dropped", adapted.dropped},
                                 {"train_a", split.train_a.size()},
                                 {"train_b", split.train_b.size()},
                                 {"val", split.val.size()},
                                 {"vocab", vocab.size()}});
        });
    }

    // ---- train-sft / train-uncond ------------------------------------------
    struct TrainSftArgs {
        ConfigOpts cfg;
        std::string dir = "out", init, out, log;
    };
    TrainSftArgs sft_args, uncond_args;
    auto run_train_sft = [](const TrainSftArgs& a, rac::lm::ModelRole role, const char* seed_tag,
                            const char* model_name, const char* log_name) {
        auto cfg = resolve_config(a.cfg);
        auto [t1, dropped] = rac::pipeline::load_t1(pick_path("", a.dir, "t1.jsonl"));
        (void)dropped;
        json splits = read_json_file(pick_path("", a.dir, "splits.json"));
        auto records = pick_records(cfg, t1, splits, /*preference_side=*/false);
        auto store = rac::pipeline::PassageStore::load(pick_path("", a.dir, "passages.jsonl"));
        auto vocab = rac::text::Vocab::load(pick_path("", a.dir, "vocab.txt"));
        auto tuples = rac::pipeline::to_training_tuples(records, store, vocab);
        rac::lm::LMParams model = a.init.empty()
                                      ? rac::pipeline::pretrained_base(cfg, store, vocab)
                                      : rac::lm::LMParams::load(a.init);
        rac::train::TrainConfig tc = cfg.sft_train_config();
        tc.seed = rac::derive_seed(cfg.seed, seed_tag);
        auto log = rac::train::train_sft(model, tuples, role, tc);
        model.save(pick_path(a.out, a.dir, model_name));
        rac::pipeline::write_train_log(log, pick_path(a.log, a.dir, log_name), cfg.config_hash(),
                                       cfg.seed);
        write_json_line(json{{"tuples", tuples.size()},
                             {"steps", log.size()},
                             {"final_loss", log.empty() ? 0.0 : log.back().loss}});
    };
    {
        auto* cmd = app.add_subcommand("train-sft", "fine-tune the grounded question model");
        add_config_opts(cmd, sft_args.cfg);
        cmd->add_option("--dir", sft_args.dir, "artifact directory");
        cmd->add_option("--init", sft_args.init, "starting checkpoint (default: fresh init)");
        cmd->add_option("--out", sft_args.out, "model output (default <dir>/sft.bin)");
        cmd->add_option("--log", sft_args.log, "train log output");
        cmd->callback([&] {
            run_train_sft(sft_args, rac::lm::ModelRole::grounded, "train_sft", "sft.bin",
                          "sft_log.jsonl");
        });
    }
    {
        auto* cmd = app.add_subcommand("train-uncond", "fine-tune the query-only question model");
        add_config_opts(cmd, uncond_args.cfg);
        cmd->add_option("--dir", uncond_args.dir, "artifact directory");
        cmd->add_option("--init", uncond_args.init, "starting checkpoint (default: fresh init)");
        cmd->add_option("--out", uncond_args.out, "model output (default <dir>/uncond.bin)");
        cmd->add_option("--log", uncond_args.log, "train log output");
        cmd->callback([&] {
            run_train_sft(uncond_args, rac::lm::ModelRole::ungrounded, "train_uncond",
                          "uncond.bin", "uncond_log.jsonl");
        });
    }

    // ---- gen-negatives ------------------------------------------------------
    ConfigOpts neg_cfg;
    std::string neg_dir = "out", neg_grounded, neg_model;
    {
        auto* cmd = app.add_subcommand("gen-negatives",
                                       "mixture-decode unfaithful candidates into preference pairs");
        add_config_opts(cmd, neg_cfg);
        cmd->add_option("--dir", neg_dir, "artifact directory");
        cmd->add_option("--grounded", neg_grounded, "grounded model (default <dir>/sft.bin)");
        cmd->add_option("--negative", neg_model,
                        "noise model (default <dir>/uncond.bin or base_lm.bin per config)");
        cmd->callback([&] {
            auto cfg = resolve_config(neg_cfg);
            auto [t1, dropped] = rac::pipeline::load_t1(pick_path("", neg_dir, "t1.jsonl"));
            (void)dropped;
            json splits = read_json_file(pick_path("", neg_dir, "splits.json"));
            auto records = pick_records(cfg, t1, splits, /*preference_side=*/true);
            auto store = rac::pipeline::PassageStore::load(pick_path("", neg_dir, "passages.jsonl"));
            auto vocab = rac::text::Vocab::load(pick_path("", neg_dir, "vocab.txt"));
            bool from_uncond = cfg.negative_source == "uncond";
            auto grounded =
                rac::lm::LMParams::load(pick_path(neg_grounded, neg_dir, "sft.bin"));
            auto negative = rac::lm::LMParams::load(
                pick_path(neg_model, neg_dir, from_uncond ? "uncond.bin" : "base_lm.bin"));
            auto t2 = rac::pipeline::build_t2(
                records, grounded, negative,
                from_uncond ? rac::lm::ModelRole::ungrounded : rac::lm::ModelRole::base_lm, store,
                vocab, cfg, rac::derive_seed(cfg.seed, "negatives"));
            rac::pipeline::save_t2(t2, vocab, pick_path("", neg_dir, "negatives.jsonl"),
                                   cfg.config_hash(), cfg.seed);
            write_json_line(json{{"records", t2.records.size()},
                                 {"dropped", t2.dropped},
                                 {"regenerated", t2.regenerated}});
        });
    }

    // ---- train-dpo ----------------------------------------------------------
    ConfigOpts dpo_cfg;
    std::string dpo_dir = "out", dpo_policy_init, dpo_ref, dpo_out, dpo_log;
    {
        auto* cmd = app.add_subcommand("train-dpo", "preference-align the policy");
        add_config_opts(cmd, dpo_cfg);
        cmd->add_option("--dir", dpo_dir, "artifact directory");
        cmd->add_option("--policy-init", dpo_policy_init,
                        "policy starting checkpoint (default <dir>/sft.bin)");
        cmd->add_option("--ref", dpo_ref, "reference model (default: the policy init)");
        cmd->add_option("--out", dpo_out, "model output (default <dir>/dpo.bin)");
        cmd->add_option("--log", dpo_log, "train log output");
        cmd->callback([&] {
            auto cfg = resolve_config(dpo_cfg);
            auto [t1, dropped] = rac::pipeline::load_t1(pick_path("", dpo_dir, "t1.jsonl"));
            (void)dropped;
            json splits = read_json_file(pick_path("", dpo_dir, "splits.json"));
            auto store = rac::pipeline::PassageStore::load(pick_path("", dpo_dir, "passages.jsonl"));
            auto vocab = rac::text::Vocab::load(pick_path("", dpo_dir, "vocab.txt"));
            auto t2 = rac::pipeline::load_t2(pick_path("", dpo_dir, "negatives.jsonl"));
            auto pref_records = pick_records(cfg, t1, splits, /*preference_side=*/true);
            auto pairs = rac::pipeline::to_preference_pairs(t2, pref_records, store, vocab);
            auto sft_records = pick_records(cfg, t1, splits, /*preference_side=*/false);
            auto sft_tuples = rac::pipeline::to_training_tuples(sft_records, store, vocab);
            auto policy =
                rac::lm::LMParams::load(pick_path(dpo_policy_init, dpo_dir, "sft.bin"));
            rac::lm::LMParams ref =
                dpo_ref.empty() ? policy : rac::lm::LMParams::load(dpo_ref);
            auto log = rac::train::train_dpo(policy, ref, pairs, sft_tuples,
                                             rac::lm::ModelRole::grounded, cfg.dpo_train_config());
            policy.save(pick_path(dpo_out, dpo_dir, "dpo.bin"));
            rac::pipeline::write_train_log(log, pick_path(dpo_log, dpo_dir, "dpo_log.jsonl"),
                                           cfg.config_hash(), cfg.seed);
            write_json_line(json{{"pairs", pairs.size()},
                                 {"steps", log.size()},
                                 {"final_loss", log.empty() ? 0.0 : log.back().loss},
                                 {"final_pref_acc", log.empty() ? 0.0 : log.back().pref_acc}});
        });
    }

    // ---- generate -----------------------------------------------------------
    ConfigOpts gen_cfg;
    std::string gen_dir = "out", gen_model, gen_query;
    bool gen_greedy = false;
    {
        auto* cmd = app.add_subcommand("generate", "retrieve evidence and ask one question");
        add_config_opts(cmd, gen_cfg);
        cmd->add_option("--dir", gen_dir, "artifact directory");
        cmd->add_option("--model", gen_model, "model checkpoint (default <dir>/dpo.bin)");
        cmd->add_option("--query", gen_query, "the ambiguous query")->required();
        cmd->add_flag("--greedy", gen_greedy, "argmax decoding instead of sampling");
        cmd->callback([&] {
            auto cfg = resolve_config(gen_cfg);
            auto index =
                rac::retrieval::InvertedIndex::load(pick_path("", gen_dir, "index.bin"));
            auto store = rac::pipeline::PassageStore::load(pick_path("", gen_dir, "passages.jsonl"));
            auto vocab = rac::text::Vocab::load(pick_path("", gen_dir, "vocab.txt"));
            auto model = rac::lm::LMParams::load(pick_path(gen_model, gen_dir, "dpo.bin"));
            auto query = rac::text::tokenize(gen_query);
            rac::retrieval::RetrievalConfig rcfg{cfg.k,
                                                 rac::retrieval::parse_strategy(
                                                     cfg.retrieval_strategy),
                                                 rac::derive_seed(cfg.seed, "generate")};
            std::vector<std::string> pids;
            if (rcfg.strategy == rac::retrieval::Strategy::bm25) {
                for (const auto& sp : index.retrieve_topk(query, rcfg, cfg.bm25_params()))
                    pids.push_back(sp.passage_id);
            } else {
                pids = index.random_retrieve(rcfg);
            }
            pids = store.corpus_order(pids);
            auto ctx = rac::lm::encode_context(vocab.ids(query), store.resolve(pids, vocab),
                                               rac::lm::ModelRole::grounded);
            auto sc = cfg.sample_config(rac::derive_seed(cfg.seed, "generate"));
            if (gen_greedy) sc.top_k = 1;
            auto res = rac::decode::generate(model, ctx, sc);
            write_json_line(json{{"query", rac::text::join(query)},
                                 {"passage_ids", pids},
                                 {"question", vocab.to_text(res.tokens)},
                                 {"log_prob", res.log_prob}});
        });
    }

    // ---- evaluate -----------------------------------------------------------
    ConfigOpts eval_cfg;
    std::string eval_in, eval_dir = "out", eval_passages, eval_index, eval_out, eval_detail;
    {
        auto* cmd = app.add_subcommand(
            "evaluate", "score candidate questions against evidence and references");
        add_config_opts(cmd, eval_cfg);
        cmd->add_option("--in", eval_in, "candidates jsonl: query, candidate, and either "
                                         "passage_ids or passages (raw text); reference optional")
            ->required();
        cmd->add_option("--dir", eval_dir, "artifact directory");
        cmd->add_option("--passages", eval_passages, "passage store for id resolution");
        cmd->add_option("--index", eval_index, "retrieval index for records without passages");
        cmd->add_option("--out", eval_out, "metric report output (default: stdout)");
        cmd->add_option("--detail", eval_detail, "per-record metric jsonl");
        cmd->callback([&] {
            auto cfg = resolve_config(eval_cfg);
            auto store =
                rac::pipeline::PassageStore::load(pick_path(eval_passages, eval_dir,
                                                            "passages.jsonl"));
            std::optional<rac::retrieval::InvertedIndex> index;
            std::vector<rac::eval::EvalRecord> records;
            size_t lineno = 0;
            for (const json& j : rac::read_jsonl_records(eval_in)) {
                rac::eval::EvalRecord r;
                r.record_id = j.value("record_id", "r" + std::to_string(lineno));
                r.query = rac::text::tokenize(j.at("query").get<std::string>());
                r.candidate = rac::text::tokenize(j.at("candidate").get<std::string>());
                if (j.contains("passage_ids")) {
                    for (const json& pid : j.at("passage_ids"))
                        r.passages.push_back(store.get(pid.get<std::string>()).tokens);
                } else if (j.contains("passages")) {
                    for (const json& p : j.at("passages"))
                        r.passages.push_back(rac::text::tokenize(p.get<std::string>()));
                } else {
                    if (!index) {
                        index = rac::retrieval::InvertedIndex::load(
                            pick_path(eval_index, eval_dir, "index.bin"));
                    }
                    rac::retrieval::RetrievalConfig rcfg{
                        cfg.k, rac::retrieval::parse_strategy(cfg.retrieval_strategy),
                        rac::derive_seed(rac::derive_seed(cfg.seed, "eval_retrieval"), lineno)};
                    if (rcfg.strategy == rac::retrieval::Strategy::bm25) {
                        for (const auto& sp : index->retrieve_topk(r.query, rcfg, cfg.bm25_params()))
                            r.passages.push_back(store.get(sp.passage_id).tokens);
                    } else {
                        for (const std::string& pid : index->random_retrieve(rcfg))
                            r.passages.push_back(store.get(pid).tokens);
                    }
                }
                if (j.contains("reference")) {
                    r.reference = rac::text::tokenize(j.at("reference").get<std::string>());
                    r.has_reference = true;
                }
                records.push_back(std::move(r));
                ++lineno;
            }
            rac::eval::LexicalEntailmentScorer scorer;
            std::optional<rac::JsonlWriter> detail;
            if (!eval_detail.empty()) {
                detail.emplace(eval_detail);
                detail->write(rac::make_header(cfg.config_hash(), cfg.seed));
            }
            auto rep = rac::eval::evaluate_run(records, scorer, detail ? &*detail : nullptr);
            json out = rac::eval::report_to_json(rep);
            if (eval_out.empty()) {
                write_json_line(out);
            } else {
                std::ofstream f(eval_out, std::ios::trunc);
                f << out.dump(2) << "\n";
            }
        });
    }

    // ---- sweeps and run-all ---------------------------------------------------
    ConfigOpts sa_cfg;
    std::string sa_dir = "out", sa_alphas = "0,0.25,0.5,0.75,1";
    {
        auto* cmd = app.add_subcommand("sweep-alpha", "mixture-noise ablation");
        add_config_opts(cmd, sa_cfg);
        cmd->add_option("--dir", sa_dir, "artifact directory");
        cmd->add_option("--alphas", sa_alphas, "comma-separated mixture rates");
        cmd->callback([&] {
            std::vector<double> alphas;
            for (const std::string& s : split_csv(sa_alphas)) alphas.push_back(std::stod(s));
            write_json_line(rac::pipeline::sweep_alpha(resolve_config(sa_cfg), alphas, sa_dir));
        });
    }
    ConfigOpts sp_cfg;
    std::string sp_dir = "out", sp_ks = "0,1,4,8";
    {
        auto* cmd = app.add_subcommand("sweep-passages", "evidence-count ablation");
        add_config_opts(cmd, sp_cfg);
        cmd->add_option("--dir", sp_dir, "artifact directory");
        cmd->add_option("--ks", sp_ks, "comma-separated passage counts");
        cmd->callback([&] {
            std::vector<int> ks;
            for (const std::string& s : split_csv(sp_ks)) ks.push_back(std::stoi(s));
            write_json_line(rac::pipeline::sweep_passages(resolve_config(sp_cfg), ks, sp_dir));
        });
    }
    ConfigOpts sr_cfg;
    std::string sr_dir = "out";
    {
        auto* cmd = app.add_subcommand("sweep-retrieval", "bm25 vs random retrieval ablation");
        add_config_opts(cmd, sr_cfg);
        cmd->add_option("--dir", sr_dir, "artifact directory");
        cmd->callback(
            [&] { write_json_line(rac::pipeline::sweep_retrieval(resolve_config(sr_cfg), sr_dir)); });
    }
    ConfigOpts run_cfg;
    std::string run_dir = "out";
    {
        auto* cmd = app.add_subcommand("run-all", "full pipeline: corpus through evaluation");
        add_config_opts(cmd, run_cfg);
        cmd->add_option("--dir", run_dir, "artifact directory");
        cmd->callback([&] {
            json report = rac::pipeline::run_end_to_end(resolve_config(run_cfg), run_dir);
            write_json_line(json{{"config_hash", report.at("config_hash")},
                                 {"sft", report.at("sft")},
                                 {"dpo", report.at("dpo")}});
        });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
