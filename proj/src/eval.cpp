#include "rac/eval.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

#include "rac/default_assets.hpp"

namespace rac::eval {

using text::StopwordSet;
using text::TokenSeq;
using text::UnitSet;

namespace {

UnitSet passage_units(const std::vector<TokenSeq>& passages, const StopwordSet& stop) {
    UnitSet all;
    for (const TokenSeq& p : passages) {
        UnitSet u = text::content_units(p, stop);
        all.insert(u.begin(), u.end());
    }
    return all;
}

size_t intersection_size(const UnitSet& a, const UnitSet& b) {
    const UnitSet& small = a.size() <= b.size() ? a : b;
    const UnitSet& large = a.size() <= b.size() ? b : a;
    size_t n = 0;
    for (const auto& u : small) n += large.count(u);
    return n;
}

size_t lcs_length(const TokenSeq& a, const TokenSeq& b) {
    if (a.empty() || b.empty()) return 0;
    std::vector<size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (size_t i = 1; i <= a.size(); ++i) {
        for (size_t j = 1; j <= b.size(); ++j) {
            if (a[i - 1] == b[j - 1])
                cur[j] = prev[j - 1] + 1;
            else
                cur[j] = std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

bool starts_with(const TokenSeq& seq, const TokenSeq& prefix) {
    if (prefix.empty() || prefix.size() > seq.size()) return false;
    return std::equal(prefix.begin(), prefix.end(), seq.begin());
}

}  // namespace

ParentComponents parent_components(const TokenSeq& candidate,
                                   const std::vector<TokenSeq>& passages,
                                   const TokenSeq* reference, const StopwordSet& stopwords) {
    ParentComponents pc;
    UnitSet cand = text::content_units(candidate, stopwords);
    UnitSet source = passage_units(passages, stopwords);
    if (!cand.empty())
        pc.r_in = double(intersection_size(cand, source)) / double(cand.size());
    if (reference) {
        UnitSet ref = text::content_units(*reference, stopwords);
        if (!ref.empty()) {
            pc.has_ref = true;
            pc.r_ref = double(intersection_size(cand, ref)) / double(ref.size());
        }
    }
    return pc;
}

double parent_recall(const TokenSeq& candidate, const std::vector<TokenSeq>& passages,
                     const TokenSeq* reference, const StopwordSet& stopwords) {
    if (text::content_units(candidate, stopwords).empty()) return 0.0;
    ParentComponents pc = parent_components(candidate, passages, reference, stopwords);
    if (!pc.has_ref) return pc.r_in;
    return std::sqrt(pc.r_in * pc.r_ref);
}

double hallucination_rate(const TokenSeq& candidate, const std::vector<TokenSeq>& passages,
                          const StopwordSet& stopwords) {
    UnitSet cand = text::content_units(candidate, stopwords);
    if (cand.empty()) return 0.0;
    UnitSet source = passage_units(passages, stopwords);
    double r_in = double(intersection_size(cand, source)) / double(cand.size());
    return 1.0 - r_in;
}

double bleu(const TokenSeq& candidate, const TokenSeq& reference) {
    size_t c = candidate.size(), r = reference.size();
    if (c == 0 || r == 0) return 0.0;

    double log_sum = 0.0;
    for (size_t n = 1; n <= 4; ++n) {
        auto cand_grams = text::extract_ngrams(candidate, n);
        auto ref_grams = text::extract_ngrams(reference, n);
        size_t matched = 0, total = 0;
        for (const auto& [gram, count] : cand_grams) {
            total += size_t(count);
            auto it = ref_grams.find(gram);
            if (it != ref_grams.end()) matched += std::min(count, it->second);
        }
        double p;
        if (n == 1) {
            if (matched == 0) return 0.0;  // no unigram overlap means no credit
            p = double(matched) / double(total);
        } else if (total == 0) {
            p = 1.0;  // candidate shorter than n; nothing to penalize
        } else {
            p = double(matched + 1) / double(total + 1);
        }
        log_sum += 0.25 * std::log(p);
    }
    double bp = c >= r ? 1.0 : std::exp(1.0 - double(r) / double(c));
    return bp * std::exp(log_sum);
}

double rouge_l(const TokenSeq& candidate, const TokenSeq& reference) {
    if (candidate.empty() || reference.empty()) return 0.0;
    size_t lcs = lcs_length(candidate, reference);
    if (lcs == 0) return 0.0;
    double p = double(lcs) / double(candidate.size());
    double r = double(lcs) / double(reference.size());
    return 2.0 * p * r / (p + r);
}

std::vector<TokenSeq> parse_question_templates(std::string_view content) {
    std::vector<TokenSeq> templates;
    size_t pos = 0;
    while (pos <= content.size()) {
        size_t end = content.find('\n', pos);
        if (end == std::string_view::npos) end = content.size();
        std::string_view line = content.substr(pos, end - pos);
        pos = end + 1;
        if (auto hash = line.find('#'); hash != std::string_view::npos)
            line = line.substr(0, hash);
        TokenSeq toks = text::tokenize(line);
        if (!toks.empty()) templates.push_back(std::move(toks));
        if (end == content.size()) break;
    }
    // longest first so "are you looking for" wins over "are you"
    std::stable_sort(templates.begin(), templates.end(),
                     [](const TokenSeq& a, const TokenSeq& b) { return a.size() > b.size(); });
    return templates;
}

const std::vector<TokenSeq>& default_question_templates() {
    static const std::vector<TokenSeq> templates =
        parse_question_templates(assets::kQuestionTemplatesTxt);
    return templates;
}

TokenSeq question_to_declarative(const TokenSeq& question, const TokenSeq& query,
                                 const std::vector<TokenSeq>& templates,
                                 const StopwordSet& stopwords) {
    TokenSeq toks = question;
    bool stripped = true;
    while (stripped) {
        stripped = false;
        for (const TokenSeq& t : templates) {
            if (starts_with(toks, t)) {
                toks.erase(toks.begin(), toks.begin() + std::ptrdiff_t(t.size()));
                stripped = true;
                break;
            }
        }
    }
    std::set<std::string> query_tokens(query.begin(), query.end());
    TokenSeq out;
    for (const std::string& tok : toks) {
        if (tok == "?") continue;
        if (query_tokens.count(tok)) continue;
        if (stopwords.count(tok)) continue;
        out.push_back(tok);
    }
    return out;
}

std::string question_to_declarative(const std::string& question, const std::string& query) {
    return text::join(question_to_declarative(text::tokenize(question), text::tokenize(query),
                                              default_question_templates(),
                                              text::default_stopwords()));
}

double EntailmentScorer::score_evidence(const std::vector<std::string>& passages,
                                        const std::string& hypothesis) const {
    double best = 0.0;
    for (const std::string& p : passages) best = std::max(best, score(p, hypothesis));
    return best;
}

LexicalEntailmentScorer::LexicalEntailmentScorer(const StopwordSet* stopwords)
    : stopwords_(stopwords ? stopwords : &text::default_stopwords()) {}

double LexicalEntailmentScorer::score(const std::string& premise,
                                      const std::string& hypothesis) const {
    UnitSet hyp = text::content_units(text::tokenize(hypothesis), *stopwords_);
    if (hyp.empty()) return 0.0;
    UnitSet prem = text::content_units(text::tokenize(premise), *stopwords_);
    return double(intersection_size(hyp, prem)) / double(hyp.size());
}

double LexicalEntailmentScorer::score_evidence(const std::vector<std::string>& passages,
                                               const std::string& hypothesis) const {
    UnitSet hyp = text::content_units(text::tokenize(hypothesis), *stopwords_);
    if (hyp.empty()) return 0.0;
    UnitSet prem;
    for (const std::string& p : passages) {
        UnitSet u = text::content_units(text::tokenize(p), *stopwords_);
        prem.insert(u.begin(), u.end());
    }
    return double(intersection_size(hyp, prem)) / double(hyp.size());
}

double entailment_proxy(const std::vector<TokenSeq>& passages, const TokenSeq& hypothesis,
                        const EntailmentScorer& scorer) {
    if (hypothesis.empty()) return 0.0;
    std::vector<std::string> premise_texts;
    premise_texts.reserve(passages.size());
    for (const TokenSeq& p : passages) premise_texts.push_back(text::join(p));
    return scorer.score_evidence(premise_texts, text::join(hypothesis));
}

MetricReport evaluate_run(const std::vector<EvalRecord>& records, const EntailmentScorer& scorer,
                          JsonlWriter* detail) {
    if (records.empty()) throw std::invalid_argument("evaluate_run: no records");
    const StopwordSet& stop = text::default_stopwords();
    const auto& templates = default_question_templates();
    MetricReport rep;
    rep.num_records = records.size();
    for (const EvalRecord& rec : records) {
        const TokenSeq* ref = rec.has_reference ? &rec.reference : nullptr;
        double par = parent_recall(rec.candidate, rec.passages, ref, stop);
        double hall = hallucination_rate(rec.candidate, rec.passages, stop);
        TokenSeq decl = question_to_declarative(rec.candidate, rec.query, templates, stop);
        double ent = entailment_proxy(rec.passages, decl, scorer);
        rep.parent_recall += par;
        rep.hallucination_rate += hall;
        rep.grounding_precision += 1.0 - hall;
        rep.entailment += ent;
        double bl = 0.0, rl = 0.0;
        if (rec.has_reference) {
            bl = bleu(rec.candidate, rec.reference);
            rl = rouge_l(rec.candidate, rec.reference);
            rep.bleu += bl;
            rep.rouge_l += rl;
            ++rep.num_with_reference;
        }
        if (detail) {
            json line = {{"record_id", rec.record_id},
                         {"parent_recall", par},
                         {"hallucination_rate", hall},
                         {"entailment", ent},
                         {"candidate", text::join(rec.candidate)},
                         {"declarative", text::join(decl)}};
            if (rec.has_reference) {
                line["bleu"] = bl;
                line["rouge_l"] = rl;
                line["reference"] = text::join(rec.reference);
            }
            detail->write(line);
        }
    }
    double n = double(rep.num_records);
    rep.parent_recall /= n;
    rep.hallucination_rate /= n;
    rep.grounding_precision /= n;
    rep.entailment /= n;
    if (rep.num_with_reference > 0) {
        rep.bleu /= double(rep.num_with_reference);
        rep.rouge_l /= double(rep.num_with_reference);
    }
    return rep;
}

json report_to_json(const MetricReport& rep) {
    return json{{"parent_recall", rep.parent_recall},
                {"entailment", rep.entailment},
                {"hallucination_rate", rep.hallucination_rate},
                {"grounding_precision", rep.grounding_precision},
                {"bleu", rep.bleu},
                {"rouge_l", rep.rouge_l},
                {"num_records", rep.num_records},
                {"num_with_reference", rep.num_with_reference}};
}

}  // namespace rac::eval
