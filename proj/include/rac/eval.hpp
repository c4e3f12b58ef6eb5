#pragma once

#include <memory>
#include <string>
#include <vector>

#include "rac/jsonl.hpp"
#include "rac/text.hpp"

namespace rac::eval {

struct ParentComponents {
    double r_in = 0.0;   // fraction of candidate units grounded in the passages
    double r_ref = 0.0;  // fraction of reference units the candidate covers
    bool has_ref = false;
};

// Unit-level overlap of the candidate against the evidence and the reference.
// Units are computed per passage and unioned, so duplicating or reordering
// passages changes nothing.
ParentComponents parent_components(const text::TokenSeq& candidate,
                                   const std::vector<text::TokenSeq>& passages,
                                   const text::TokenSeq* reference,
                                   const text::StopwordSet& stopwords);

// Geometric mean of groundedness and reference coverage; groundedness alone
// when there is no usable reference. A candidate with no content units
// scores 0.
double parent_recall(const text::TokenSeq& candidate, const std::vector<text::TokenSeq>& passages,
                     const text::TokenSeq* reference, const text::StopwordSet& stopwords);

// Fraction of candidate content units absent from the passages. A candidate
// with no content units hallucinates nothing and scores 0.
double hallucination_rate(const text::TokenSeq& candidate,
                          const std::vector<text::TokenSeq>& passages,
                          const text::StopwordSet& stopwords);

// Sentence-level smoothed BLEU-4: raw unigram precision (zero overlap means
// zero score), add-one smoothing on the higher orders, uniform weights,
// brevity penalty.
double bleu(const text::TokenSeq& candidate, const text::TokenSeq& reference);

// LCS-based F1 over tokens.
double rouge_l(const text::TokenSeq& candidate, const text::TokenSeq& reference);

// Question-opening patterns, one per line; matching is applied
// longest-pattern-first.
std::vector<text::TokenSeq> parse_question_templates(std::string_view content);
const std::vector<text::TokenSeq>& default_question_templates();

// Rewrites a clarifying question as the content it asserts: strips leading
// question templates (repeatedly, longest first), drops "?", removes tokens
// that already occur in the query, and keeps the remaining content-bearing
// tokens in order. Applying it twice gives the same result.
text::TokenSeq question_to_declarative(const text::TokenSeq& question,
                                       const text::TokenSeq& query,
                                       const std::vector<text::TokenSeq>& templates,
                                       const text::StopwordSet& stopwords);
std::string question_to_declarative(const std::string& question, const std::string& query);

// Scores how strongly evidence supports a declarative hypothesis. score()
// judges one passage; score_evidence() aggregates a passage set and defaults
// to the best single passage.
class EntailmentScorer {
  public:
    virtual ~EntailmentScorer() = default;
    virtual double score(const std::string& premise, const std::string& hypothesis) const = 0;
    virtual double score_evidence(const std::vector<std::string>& passages,
                                  const std::string& hypothesis) const;
};

// Default scorer: fraction of hypothesis content units present in the
// premise. Evidence-level scoring unions units across passages, which makes
// it exactly the complement of hallucination_rate on the same inputs.
class LexicalEntailmentScorer : public EntailmentScorer {
  public:
    explicit LexicalEntailmentScorer(const text::StopwordSet* stopwords = nullptr);
    double score(const std::string& premise, const std::string& hypothesis) const override;
    double score_evidence(const std::vector<std::string>& passages,
                          const std::string& hypothesis) const override;

  private:
    const text::StopwordSet* stopwords_;
};

// Support for the candidate's declarative form in the retrieved passages;
// an empty hypothesis scores 0.
double entailment_proxy(const std::vector<text::TokenSeq>& passages,
                        const text::TokenSeq& hypothesis, const EntailmentScorer& scorer);

struct EvalRecord {
    std::string record_id;
    text::TokenSeq query;
    std::vector<text::TokenSeq> passages;
    text::TokenSeq candidate;
    text::TokenSeq reference;
    bool has_reference = false;
};

struct MetricReport {
    double parent_recall = 0.0;
    double entailment = 0.0;
    double hallucination_rate = 0.0;
    double grounding_precision = 0.0;  // complement of the hallucination rate
    double bleu = 0.0;                 // over records with references
    double rouge_l = 0.0;              // over records with references
    size_t num_records = 0;
    size_t num_with_reference = 0;
};

// Corpus means of all metrics; when detail is non-null, also writes one json
// line per record.
MetricReport evaluate_run(const std::vector<EvalRecord>& records, const EntailmentScorer& scorer,
                          JsonlWriter* detail = nullptr);

json report_to_json(const MetricReport& report);

}  // namespace rac::eval
