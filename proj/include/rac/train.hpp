#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rac/lm.hpp"

namespace rac::train {

// One supervised example in token-id space: a query, its retrieved passages,
// and the reference clarifying question.
struct ClarificationTuple {
    std::string query_id;
    std::vector<int> query;
    std::vector<std::vector<int>> passages;
    std::vector<int> target;
};

// One preference example: same context, a faithful question and an
// unfaithful one.
struct PreferencePair {
    std::string record_id;
    std::vector<int> query;
    std::vector<std::vector<int>> passages;
    std::vector<int> chosen;
    std::vector<int> rejected;
};

struct TrainConfig {
    double lr = 3e-3;
    std::string schedule = "linear";  // "linear" decay to 0, or "constant"
    int epochs = 2;
    int batch_size = 32;
    double beta = 0.1;   // preference loss sharpness
    double gamma = 0.5;  // weight on the preference term in the joint loss
    uint64_t seed = 0;
};

// step is 1-based; linear decay reaches 0 one step past the end.
double scheduled_lr(double base, const std::string& schedule, int step, int total_steps);

struct AdamState {
    explicit AdamState(const lm::LMParams& like);
    lm::LMParams m, v;
    int t = 0;
};

// One optimizer step; throws naming the offending tensor if grads are not
// finite, leaving params untouched.
void adam_step(lm::LMParams& params, const lm::LMParams& grads, AdamState& state, double lr);

struct DpoStats {
    double mean_margin = 0.0;  // mean over the batch of the preference margin
    double pref_acc = 0.0;     // fraction of pairs where the margin is positive
};

// Mean over the batch of the summed negative log-likelihood of the target.
// When grads is non-null, accumulates weight * dLoss/dparams.
double sft_loss(const lm::LMParams& params, std::span<const ClarificationTuple> batch,
                lm::ModelRole role, lm::LMParams* grads = nullptr, double weight = 1.0);

// Mean over the batch of -log sigmoid(beta * margin) where the margin is the
// policy-vs-reference log-prob gap between chosen and rejected. Gradients
// flow through the policy only.
double dpo_loss(const lm::LMParams& policy, const lm::LMParams& ref,
                std::span<const PreferencePair> batch, double beta, lm::ModelRole role,
                lm::LMParams* grads = nullptr, DpoStats* stats = nullptr, double weight = 1.0);

// Joint objective: gamma * preference + (1 - gamma) * supervised, with
// gradients to match. gamma == 0 computes exactly sft_loss and gamma == 1
// exactly dpo_loss; either endpoint skips the other side's data entirely.
double rac_loss(const lm::LMParams& policy, const lm::LMParams& ref,
                std::span<const PreferencePair> pairs,
                std::span<const ClarificationTuple> tuples, double beta, double gamma,
                lm::ModelRole role, lm::LMParams* grads = nullptr, DpoStats* stats = nullptr);

struct TrainLogEntry {
    int step = 0;
    int epoch = 0;
    double loss = 0.0;
    double lr = 0.0;
    double pref_acc = 0.0;
    bool has_pref = false;
};
using TrainLog = std::vector<TrainLogEntry>;

// Supervised fine-tuning over tuples; shuffles each epoch from a seed derived
// from cfg.seed so runs are replayable.
TrainLog train_sft(lm::LMParams& params, const std::vector<ClarificationTuple>& data,
                   lm::ModelRole role, const TrainConfig& cfg);

// Joint preference training: gamma * preference + (1 - gamma) * supervised.
// gamma == 1 skips the supervised side entirely; gamma == 0 skips the
// preference side and is step-for-step identical to train_sft.
TrainLog train_dpo(lm::LMParams& policy, const lm::LMParams& ref,
                   const std::vector<PreferencePair>& pairs,
                   const std::vector<ClarificationTuple>& sft_data, lm::ModelRole role,
                   const TrainConfig& cfg);

// Plain next-token pretraining over raw token sequences ([<bos>] ... [<eos>]).
TrainLog pretrain_next_token(lm::LMParams& params, const std::vector<std::vector<int>>& sequences,
                             const TrainConfig& cfg);

}  // namespace rac::train
