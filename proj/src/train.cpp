#include "rac/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "rac/hash.hpp"
#include "rac/rng.hpp"

namespace rac::train {

using lm::LMParams;
using lm::ModelRole;
using lm::SequenceEncoding;

namespace {

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

// log(1 + exp(x)) without overflow.
double softplus(double x) {
    if (x > 0.0) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

void shuffle_indices(std::vector<size_t>& idx, Rng& rng) {
    for (size_t i = idx.size(); i > 1; --i)
        std::swap(idx[i - 1], idx[rng.below(i)]);
}

// Value of the masked log-prob given already-computed logits.
double masked_value(const Matrix& logits, const SequenceEncoding& enc) {
    double total = 0.0;
    size_t V = logits.cols;
    for (size_t i = 1; i < enc.ids.size(); ++i) {
        if (!enc.loss_mask[i]) continue;
        const double* row = logits.row(i - 1);
        double maxv = row[0];
        for (size_t j = 1; j < V; ++j) maxv = std::max(maxv, row[j]);
        double denom = 0.0;
        for (size_t j = 0; j < V; ++j) denom += std::exp(row[j] - maxv);
        total += row[size_t(enc.ids[i])] - (maxv + std::log(denom));
    }
    return total;
}

// Accumulates coeff * d(masked log-prob)/d(params) reusing a forward cache.
void add_masked_grad(const LMParams& params, const lm::ForwardCache& cache, const Matrix& logits,
                     const SequenceEncoding& enc, double coeff, LMParams& grads) {
    size_t L = enc.ids.size(), V = logits.cols;
    Matrix dlogits(L, V);
    for (size_t i = 1; i < L; ++i) {
        if (!enc.loss_mask[i]) continue;
        const double* row = logits.row(i - 1);
        double maxv = row[0];
        for (size_t j = 1; j < V; ++j) maxv = std::max(maxv, row[j]);
        double denom = 0.0;
        for (size_t j = 0; j < V; ++j) denom += std::exp(row[j] - maxv);
        double lse = maxv + std::log(denom);
        double* drow = dlogits.row(i - 1);
        for (size_t j = 0; j < V; ++j) drow[j] -= coeff * std::exp(row[j] - lse);
        drow[size_t(enc.ids[i])] += coeff;
    }
    lm::backward(params, cache, dlogits, grads);
}

}  // namespace

double scheduled_lr(double base, const std::string& schedule, int step, int total_steps) {
    if (schedule == "constant") return base;
    if (schedule == "linear") {
        if (total_steps <= 0) throw std::invalid_argument("scheduled_lr: total_steps must be > 0");
        return base * (1.0 - double(step - 1) / double(total_steps));
    }
    throw std::invalid_argument("unknown lr schedule: " + schedule);
}

AdamState::AdamState(const LMParams& like)
    : m(LMParams::zeros_like(like)), v(LMParams::zeros_like(like)) {}

void adam_step(LMParams& params, const LMParams& grads, AdamState& state, double lr) {
    std::string bad;
    if (!grads.all_finite(&bad))
        throw std::runtime_error("non-finite gradient in tensor " + bad);
    state.t += 1;
    double bc1 = 1.0 - std::pow(kAdamBeta1, state.t);
    double bc2 = 1.0 - std::pow(kAdamBeta2, state.t);
    for (size_t i = 0; i < params.num_tensors(); ++i) {
        Matrix& p = params.tensor(i);
        const Matrix& g = grads.tensor(i);
        Matrix& m = state.m.tensor(i);
        Matrix& v = state.v.tensor(i);
        for (size_t j = 0; j < p.size(); ++j) {
            double gj = g.data[j];
            m.data[j] = kAdamBeta1 * m.data[j] + (1.0 - kAdamBeta1) * gj;
            v.data[j] = kAdamBeta2 * v.data[j] + (1.0 - kAdamBeta2) * gj * gj;
            double mhat = m.data[j] / bc1;
            double vhat = v.data[j] / bc2;
            p.data[j] -= lr * mhat / (std::sqrt(vhat) + kAdamEps);
        }
    }
}

double sft_loss(const LMParams& params, std::span<const ClarificationTuple> batch, ModelRole role,
                LMParams* grads, double weight) {
    if (batch.empty()) throw std::invalid_argument("sft_loss: empty batch");
    int ctx = params.config().context_len;
    double inv_b = 1.0 / double(batch.size());
    double loss = 0.0;
    for (const ClarificationTuple& t : batch) {
        SequenceEncoding enc = lm::encode_sequence(t.query, t.passages, t.target, role, ctx);
        // loss contribution -logp/B; gradient coeff on logp is -weight/B
        double logp = lm::masked_log_prob(params, enc, -weight * inv_b, grads);
        loss -= logp * inv_b;
    }
    return loss;
}

double dpo_loss(const LMParams& policy, const LMParams& ref,
                std::span<const PreferencePair> batch, double beta, ModelRole role,
                LMParams* grads, DpoStats* stats, double weight) {
    if (batch.empty()) throw std::invalid_argument("dpo_loss: empty batch");
    int ctx = policy.config().context_len;
    double inv_b = 1.0 / double(batch.size());
    double loss = 0.0;
    double margin_sum = 0.0;
    size_t preferred = 0;
    for (const PreferencePair& pair : batch) {
        SequenceEncoding enc_pos = lm::encode_sequence(pair.query, pair.passages, pair.chosen,
                                                       role, ctx);
        SequenceEncoding enc_neg = lm::encode_sequence(pair.query, pair.passages, pair.rejected,
                                                       role, ctx);
        double lp_pos_ref = lm::masked_log_prob(ref, enc_pos, 0.0, nullptr);
        double lp_neg_ref = lm::masked_log_prob(ref, enc_neg, 0.0, nullptr);

        lm::ForwardCache cache_pos, cache_neg;
        Matrix logits_pos = lm::forward(policy, enc_pos.ids, grads ? &cache_pos : nullptr);
        Matrix logits_neg = lm::forward(policy, enc_neg.ids, grads ? &cache_neg : nullptr);
        double lp_pos = masked_value(logits_pos, enc_pos);
        double lp_neg = masked_value(logits_neg, enc_neg);

        double margin = (lp_pos - lp_pos_ref) - (lp_neg - lp_neg_ref);
        margin_sum += margin;
        if (margin > 0.0) ++preferred;
        loss += softplus(-beta * margin) * inv_b;

        if (grads) {
            double s = 1.0 / (1.0 + std::exp(beta * margin));  // sigmoid(-beta*margin)
            double c = weight * beta * s * inv_b;
            add_masked_grad(policy, cache_pos, logits_pos, enc_pos, -c, *grads);
            add_masked_grad(policy, cache_neg, logits_neg, enc_neg, +c, *grads);
        }
    }
    if (stats) {
        stats->mean_margin = margin_sum * inv_b;
        stats->pref_acc = double(preferred) * inv_b;
    }
    return loss;
}

double rac_loss(const LMParams& policy, const LMParams& ref,
                std::span<const PreferencePair> pairs, std::span<const ClarificationTuple> tuples,
                double beta, double gamma, ModelRole role, LMParams* grads, DpoStats* stats) {
    if (gamma < 0.0 || gamma > 1.0)
        throw std::invalid_argument("rac_loss: gamma must lie in [0, 1]");
    if (gamma == 0.0) return sft_loss(policy, tuples, role, grads, 1.0);
    if (gamma == 1.0) return dpo_loss(policy, ref, pairs, beta, role, grads, stats, 1.0);
    double pref = dpo_loss(policy, ref, pairs, beta, role, grads, stats, gamma);
    double sup = sft_loss(policy, tuples, role, grads, 1.0 - gamma);
    return gamma * pref + (1.0 - gamma) * sup;
}

TrainLog train_sft(LMParams& params, const std::vector<ClarificationTuple>& data, ModelRole role,
                   const TrainConfig& cfg) {
    if (data.empty()) throw std::invalid_argument("train_sft: no data");
    if (cfg.batch_size <= 0 || cfg.epochs <= 0)
        throw std::invalid_argument("train_sft: epochs and batch_size must be positive");
    size_t n = data.size(), bs = size_t(cfg.batch_size);
    size_t steps_per_epoch = (n + bs - 1) / bs;
    int total_steps = int(steps_per_epoch) * cfg.epochs;

    AdamState adam(params);
    Rng shuffle_rng(derive_seed(cfg.seed, "sft_shuffle"));
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t(0));

    TrainLog log;
    int step = 0;
    LMParams grads = LMParams::zeros_like(params);
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        shuffle_indices(order, shuffle_rng);
        for (size_t start = 0; start < n; start += bs) {
            std::vector<ClarificationTuple> batch;
            for (size_t i = start; i < std::min(start + bs, n); ++i)
                batch.push_back(data[order[i]]);
            grads.zero();
            double loss = sft_loss(params, batch, role, &grads, 1.0);
            ++step;
            double lr = scheduled_lr(cfg.lr, cfg.schedule, step, total_steps);
            adam_step(params, grads, adam, lr);
            log.push_back({step, epoch, loss, lr, 0.0, false});
        }
    }
    return log;
}

TrainLog train_dpo(LMParams& policy, const LMParams& ref,
                   const std::vector<PreferencePair>& pairs,
                   const std::vector<ClarificationTuple>& sft_data, ModelRole role,
                   const TrainConfig& cfg) {
    if (cfg.batch_size <= 0 || cfg.epochs <= 0)
        throw std::invalid_argument("train_dpo: epochs and batch_size must be positive");
    if (cfg.gamma < 0.0 || cfg.gamma > 1.0)
        throw std::invalid_argument("train_dpo: gamma must lie in [0, 1]");
    bool use_pref = cfg.gamma > 0.0;
    bool use_sft = cfg.gamma < 1.0;
    if (use_pref && pairs.empty()) throw std::invalid_argument("train_dpo: no preference pairs");
    if (use_sft && sft_data.empty()) throw std::invalid_argument("train_dpo: no supervised data");

    size_t bs = size_t(cfg.batch_size);
    // The preference pairs drive the schedule; with gamma == 0 the supervised
    // set does, which makes that case identical to train_sft.
    size_t n_drive = use_pref ? pairs.size() : sft_data.size();
    size_t steps_per_epoch = (n_drive + bs - 1) / bs;
    int total_steps = int(steps_per_epoch) * cfg.epochs;

    AdamState adam(policy);
    Rng pair_rng(derive_seed(cfg.seed, "dpo_shuffle"));
    Rng sft_rng(derive_seed(cfg.seed, "sft_shuffle"));
    std::vector<size_t> pair_order(pairs.size());
    std::iota(pair_order.begin(), pair_order.end(), size_t(0));

    // Supervised examples cycle independently of the pair batches.
    std::vector<size_t> sft_order(sft_data.size());
    std::iota(sft_order.begin(), sft_order.end(), size_t(0));
    size_t sft_pos = 0;
    if (use_pref && use_sft) shuffle_indices(sft_order, sft_rng);
    auto next_sft_batch = [&](size_t want) {
        std::vector<ClarificationTuple> batch;
        while (batch.size() < want) {
            if (sft_pos == sft_order.size()) {
                shuffle_indices(sft_order, sft_rng);
                sft_pos = 0;
            }
            batch.push_back(sft_data[sft_order[sft_pos++]]);
        }
        return batch;
    };

    TrainLog log;
    int step = 0;
    LMParams grads = LMParams::zeros_like(policy);
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        if (use_pref) {
            shuffle_indices(pair_order, pair_rng);
            for (size_t start = 0; start < pairs.size(); start += bs) {
                std::vector<PreferencePair> batch;
                for (size_t i = start; i < std::min(start + bs, pairs.size()); ++i)
                    batch.push_back(pairs[pair_order[i]]);
                grads.zero();
                DpoStats stats;
                std::vector<ClarificationTuple> sft_batch;
                if (use_sft) sft_batch = next_sft_batch(batch.size());
                double loss = rac_loss(policy, ref, batch, sft_batch, cfg.beta, cfg.gamma, role,
                                       &grads, &stats);
                ++step;
                double lr = scheduled_lr(cfg.lr, cfg.schedule, step, total_steps);
                adam_step(policy, grads, adam, lr);
                log.push_back({step, epoch, loss, lr, stats.pref_acc, true});
            }
        } else {
            // pure supervised path, bit-identical to train_sft
            shuffle_indices(sft_order, sft_rng);
            for (size_t start = 0; start < sft_data.size(); start += bs) {
                std::vector<ClarificationTuple> batch;
                for (size_t i = start; i < std::min(start + bs, sft_data.size()); ++i)
                    batch.push_back(sft_data[sft_order[i]]);
                grads.zero();
                double loss = rac_loss(policy, ref, {}, batch, cfg.beta, cfg.gamma, role, &grads,
                                       nullptr);
                ++step;
                double lr = scheduled_lr(cfg.lr, cfg.schedule, step, total_steps);
                adam_step(policy, grads, adam, lr);
                log.push_back({step, epoch, loss, lr, 0.0, false});
            }
        }
    }
    return log;
}

TrainLog pretrain_next_token(LMParams& params, const std::vector<std::vector<int>>& sequences,
                             const TrainConfig& cfg) {
    if (sequences.empty()) throw std::invalid_argument("pretrain_next_token: no data");
    std::vector<ClarificationTuple> as_tuples;
    as_tuples.reserve(sequences.size());
    // Reuse the supervised loop with an empty context: [<bos>] seq [<eos>]
    // where every token after <bos> is a target.
    for (size_t i = 0; i < sequences.size(); ++i) {
        ClarificationTuple t;
        t.query_id = "seq" + std::to_string(i);
        t.target = sequences[i];
        as_tuples.push_back(std::move(t));
    }
    return train_sft(params, as_tuples, lm::ModelRole::base_lm, cfg);
}

}  // namespace rac::train
