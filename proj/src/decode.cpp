#include "rac/decode.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "rac/hash.hpp"
#include "rac/text.hpp"

namespace rac::decode {

namespace {

// log softmax(logits)[id] without shaping, for scoring emitted tokens.
double raw_log_prob(std::span<const double> logits, int id) {
    double maxv = logits[0];
    for (double v : logits) maxv = std::max(maxv, v);
    double denom = 0.0;
    for (double v : logits) denom += std::exp(v - maxv);
    return logits[size_t(id)] - maxv - std::log(denom);
}

bool only_eos(const std::vector<int>& tokens) {
    for (int t : tokens)
        if (t != text::Vocab::kEos) return false;
    return true;
}

}  // namespace

std::vector<double> shape_distribution(std::span<const double> logits, double temperature,
                                       int top_k) {
    if (logits.empty()) throw std::invalid_argument("shape_distribution: empty logits");
    double t = std::max(temperature, 1e-6);
    size_t V = logits.size();
    std::vector<double> scaled(V);
    for (size_t i = 0; i < V; ++i) {
        if (!std::isfinite(logits[i]))
            throw std::invalid_argument("shape_distribution: non-finite logit");
        scaled[i] = logits[i] / t;
    }

    std::vector<uint8_t> keep(V, 1);
    if (top_k > 0 && size_t(top_k) < V) {
        std::vector<size_t> idx(V);
        std::iota(idx.begin(), idx.end(), size_t(0));
        std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
            if (scaled[a] != scaled[b]) return scaled[a] > scaled[b];
            return a < b;
        });
        std::fill(keep.begin(), keep.end(), uint8_t(0));
        for (size_t i = 0; i < size_t(top_k); ++i) keep[idx[i]] = 1;
    }

    double maxv = -1e300;
    for (size_t i = 0; i < V; ++i)
        if (keep[i]) maxv = std::max(maxv, scaled[i]);
    double denom = 0.0;
    std::vector<double> probs(V, 0.0);
    for (size_t i = 0; i < V; ++i) {
        if (!keep[i]) continue;
        probs[i] = std::exp(scaled[i] - maxv);
        denom += probs[i];
    }
    for (double& p : probs) p /= denom;
    return probs;
}

int sample_token(std::span<const double> probs, int top_k, Rng& rng) {
    if (probs.empty()) throw std::invalid_argument("sample_token: empty distribution");
    if (top_k == 1) {
        size_t best = 0;
        for (size_t i = 1; i < probs.size(); ++i)
            if (probs[i] > probs[best]) best = i;
        return int(best);
    }
    return int(rng.categorical(probs));
}

GenResult generate(const lm::LMParams& params, std::span<const int> context,
                   const SampleConfig& cfg) {
    if (cfg.max_len <= 0) throw std::invalid_argument("generate: max_len must be positive");
    if (context.empty()) throw std::invalid_argument("generate: empty context");
    size_t window = size_t(params.config().context_len);
    lm::DecodeState state(params.config());
    std::vector<double> row;
    for (int id : context) row = lm::forward_next(params, state, id);

    Rng rng(cfg.seed);
    GenResult res;
    while (int(res.tokens.size()) < cfg.max_len) {
        std::vector<double> probs = shape_distribution(row, cfg.temperature, cfg.top_k);
        int tok = sample_token(probs, cfg.top_k, rng);
        res.log_prob += raw_log_prob(row, tok);
        res.tokens.push_back(tok);
        if (tok == text::Vocab::kEos) break;
        if (int(res.tokens.size()) >= cfg.max_len) break;
        if (state.length() >= window) break;  // window full, cannot extend
        row = lm::forward_next(params, state, tok);
    }
    return res;
}

MixtureStep mixture_step(std::span<const double> grounded_probs,
                         std::span<const double> uncond_probs, double alpha, Rng& gate_rng,
                         Rng& token_rng, int top_k) {
    if (grounded_probs.size() != uncond_probs.size())
        throw std::invalid_argument("mixture_step: distributions disagree on vocab size");
    for (auto probs : {grounded_probs, uncond_probs}) {
        double sum = 0.0;
        for (double p : probs) sum += p;
        if (std::abs(sum - 1.0) > 1e-9)
            throw std::invalid_argument("mixture_step: distribution does not sum to 1");
    }
    MixtureStep step;
    step.gate = gate_rng.bernoulli(alpha);
    step.token = sample_token(step.gate ? uncond_probs : grounded_probs, top_k, token_rng);
    return step;
}

NoisyResult noisy_generate(const lm::LMParams& grounded, const lm::LMParams& uncond,
                           std::span<const int> grounded_ctx, std::span<const int> uncond_ctx,
                           const MixtureConfig& cfg) {
    if (cfg.sample.max_len <= 0)
        throw std::invalid_argument("noisy_generate: max_len must be positive");
    if (cfg.alpha < 0.0 || cfg.alpha > 1.0)
        throw std::invalid_argument("noisy_generate: alpha must lie in [0, 1]");
    if (grounded_ctx.empty() || uncond_ctx.empty())
        throw std::invalid_argument("noisy_generate: empty context");

    auto attempt = [&](uint64_t seed) {
        Rng token_rng(seed);
        Rng gate_rng(derive_seed(seed, "mixture_gate"));
        size_t g_window = size_t(grounded.config().context_len);
        size_t u_window = size_t(uncond.config().context_len);
        lm::DecodeState g_state(grounded.config());
        lm::DecodeState u_state(uncond.config());
        std::vector<double> g_row, u_row;
        for (int id : grounded_ctx) g_row = lm::forward_next(grounded, g_state, id);
        for (int id : uncond_ctx) u_row = lm::forward_next(uncond, u_state, id);

        NoisyResult res;
        res.seed_used = seed;
        while (int(res.tokens.size()) < cfg.sample.max_len) {
            std::vector<double> g_probs =
                shape_distribution(g_row, cfg.sample.temperature, cfg.sample.top_k);
            std::vector<double> u_probs =
                shape_distribution(u_row, cfg.sample.temperature, cfg.sample.top_k);
            MixtureStep step = mixture_step(g_probs, u_probs, cfg.alpha, gate_rng, token_rng,
                                            cfg.sample.top_k);
            res.tokens.push_back(step.token);
            res.gates.push_back(step.gate ? 1 : 0);
            if (step.token == text::Vocab::kEos) break;
            if (int(res.tokens.size()) >= cfg.sample.max_len) break;
            if (g_state.length() >= g_window || u_state.length() >= u_window) break;
            g_row = lm::forward_next(grounded, g_state, step.token);
            u_row = lm::forward_next(uncond, u_state, step.token);
        }
        return res;
    };

    NoisyResult res = attempt(cfg.sample.seed);
    if (only_eos(res.tokens)) {
        res = attempt(derive_seed(cfg.sample.seed, "retry"));
        res.retried = true;
    }
    return res;
}

}  // namespace rac::decode
