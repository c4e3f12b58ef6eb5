#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "rac/lm.hpp"
#include "rac/rng.hpp"

namespace rac::decode {

struct SampleConfig {
    double temperature = 1.0;
    int top_k = 10;    // <= 0 keeps the full distribution; 1 is greedy
    int max_len = 24;  // cap on emitted tokens, counting the closing <eos>
    uint64_t seed = 0;
};

// logits row -> sampling distribution: divide by temperature, keep the top_k
// entries (ties broken toward lower ids), softmax over the survivors. Throws
// on non-finite logits.
std::vector<double> shape_distribution(std::span<const double> logits, double temperature,
                                       int top_k);

// Draws from a shaped distribution. top_k == 1 returns the argmax without
// consuming randomness, so greedy decoding is replay-independent of the rng.
int sample_token(std::span<const double> probs, int top_k, Rng& rng);

struct GenResult {
    std::vector<int> tokens;  // includes the trailing <eos> when one was emitted
    double log_prob = 0.0;    // of the emitted tokens under the raw (unshaped) model
};

// Autoregressive decoding from a fixed context. Stops at <eos>, max_len
// tokens, or the model's context window, whichever comes first.
GenResult generate(const lm::LMParams& params, std::span<const int> context,
                   const SampleConfig& cfg);

struct MixtureConfig {
    double alpha = 0.7;  // per-token probability of sampling from the query-only model
    SampleConfig sample;
};

struct MixtureStep {
    int token = 0;
    bool gate = false;  // true when the query-only model produced this token
};

// One mixture step: a Bernoulli(alpha) gate picks which shaped distribution
// the token comes from. The gate and the token draw use separate streams so
// alpha = 0 and alpha = 1 replay single-model decoding token for token.
MixtureStep mixture_step(std::span<const double> grounded_probs,
                         std::span<const double> uncond_probs, double alpha, Rng& gate_rng,
                         Rng& token_rng, int top_k);

struct NoisyResult {
    std::vector<int> tokens;
    std::vector<uint8_t> gates;  // parallel to tokens
    uint64_t seed_used = 0;
    bool retried = false;
};

// Mixture decoding of an unfaithful candidate: both models advance over the
// same emitted stream, each conditioned on its own context. If the first
// attempt emits nothing but <eos>, retries once from a derived seed.
NoisyResult noisy_generate(const lm::LMParams& grounded, const lm::LMParams& uncond,
                           std::span<const int> grounded_ctx, std::span<const int> uncond_ctx,
                           const MixtureConfig& cfg);

}  // namespace rac::decode
