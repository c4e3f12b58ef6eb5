#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "rac/matrix.hpp"

namespace rac::lm {

// Decoder-only pre-norm transformer, learned positional embeddings, exact
// GELU, untied output projection. Everything runs in double precision.
struct LMConfig {
    int vocab_size = 0;
    int d_model = 32;
    int n_layers = 2;
    int n_heads = 4;
    int context_len = 384;
    uint64_t seed = 0;

    void validate() const;  // throws on inconsistent settings
    bool operator==(const LMConfig&) const = default;
};

// Which inputs a model conditions on. grounded/policy see (query, passages),
// ungrounded/base_lm see the query only.
enum class ModelRole { base_lm, grounded, ungrounded, policy };

ModelRole parse_role(const std::string& name);
std::string role_name(ModelRole role);
bool role_uses_passages(ModelRole role);

// Token ids plus a mask; loss_mask[i] marks token ids[i] as a training
// target (predicted from the logits at position i-1). Mask positions cover
// the clarification tokens and the closing <eos>, never the context.
struct SequenceEncoding {
    std::vector<int> ids;
    std::vector<uint8_t> loss_mask;
};

// [<bos>] query [<sep>] (passage [<sep>])*  -- passages dropped for roles
// that do not condition on them.
std::vector<int> encode_context(const std::vector<int>& query,
                                const std::vector<std::vector<int>>& passages, ModelRole role);

// Context followed by target tokens and <eos>; throws if the result exceeds
// context_len.
SequenceEncoding encode_sequence(const std::vector<int>& query,
                                 const std::vector<std::vector<int>>& passages,
                                 const std::vector<int>& target, ModelRole role,
                                 int context_len);

class LMParams {
  public:
    // Seeded init: weight matrices ~ N(0, 0.02^2), biases zero, layer-norm
    // gains one. The draw order is the tensor order, so init is bit-stable.
    static LMParams init(const LMConfig& cfg);
    static LMParams zeros_like(const LMParams& other);

    const LMConfig& config() const { return cfg_; }
    size_t num_tensors() const { return tensors_.size(); }
    const std::string& name(size_t i) const { return names_[i]; }
    Matrix& tensor(size_t i) { return tensors_[i]; }
    const Matrix& tensor(size_t i) const { return tensors_[i]; }
    Matrix& tensor(const std::string& name);
    const Matrix& tensor(const std::string& name) const;
    size_t total_params() const;

    void zero();
    void add_scaled(const LMParams& other, double s);  // this += s * other
    bool all_finite(std::string* offending = nullptr) const;

    // Checkpoint format: magic "RACLM1", u32 json header length, json header
    // (config, tensor names and shapes, fnv1a64 checksum of the payload),
    // then raw little-endian doubles in tensor order. Loading a truncated or
    // corrupt file throws without returning partial parameters.
    void save(const std::string& path) const;
    static LMParams load(const std::string& path);

  private:
    LMConfig cfg_;
    std::vector<std::string> names_;
    std::vector<Matrix> tensors_;
    std::unordered_map<std::string, size_t> index_;

    static LMParams skeleton(const LMConfig& cfg);
};

// Per-layer activations captured by forward() when a backward pass follows.
struct LayerCache {
    Matrix x_in;
    std::vector<double> mean1, rstd1;
    Matrix ln1;
    Matrix q, k, v;
    std::vector<Matrix> att;  // per head, L x L, causal rows
    Matrix att_out;           // concatenated head outputs before the output proj
    Matrix x_mid;
    std::vector<double> mean2, rstd2;
    Matrix ln2;
    Matrix f1, f2;  // pre-activation and gelu output
    Matrix x_out;
};

struct ForwardCache {
    std::vector<int> ids;
    Matrix x0;
    std::vector<LayerCache> layers;
    std::vector<double> mean_f, rstd_f;
    Matrix ln_f;
};

// Logits for every position, [L x V]. Pass a cache to enable backward().
Matrix forward(const LMParams& params, std::span<const int> ids, ForwardCache* cache = nullptr);

// Incremental decoding state: per-layer key/value rows for the tokens
// consumed so far. forward_next() produces exactly the logits row that
// forward() would give for the same prefix, one token at a time.
class DecodeState {
  public:
    explicit DecodeState(const LMConfig& cfg);
    size_t length() const { return length_; }

  private:
    friend std::vector<double> forward_next(const LMParams&, DecodeState&, int);
    std::vector<std::vector<double>> k_, v_;  // per layer, length_ x d_model
    size_t length_ = 0;
};

std::vector<double> forward_next(const LMParams& params, DecodeState& state, int token_id);

// Accumulates parameter gradients for d(scalar)/d(logits) into grads.
void backward(const LMParams& params, const ForwardCache& cache, const Matrix& dlogits,
              LMParams& grads);

// Sum over target tokens of log softmax(logits)[target] with the target
// appended to the context. Empty target gives 0.
double sequence_log_prob(const LMParams& params, std::span<const int> context,
                         std::span<const int> target);

// Shared by the losses: returns the summed log-prob over masked positions;
// when grads is non-null also accumulates coeff * d(logprob)/d(params).
double masked_log_prob(const LMParams& params, const SequenceEncoding& enc, double coeff,
                       LMParams* grads);

}  // namespace rac::lm
