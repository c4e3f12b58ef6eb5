#include "rac/lm.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "rac/hash.hpp"
#include "rac/jsonl.hpp"
#include "rac/rng.hpp"
#include "rac/text.hpp"

namespace rac::lm {

namespace {

constexpr double kLnEps = 1e-5;
constexpr char kMagic[6] = {'R', 'A', 'C', 'L', 'M', '1'};

// out = A * B, A: [L x M], B: [M x N]
void matmul(const Matrix& a, const Matrix& b, Matrix& out) {
    out = Matrix(a.rows, b.cols);
    for (size_t i = 0; i < a.rows; ++i) {
        const double* arow = a.row(i);
        double* orow = out.row(i);
        for (size_t k = 0; k < a.cols; ++k) {
            double av = arow[k];
            if (av == 0.0) continue;
            const double* brow = b.row(k);
            for (size_t j = 0; j < b.cols; ++j) orow[j] += av * brow[j];
        }
    }
}

// out += A^T * B, A: [L x M], B: [L x N], out: [M x N]
void matmul_at_b_acc(const Matrix& a, const Matrix& b, Matrix& out) {
    for (size_t i = 0; i < a.rows; ++i) {
        const double* arow = a.row(i);
        const double* brow = b.row(i);
        for (size_t m = 0; m < a.cols; ++m) {
            double av = arow[m];
            if (av == 0.0) continue;
            double* orow = out.row(m);
            for (size_t n = 0; n < b.cols; ++n) orow[n] += av * brow[n];
        }
    }
}

// out = A * B^T, A: [L x M], B: [N x M], out: [L x N]
void matmul_a_bt(const Matrix& a, const Matrix& b, Matrix& out) {
    out = Matrix(a.rows, b.rows);
    for (size_t i = 0; i < a.rows; ++i) {
        const double* arow = a.row(i);
        double* orow = out.row(i);
        for (size_t r = 0; r < b.rows; ++r) {
            const double* brow = b.row(r);
            double s = 0.0;
            for (size_t k = 0; k < a.cols; ++k) s += arow[k] * brow[k];
            orow[r] = s;
        }
    }
}

void add_bias(Matrix& m, const Matrix& bias) {
    for (size_t i = 0; i < m.rows; ++i) {
        double* row = m.row(i);
        const double* b = bias.row(0);
        for (size_t j = 0; j < m.cols; ++j) row[j] += b[j];
    }
}

// y = gain * (x - mean) / sqrt(var + eps) + bias, per row.
void layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, Matrix& y,
                std::vector<double>& mean, std::vector<double>& rstd) {
    size_t n = x.cols;
    y = Matrix(x.rows, n);
    mean.resize(x.rows);
    rstd.resize(x.rows);
    for (size_t i = 0; i < x.rows; ++i) {
        const double* xr = x.row(i);
        double mu = 0.0;
        for (size_t j = 0; j < n; ++j) mu += xr[j];
        mu /= double(n);
        double var = 0.0;
        for (size_t j = 0; j < n; ++j) {
            double d = xr[j] - mu;
            var += d * d;
        }
        var /= double(n);
        double r = 1.0 / std::sqrt(var + kLnEps);
        mean[i] = mu;
        rstd[i] = r;
        double* yr = y.row(i);
        const double* g = gain.row(0);
        const double* b = bias.row(0);
        for (size_t j = 0; j < n; ++j) yr[j] = g[j] * (xr[j] - mu) * r + b[j];
    }
}

// dx += backward of layer_norm; also accumulates dgain/dbias.
void layer_norm_backward(const Matrix& x, const Matrix& gain, const std::vector<double>& mean,
                         const std::vector<double>& rstd, const Matrix& dy, Matrix& dx,
                         Matrix& dgain, Matrix& dbias) {
    size_t n = x.cols;
    for (size_t i = 0; i < x.rows; ++i) {
        const double* xr = x.row(i);
        const double* dyr = dy.row(i);
        const double* g = gain.row(0);
        double mu = mean[i], r = rstd[i];
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (size_t j = 0; j < n; ++j) {
            double xhat = (xr[j] - mu) * r;
            double dxhat = dyr[j] * g[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            dgain.row(0)[j] += dyr[j] * xhat;
            dbias.row(0)[j] += dyr[j];
        }
        double inv_n = 1.0 / double(n);
        double* dxr = dx.row(i);
        for (size_t j = 0; j < n; ++j) {
            double xhat = (xr[j] - mu) * r;
            double dxhat = dyr[j] * g[j];
            dxr[j] += r * (dxhat - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat);
        }
    }
}

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }
double gelu_grad(double x) {
    return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * std::exp(-0.5 * x * x) * kInvSqrt2Pi;
}

void write_bytes(std::ostream& out, const void* p, size_t n) {
    out.write(static_cast<const char*>(p), std::streamsize(n));
}

}  // namespace

void LMConfig::validate() const {
    if (vocab_size < text::Vocab::kNumReserved)
        throw std::invalid_argument("LMConfig: vocab_size must cover the reserved ids");
    if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || context_len <= 0)
        throw std::invalid_argument("LMConfig: dimensions must be positive");
    if (d_model % n_heads != 0)
        throw std::invalid_argument("LMConfig: d_model must be divisible by n_heads");
}

ModelRole parse_role(const std::string& name) {
    if (name == "base_lm") return ModelRole::base_lm;
    if (name == "grounded") return ModelRole::grounded;
    if (name == "ungrounded") return ModelRole::ungrounded;
    if (name == "policy") return ModelRole::policy;
    throw std::invalid_argument("unknown model role: " + name);
}

std::string role_name(ModelRole role) {
    switch (role) {
        case ModelRole::base_lm: return "base_lm";
        case ModelRole::grounded: return "grounded";
        case ModelRole::ungrounded: return "ungrounded";
        case ModelRole::policy: return "policy";
    }
    throw std::logic_error("bad role");
}

bool role_uses_passages(ModelRole role) {
    return role == ModelRole::grounded || role == ModelRole::policy;
}

std::vector<int> encode_context(const std::vector<int>& query,
                                const std::vector<std::vector<int>>& passages, ModelRole role) {
    std::vector<int> ids;
    ids.push_back(text::Vocab::kBos);
    ids.insert(ids.end(), query.begin(), query.end());
    ids.push_back(text::Vocab::kSep);
    if (role_uses_passages(role)) {
        for (const auto& p : passages) {
            ids.insert(ids.end(), p.begin(), p.end());
            ids.push_back(text::Vocab::kSep);
        }
    }
    return ids;
}

SequenceEncoding encode_sequence(const std::vector<int>& query,
                                 const std::vector<std::vector<int>>& passages,
                                 const std::vector<int>& target, ModelRole role,
                                 int context_len) {
    SequenceEncoding enc;
    enc.ids = encode_context(query, passages, role);
    size_t ctx = enc.ids.size();
    enc.ids.insert(enc.ids.end(), target.begin(), target.end());
    enc.ids.push_back(text::Vocab::kEos);
    if (enc.ids.size() > size_t(context_len))
        throw std::invalid_argument("encode_sequence: length " + std::to_string(enc.ids.size()) +
                                    " exceeds context_len " + std::to_string(context_len));
    enc.loss_mask.assign(enc.ids.size(), 0);
    for (size_t i = ctx; i < enc.ids.size(); ++i) enc.loss_mask[i] = 1;
    return enc;
}

LMParams LMParams::skeleton(const LMConfig& cfg) {
    cfg.validate();
    LMParams p;
    p.cfg_ = cfg;
    size_t v = size_t(cfg.vocab_size), d = size_t(cfg.d_model), f = 4 * d;
    auto add = [&](const std::string& name, size_t r, size_t c) {
        p.index_.emplace(name, p.names_.size());
        p.names_.push_back(name);
        p.tensors_.emplace_back(r, c);
    };
    add("tok_emb", v, d);
    add("pos_emb", size_t(cfg.context_len), d);
    for (int l = 0; l < cfg.n_layers; ++l) {
        std::string pre = "layers." + std::to_string(l) + ".";
        add(pre + "ln1.g", 1, d);
        add(pre + "ln1.b", 1, d);
        add(pre + "attn.wq", d, d);
        add(pre + "attn.bq", 1, d);
        add(pre + "attn.wk", d, d);
        add(pre + "attn.bk", 1, d);
        add(pre + "attn.wv", d, d);
        add(pre + "attn.bv", 1, d);
        add(pre + "attn.wo", d, d);
        add(pre + "attn.bo", 1, d);
        add(pre + "ln2.g", 1, d);
        add(pre + "ln2.b", 1, d);
        add(pre + "ffn.w1", d, f);
        add(pre + "ffn.b1", 1, f);
        add(pre + "ffn.w2", f, d);
        add(pre + "ffn.b2", 1, d);
    }
    add("ln_f.g", 1, d);
    add("ln_f.b", 1, d);
    add("out.w", d, v);
    add("out.b", 1, v);
    return p;
}

LMParams LMParams::init(const LMConfig& cfg) {
    LMParams p = skeleton(cfg);
    Rng rng(cfg.seed);
    for (size_t i = 0; i < p.names_.size(); ++i) {
        const std::string& n = p.names_[i];
        bool is_gain = n.size() >= 2 && n.substr(n.size() - 2) == ".g" && n.find("ln") != std::string::npos;
        bool is_bias = !is_gain && (n.find(".b") != std::string::npos);
        Matrix& t = p.tensors_[i];
        if (is_gain) {
            std::fill(t.data.begin(), t.data.end(), 1.0);
        } else if (is_bias) {
            // biases start at zero, including the output projection bias
        } else {
            for (double& x : t.data) x = 0.02 * rng.next_normal();
        }
    }
    return p;
}

LMParams LMParams::zeros_like(const LMParams& other) { return skeleton(other.cfg_); }

Matrix& LMParams::tensor(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no tensor named " + name);
    return tensors_[it->second];
}

const Matrix& LMParams::tensor(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no tensor named " + name);
    return tensors_[it->second];
}

size_t LMParams::total_params() const {
    size_t n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
}

void LMParams::zero() {
    for (auto& t : tensors_) t.zero();
}

void LMParams::add_scaled(const LMParams& other, double s) {
    if (other.tensors_.size() != tensors_.size())
        throw std::invalid_argument("add_scaled: mismatched parameter sets");
    for (size_t i = 0; i < tensors_.size(); ++i) {
        if (tensors_[i].size() != other.tensors_[i].size())
            throw std::invalid_argument("add_scaled: mismatched tensor " + names_[i]);
        for (size_t j = 0; j < tensors_[i].size(); ++j)
            tensors_[i].data[j] += s * other.tensors_[i].data[j];
    }
}

bool LMParams::all_finite(std::string* offending) const {
    for (size_t i = 0; i < tensors_.size(); ++i)
        for (double x : tensors_[i].data)
            if (!std::isfinite(x)) {
                if (offending) *offending = names_[i];
                return false;
            }
    return true;
}

void LMParams::save(const std::string& path) const {
    json header;
    header["config"] = {{"vocab_size", cfg_.vocab_size}, {"d_model", cfg_.d_model},
                        {"n_layers", cfg_.n_layers},     {"n_heads", cfg_.n_heads},
                        {"context_len", cfg_.context_len}, {"seed", cfg_.seed}};
    json tensors = json::array();
    size_t total = 0;
    for (size_t i = 0; i < tensors_.size(); ++i) {
        tensors.push_back(json{{"name", names_[i]},
                               {"rows", tensors_[i].rows},
                               {"cols", tensors_[i].cols}});
        total += tensors_[i].size();
    }
    header["tensors"] = tensors;
    header["total_values"] = total;

    uint64_t checksum = kFnvOffset;
    for (const auto& t : tensors_)
        for (double x : t.data) {
            unsigned char bytes[8];
            std::memcpy(bytes, &x, 8);
            for (unsigned char b : bytes) {
                checksum ^= b;
                checksum *= kFnvPrime;
            }
        }
    header["checksum"] = to_hex(checksum);

    std::string hdr = header.dump();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path);
    out.write(kMagic, sizeof(kMagic));
    uint32_t hlen = uint32_t(hdr.size());
    write_bytes(out, &hlen, 4);
    out.write(hdr.data(), std::streamsize(hdr.size()));
    for (const auto& t : tensors_)
        write_bytes(out, t.data.data(), t.data.size() * sizeof(double));
    if (!out) throw std::runtime_error("failed writing " + path);
}

LMParams LMParams::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    char magic[6];
    in.read(magic, 6);
    if (!in || std::memcmp(magic, kMagic, 6) != 0)
        throw std::runtime_error(path + ": not a checkpoint (bad magic)");
    uint32_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), 4);
    if (!in) throw std::runtime_error(path + ": truncated header");
    std::string hdr(hlen, '\0');
    in.read(hdr.data(), hlen);
    if (!in) throw std::runtime_error(path + ": truncated header");
    json header;
    try {
        header = json::parse(hdr);
    } catch (const std::exception& e) {
        throw std::runtime_error(path + ": corrupt header: " + e.what());
    }
    LMConfig cfg;
    const auto& jc = header.at("config");
    cfg.vocab_size = jc.at("vocab_size").get<int>();
    cfg.d_model = jc.at("d_model").get<int>();
    cfg.n_layers = jc.at("n_layers").get<int>();
    cfg.n_heads = jc.at("n_heads").get<int>();
    cfg.context_len = jc.at("context_len").get<int>();
    cfg.seed = jc.at("seed").get<uint64_t>();

    LMParams p = skeleton(cfg);
    const auto& jt = header.at("tensors");
    if (jt.size() != p.tensors_.size())
        throw std::runtime_error(path + ": tensor list does not match declared config");
    for (size_t i = 0; i < p.tensors_.size(); ++i) {
        if (jt[i].at("name").get<std::string>() != p.names_[i] ||
            jt[i].at("rows").get<size_t>() != p.tensors_[i].rows ||
            jt[i].at("cols").get<size_t>() != p.tensors_[i].cols)
            throw std::runtime_error(path + ": shape mismatch for tensor " + p.names_[i]);
    }
    uint64_t checksum = kFnvOffset;
    for (auto& t : p.tensors_) {
        in.read(reinterpret_cast<char*>(t.data.data()),
                std::streamsize(t.data.size() * sizeof(double)));
        if (!in) throw std::runtime_error(path + ": truncated tensor data");
        const auto* bytes = reinterpret_cast<const unsigned char*>(t.data.data());
        for (size_t b = 0; b < t.data.size() * sizeof(double); ++b) {
            checksum ^= bytes[b];
            checksum *= kFnvPrime;
        }
    }
    if (to_hex(checksum) != header.at("checksum").get<std::string>())
        throw std::runtime_error(path + ": checksum mismatch");
    return p;
}

Matrix forward(const LMParams& params, std::span<const int> ids, ForwardCache* cache) {
    const LMConfig& cfg = params.config();
    size_t L = ids.size();
    if (L == 0) throw std::invalid_argument("forward: empty input");
    if (L > size_t(cfg.context_len))
        throw std::invalid_argument("forward: sequence longer than context_len");
    size_t d = size_t(cfg.d_model);
    size_t H = size_t(cfg.n_heads), hd = d / H;
    double scale = 1.0 / std::sqrt(double(hd));

    const Matrix& tok_emb = params.tensor("tok_emb");
    const Matrix& pos_emb = params.tensor("pos_emb");
    Matrix x(L, d);
    for (size_t i = 0; i < L; ++i) {
        int id = ids[i];
        if (id < 0 || id >= cfg.vocab_size)
            throw std::invalid_argument("forward: token id out of range");
        const double* te = tok_emb.row(size_t(id));
        const double* pe = pos_emb.row(i);
        double* xr = x.row(i);
        for (size_t j = 0; j < d; ++j) xr[j] = te[j] + pe[j];
    }
    if (cache) {
        cache->ids.assign(ids.begin(), ids.end());
        cache->x0 = x;
        cache->layers.assign(size_t(cfg.n_layers), LayerCache{});
    }

    for (int l = 0; l < cfg.n_layers; ++l) {
        std::string pre = "layers." + std::to_string(l) + ".";
        LayerCache local;
        LayerCache& lc = cache ? cache->layers[size_t(l)] : local;
        lc.x_in = x;

        layer_norm(x, params.tensor(pre + "ln1.g"), params.tensor(pre + "ln1.b"), lc.ln1,
                   lc.mean1, lc.rstd1);

        matmul(lc.ln1, params.tensor(pre + "attn.wq"), lc.q);
        add_bias(lc.q, params.tensor(pre + "attn.bq"));
        matmul(lc.ln1, params.tensor(pre + "attn.wk"), lc.k);
        add_bias(lc.k, params.tensor(pre + "attn.bk"));
        matmul(lc.ln1, params.tensor(pre + "attn.wv"), lc.v);
        add_bias(lc.v, params.tensor(pre + "attn.bv"));

        lc.att.assign(H, Matrix());
        lc.att_out = Matrix(L, d);
        for (size_t h = 0; h < H; ++h) {
            size_t off = h * hd;
            Matrix& P = lc.att[h];
            P = Matrix(L, L);
            for (size_t i = 0; i < L; ++i) {
                const double* qi = lc.q.row(i) + off;
                double maxv = -1e300;
                for (size_t j = 0; j <= i; ++j) {
                    const double* kj = lc.k.row(j) + off;
                    double s = 0.0;
                    for (size_t c = 0; c < hd; ++c) s += qi[c] * kj[c];
                    s *= scale;
                    P(i, j) = s;
                    if (s > maxv) maxv = s;
                }
                double denom = 0.0;
                for (size_t j = 0; j <= i; ++j) {
                    double e = std::exp(P(i, j) - maxv);
                    P(i, j) = e;
                    denom += e;
                }
                for (size_t j = 0; j <= i; ++j) P(i, j) /= denom;
                // att_out row i, head slice = sum_j P(i,j) * v_j
                double* orow = lc.att_out.row(i) + off;
                for (size_t j = 0; j <= i; ++j) {
                    double p = P(i, j);
                    const double* vj = lc.v.row(j) + off;
                    for (size_t c = 0; c < hd; ++c) orow[c] += p * vj[c];
                }
            }
        }

        Matrix proj;
        matmul(lc.att_out, params.tensor(pre + "attn.wo"), proj);
        add_bias(proj, params.tensor(pre + "attn.bo"));
        lc.x_mid = lc.x_in;
        for (size_t i = 0; i < proj.size(); ++i) lc.x_mid.data[i] += proj.data[i];

        layer_norm(lc.x_mid, params.tensor(pre + "ln2.g"), params.tensor(pre + "ln2.b"), lc.ln2,
                   lc.mean2, lc.rstd2);
        matmul(lc.ln2, params.tensor(pre + "ffn.w1"), lc.f1);
        add_bias(lc.f1, params.tensor(pre + "ffn.b1"));
        lc.f2 = Matrix(lc.f1.rows, lc.f1.cols);
        for (size_t i = 0; i < lc.f1.size(); ++i) lc.f2.data[i] = gelu(lc.f1.data[i]);
        Matrix f3;
        matmul(lc.f2, params.tensor(pre + "ffn.w2"), f3);
        add_bias(f3, params.tensor(pre + "ffn.b2"));
        lc.x_out = lc.x_mid;
        for (size_t i = 0; i < f3.size(); ++i) lc.x_out.data[i] += f3.data[i];
        x = lc.x_out;
    }

    std::vector<double> mean_f, rstd_f;
    Matrix ln_f;
    layer_norm(x, params.tensor("ln_f.g"), params.tensor("ln_f.b"), ln_f, mean_f, rstd_f);
    if (cache) {
        cache->mean_f = mean_f;
        cache->rstd_f = rstd_f;
        cache->ln_f = ln_f;
    }
    Matrix logits;
    matmul(ln_f, params.tensor("out.w"), logits);
    add_bias(logits, params.tensor("out.b"));
    return logits;
}

DecodeState::DecodeState(const LMConfig& cfg)
    : k_(size_t(cfg.n_layers)), v_(size_t(cfg.n_layers)) {
    cfg.validate();
}

std::vector<double> forward_next(const LMParams& params, DecodeState& state, int token_id) {
    const LMConfig& cfg = params.config();
    if (state.k_.size() != size_t(cfg.n_layers))
        throw std::invalid_argument("forward_next: state built for a different model shape");
    size_t pos = state.length_;
    if (pos >= size_t(cfg.context_len))
        throw std::invalid_argument("forward_next: context window exhausted");
    if (token_id < 0 || token_id >= cfg.vocab_size)
        throw std::invalid_argument("forward_next: token id out of range");
    size_t d = size_t(cfg.d_model);
    size_t H = size_t(cfg.n_heads), hd = d / H;
    double scale = 1.0 / std::sqrt(double(hd));

    // Single-row mirrors of the batched helpers; identical loop order keeps
    // the arithmetic bit-for-bit equal to forward().
    auto row_matmul = [&](const std::vector<double>& a, const Matrix& b, std::vector<double>& out) {
        out.assign(b.cols, 0.0);
        for (size_t k = 0; k < b.rows; ++k) {
            double av = a[k];
            if (av == 0.0) continue;
            const double* brow = b.row(k);
            for (size_t j = 0; j < b.cols; ++j) out[j] += av * brow[j];
        }
    };
    auto row_ln = [&](const std::vector<double>& x, const Matrix& gain, const Matrix& bias,
                      std::vector<double>& y) {
        size_t n = x.size();
        double mu = 0.0;
        for (double v : x) mu += v;
        mu /= double(n);
        double var = 0.0;
        for (double v : x) {
            double dd = v - mu;
            var += dd * dd;
        }
        var /= double(n);
        double r = 1.0 / std::sqrt(var + kLnEps);
        y.resize(n);
        const double* g = gain.row(0);
        const double* b = bias.row(0);
        for (size_t j = 0; j < n; ++j) y[j] = g[j] * (x[j] - mu) * r + b[j];
    };

    std::vector<double> x(d);
    {
        const double* te = params.tensor("tok_emb").row(size_t(token_id));
        const double* pe = params.tensor("pos_emb").row(pos);
        for (size_t j = 0; j < d; ++j) x[j] = te[j] + pe[j];
    }

    std::vector<double> ln1, q, k, v, att_out(d), proj, ln2, f1, f3;
    for (int l = 0; l < cfg.n_layers; ++l) {
        std::string pre = "layers." + std::to_string(l) + ".";
        row_ln(x, params.tensor(pre + "ln1.g"), params.tensor(pre + "ln1.b"), ln1);
        row_matmul(ln1, params.tensor(pre + "attn.wq"), q);
        row_matmul(ln1, params.tensor(pre + "attn.wk"), k);
        row_matmul(ln1, params.tensor(pre + "attn.wv"), v);
        {
            const double* bq = params.tensor(pre + "attn.bq").row(0);
            const double* bk = params.tensor(pre + "attn.bk").row(0);
            const double* bv = params.tensor(pre + "attn.bv").row(0);
            for (size_t j = 0; j < d; ++j) {
                q[j] += bq[j];
                k[j] += bk[j];
                v[j] += bv[j];
            }
        }
        std::vector<double>& kcache = state.k_[size_t(l)];
        std::vector<double>& vcache = state.v_[size_t(l)];
        kcache.insert(kcache.end(), k.begin(), k.end());
        vcache.insert(vcache.end(), v.begin(), v.end());

        std::fill(att_out.begin(), att_out.end(), 0.0);
        std::vector<double> scores(pos + 1);
        for (size_t h = 0; h < H; ++h) {
            size_t off = h * hd;
            const double* qi = q.data() + off;
            double maxv = -1e300;
            for (size_t j = 0; j <= pos; ++j) {
                const double* kj = kcache.data() + j * d + off;
                double s = 0.0;
                for (size_t c = 0; c < hd; ++c) s += qi[c] * kj[c];
                s *= scale;
                scores[j] = s;
                if (s > maxv) maxv = s;
            }
            double denom = 0.0;
            for (size_t j = 0; j <= pos; ++j) {
                double e = std::exp(scores[j] - maxv);
                scores[j] = e;
                denom += e;
            }
            for (size_t j = 0; j <= pos; ++j) scores[j] /= denom;
            double* orow = att_out.data() + off;
            for (size_t j = 0; j <= pos; ++j) {
                double p = scores[j];
                const double* vj = vcache.data() + j * d + off;
                for (size_t c = 0; c < hd; ++c) orow[c] += p * vj[c];
            }
        }

        row_matmul(att_out, params.tensor(pre + "attn.wo"), proj);
        {
            const double* bo = params.tensor(pre + "attn.bo").row(0);
            for (size_t j = 0; j < d; ++j) x[j] += proj[j] + bo[j];
        }

        row_ln(x, params.tensor(pre + "ln2.g"), params.tensor(pre + "ln2.b"), ln2);
        row_matmul(ln2, params.tensor(pre + "ffn.w1"), f1);
        {
            const double* b1 = params.tensor(pre + "ffn.b1").row(0);
            for (size_t j = 0; j < f1.size(); ++j) f1[j] = gelu(f1[j] + b1[j]);
        }
        row_matmul(f1, params.tensor(pre + "ffn.w2"), f3);
        {
            const double* b2 = params.tensor(pre + "ffn.b2").row(0);
            for (size_t j = 0; j < d; ++j) x[j] += f3[j] + b2[j];
        }
    }

    std::vector<double> ln_f, logits;
    row_ln(x, params.tensor("ln_f.g"), params.tensor("ln_f.b"), ln_f);
    row_matmul(ln_f, params.tensor("out.w"), logits);
    {
        const double* b = params.tensor("out.b").row(0);
        for (size_t j = 0; j < logits.size(); ++j) logits[j] += b[j];
    }
    state.length_ = pos + 1;
    return logits;
}

void backward(const LMParams& params, const ForwardCache& cache, const Matrix& dlogits,
              LMParams& grads) {
    const LMConfig& cfg = params.config();
    size_t L = cache.ids.size();
    size_t d = size_t(cfg.d_model);
    size_t H = size_t(cfg.n_heads), hd = d / H;
    double scale = 1.0 / std::sqrt(double(hd));

    // output projection
    matmul_at_b_acc(cache.ln_f, dlogits, grads.tensor("out.w"));
    {
        Matrix& db = grads.tensor("out.b");
        for (size_t i = 0; i < L; ++i) {
            const double* dr = dlogits.row(i);
            for (size_t j = 0; j < dlogits.cols; ++j) db.row(0)[j] += dr[j];
        }
    }
    Matrix dln_f;
    matmul_a_bt(dlogits, params.tensor("out.w"), dln_f);

    const Matrix& x_last =
        cfg.n_layers > 0 ? cache.layers.back().x_out : cache.x0;
    Matrix dx(L, d);
    layer_norm_backward(x_last, params.tensor("ln_f.g"), cache.mean_f, cache.rstd_f, dln_f, dx,
                        grads.tensor("ln_f.g"), grads.tensor("ln_f.b"));

    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        std::string pre = "layers." + std::to_string(l) + ".";
        const LayerCache& lc = cache.layers[size_t(l)];

        // FFN branch: x_out = x_mid + gelu(ln2(x_mid) W1 + b1) W2 + b2
        Matrix df3 = dx;  // gradient into the ffn output
        matmul_at_b_acc(lc.f2, df3, grads.tensor(pre + "ffn.w2"));
        {
            Matrix& db = grads.tensor(pre + "ffn.b2");
            for (size_t i = 0; i < L; ++i)
                for (size_t j = 0; j < d; ++j) db.row(0)[j] += df3(i, j);
        }
        Matrix df2;
        matmul_a_bt(df3, params.tensor(pre + "ffn.w2"), df2);
        Matrix df1(df2.rows, df2.cols);
        for (size_t i = 0; i < df2.size(); ++i)
            df1.data[i] = df2.data[i] * gelu_grad(lc.f1.data[i]);
        matmul_at_b_acc(lc.ln2, df1, grads.tensor(pre + "ffn.w1"));
        {
            Matrix& db = grads.tensor(pre + "ffn.b1");
            for (size_t i = 0; i < df1.rows; ++i)
                for (size_t j = 0; j < df1.cols; ++j) db.row(0)[j] += df1(i, j);
        }
        Matrix dln2;
        matmul_a_bt(df1, params.tensor(pre + "ffn.w1"), dln2);
        // dx currently holds d/dx_out; residual passes it through to x_mid.
        layer_norm_backward(lc.x_mid, params.tensor(pre + "ln2.g"), lc.mean2, lc.rstd2, dln2, dx,
                            grads.tensor(pre + "ln2.g"), grads.tensor(pre + "ln2.b"));

        // Attention branch: x_mid = x_in + att_out Wo + bo
        Matrix datt_out;
        matmul_a_bt(dx, params.tensor(pre + "attn.wo"), datt_out);
        matmul_at_b_acc(lc.att_out, dx, grads.tensor(pre + "attn.wo"));
        {
            Matrix& db = grads.tensor(pre + "attn.bo");
            for (size_t i = 0; i < L; ++i)
                for (size_t j = 0; j < d; ++j) db.row(0)[j] += dx(i, j);
        }

        Matrix dq(L, d), dk(L, d), dv(L, d);
        for (size_t h = 0; h < H; ++h) {
            size_t off = h * hd;
            const Matrix& P = lc.att[h];
            for (size_t i = 0; i < L; ++i) {
                const double* doh = datt_out.row(i) + off;
                // dP(i,j) = dOh(i) . v_j ; dv_j += P(i,j) * dOh(i)
                double dot_sum = 0.0;  // sum_j dP(i,j) P(i,j)
                std::vector<double> dp(i + 1);
                for (size_t j = 0; j <= i; ++j) {
                    const double* vj = lc.v.row(j) + off;
                    double s = 0.0;
                    for (size_t c = 0; c < hd; ++c) s += doh[c] * vj[c];
                    dp[j] = s;
                    dot_sum += s * P(i, j);
                    double* dvj = dv.row(j) + off;
                    double p = P(i, j);
                    for (size_t c = 0; c < hd; ++c) dvj[c] += p * doh[c];
                }
                // softmax backward, then scores -> q,k
                const double* qi = lc.q.row(i) + off;
                double* dqi = dq.row(i) + off;
                for (size_t j = 0; j <= i; ++j) {
                    double ds = P(i, j) * (dp[j] - dot_sum) * scale;
                    const double* kj = lc.k.row(j) + off;
                    double* dkj = dk.row(j) + off;
                    for (size_t c = 0; c < hd; ++c) {
                        dqi[c] += ds * kj[c];
                        dkj[c] += ds * qi[c];
                    }
                }
            }
        }

        Matrix dln1(L, d);
        {
            Matrix tmp;
            matmul_a_bt(dq, params.tensor(pre + "attn.wq"), tmp);
            for (size_t i = 0; i < tmp.size(); ++i) dln1.data[i] += tmp.data[i];
            matmul_a_bt(dk, params.tensor(pre + "attn.wk"), tmp);
            for (size_t i = 0; i < tmp.size(); ++i) dln1.data[i] += tmp.data[i];
            matmul_a_bt(dv, params.tensor(pre + "attn.wv"), tmp);
            for (size_t i = 0; i < tmp.size(); ++i) dln1.data[i] += tmp.data[i];
        }
        matmul_at_b_acc(lc.ln1, dq, grads.tensor(pre + "attn.wq"));
        matmul_at_b_acc(lc.ln1, dk, grads.tensor(pre + "attn.wk"));
        matmul_at_b_acc(lc.ln1, dv, grads.tensor(pre + "attn.wv"));
        {
            Matrix& dbq = grads.tensor(pre + "attn.bq");
            Matrix& dbk = grads.tensor(pre + "attn.bk");
            Matrix& dbv = grads.tensor(pre + "attn.bv");
            for (size_t i = 0; i < L; ++i)
                for (size_t j = 0; j < d; ++j) {
                    dbq.row(0)[j] += dq(i, j);
                    dbk.row(0)[j] += dk(i, j);
                    dbv.row(0)[j] += dv(i, j);
                }
        }
        layer_norm_backward(lc.x_in, params.tensor(pre + "ln1.g"), lc.mean1, lc.rstd1, dln1, dx,
                            grads.tensor(pre + "ln1.g"), grads.tensor(pre + "ln1.b"));
    }

    Matrix& dtok = grads.tensor("tok_emb");
    Matrix& dpos = grads.tensor("pos_emb");
    for (size_t i = 0; i < L; ++i) {
        const double* dr = dx.row(i);
        double* tr = dtok.row(size_t(cache.ids[i]));
        double* pr = dpos.row(i);
        for (size_t j = 0; j < d; ++j) {
            tr[j] += dr[j];
            pr[j] += dr[j];
        }
    }
}

double masked_log_prob(const LMParams& params, const SequenceEncoding& enc, double coeff,
                       LMParams* grads) {
    ForwardCache cache;
    Matrix logits = forward(params, enc.ids, grads ? &cache : nullptr);
    size_t L = enc.ids.size(), V = logits.cols;
    double total = 0.0;
    Matrix dlogits;
    if (grads) dlogits = Matrix(L, V);
    for (size_t i = 1; i < L; ++i) {
        if (!enc.loss_mask[i]) continue;
        const double* row = logits.row(i - 1);
        double maxv = row[0];
        for (size_t j = 1; j < V; ++j) maxv = std::max(maxv, row[j]);
        double denom = 0.0;
        for (size_t j = 0; j < V; ++j) denom += std::exp(row[j] - maxv);
        double lse = maxv + std::log(denom);
        int target = enc.ids[i];
        total += row[size_t(target)] - lse;
        if (grads) {
            double* drow = dlogits.row(i - 1);
            for (size_t j = 0; j < V; ++j)
                drow[j] -= coeff * std::exp(row[j] - lse);  // -coeff * softmax
            drow[size_t(target)] += coeff;
        }
    }
    if (grads) backward(params, cache, dlogits, *grads);
    return total;
}

double sequence_log_prob(const LMParams& params, std::span<const int> context,
                         std::span<const int> target) {
    if (target.empty()) return 0.0;
    SequenceEncoding enc;
    enc.ids.assign(context.begin(), context.end());
    enc.ids.insert(enc.ids.end(), target.begin(), target.end());
    enc.loss_mask.assign(enc.ids.size(), 0);
    for (size_t i = context.size(); i < enc.ids.size(); ++i) enc.loss_mask[i] = 1;
    if (context.empty())
        throw std::invalid_argument("sequence_log_prob: context must not be empty");
    return masked_log_prob(params, enc, 0.0, nullptr);
}

}  // namespace rac::lm
