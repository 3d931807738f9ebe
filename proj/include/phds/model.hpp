#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "phds/errors.hpp"
#include "phds/rng.hpp"
#include "phds/tensor.hpp"

namespace phds {

enum class RouterNorm { unnormalized_topk_softmax, normalized_softmax_k };

inline std::string to_string(RouterNorm r) {
    return r == RouterNorm::unnormalized_topk_softmax ? "unnormalized_topk_softmax"
                                                      : "normalized_softmax_k";
}

inline RouterNorm router_norm_from_string(const std::string& s) {
    if (s == "unnormalized_topk_softmax") return RouterNorm::unnormalized_topk_softmax;
    if (s == "normalized_softmax_k") return RouterNorm::normalized_softmax_k;
    throw ConfigError("unknown router_norm: " + s);
}

struct ModelConfig {
    int64_t n_layers = 2;
    int64_t d_model = 32;
    int64_t n_heads = 2;
    int64_t n_experts = 4;
    int64_t d_expert = 64;
    int k_pre = 2;
    double epsilon = 1e-6;
    RouterNorm router_norm = RouterNorm::unnormalized_topk_softmax;
    int64_t vocab_size = 258;
    int64_t context_len = 64;
    int ffn_matrices_per_expert = 3;
};

inline void validate(const ModelConfig& c) {
    if (c.n_layers < 1 || c.d_model < 1 || c.n_heads < 1 || c.n_experts < 1 || c.d_expert < 1 ||
        c.vocab_size < 2 || c.context_len < 1)
        throw ConfigError("model config: all dimensions must be positive");
    if (c.k_pre < 1 || c.k_pre > c.n_experts)
        throw ConfigError("model config: k_pre must satisfy 1 <= k_pre <= n_experts");
    if (c.epsilon < 0) throw ConfigError("model config: epsilon must be >= 0");
    if (c.d_model % c.n_heads != 0)
        throw ConfigError("model config: d_model must be divisible by n_heads");
    if (c.ffn_matrices_per_expert != 2 && c.ffn_matrices_per_expert != 3)
        throw ConfigError("model config: ffn_matrices_per_expert must be 2 or 3");
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"n_layers", c.n_layers},
                       {"d_model", c.d_model},
                       {"n_heads", c.n_heads},
                       {"n_experts", c.n_experts},
                       {"d_expert", c.d_expert},
                       {"k_pre", c.k_pre},
                       {"epsilon", c.epsilon},
                       {"router_norm", to_string(c.router_norm)},
                       {"vocab_size", c.vocab_size},
                       {"context_len", c.context_len},
                       {"ffn_matrices_per_expert", c.ffn_matrices_per_expert}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    j.at("n_layers").get_to(c.n_layers);
    j.at("d_model").get_to(c.d_model);
    j.at("n_heads").get_to(c.n_heads);
    j.at("n_experts").get_to(c.n_experts);
    j.at("d_expert").get_to(c.d_expert);
    j.at("k_pre").get_to(c.k_pre);
    j.at("epsilon").get_to(c.epsilon);
    c.router_norm = router_norm_from_string(j.at("router_norm").get<std::string>());
    j.at("vocab_size").get_to(c.vocab_size);
    j.at("context_len").get_to(c.context_len);
    j.at("ffn_matrices_per_expert").get_to(c.ffn_matrices_per_expert);
}

// ---------------------------------------------------------------------------
// Parameter / FLOP counts
// ---------------------------------------------------------------------------

struct CostReport {
    int64_t active_params = 0;
    int64_t flops = 0;  // per token, forward
};

inline int64_t active_params(const ModelConfig& c, int k) {
    if (k < 1 || k > c.n_experts)
        throw DomainError("active_params: k=" + std::to_string(k) + " out of range");
    const int64_t emb = c.vocab_size * c.d_model;  // tied in/out embedding, counted once
    const int64_t attn = c.n_layers * 4 * c.d_model * c.d_model;
    const int64_t router = c.n_layers * c.d_model * c.n_experts;
    const int64_t ffn =
        c.n_layers * int64_t(k) * c.ffn_matrices_per_expert * c.d_model * c.d_expert;
    return emb + attn + router + ffn;
}

inline CostReport flops_per_token(const ModelConfig& c, int k) {
    CostReport r;
    r.active_params = active_params(c, k);
    r.flops = 2 * r.active_params + c.n_layers * 4 * c.context_len * c.d_model;
    return r;
}

// ---------------------------------------------------------------------------
// Router
// ---------------------------------------------------------------------------

template <typename S>
struct RouterDecisionT {
    TensorT<S> probs;  // T x E raw gate probabilities
    TensorT<S> gates;  // T x E after masking (and renormalization if configured)
    std::vector<std::vector<int>> topk_pre;
    std::vector<std::vector<int>> topk_train;
    int k_train = 0;
    int k_pre = 0;
};

using RouterDecision = RouterDecisionT<float>;

// The soft mask: keep p_j inside the top-k_train, epsilon on the remainder of
// the top-k_pre band, zero outside. Gradients reach the router only through
// the kept entries (and, in normalized mode, the shared denominator).
// allow_k_above_pre exists solely for forced-collapse evaluations.
template <typename S>
RouterDecisionT<S> route(const TensorT<S>& h, const TensorT<S>& w_r, int k_train,
                         const ModelConfig& cfg, bool allow_k_above_pre = false) {
    if (k_train < 1) throw DomainError("route: k_train must be >= 1");
    if (!allow_k_above_pre && k_train > cfg.k_pre)
        throw SparsityError("route: k_train=" + std::to_string(k_train) + " exceeds k_pre=" +
                            std::to_string(cfg.k_pre));
    if (k_train > cfg.n_experts)
        throw DomainError("route: k_train exceeds n_experts");

    RouterDecisionT<S> dec;
    dec.k_train = k_train;
    dec.k_pre = cfg.k_pre;
    dec.probs = softmax(matmul(h, w_r));
    const int64_t t = dec.probs.shape()[0];
    const int64_t e = dec.probs.shape()[1];
    dec.topk_train = top_k_indices(dec.probs, k_train);
    dec.topk_pre = top_k_indices(dec.probs, cfg.k_pre);

    std::vector<S> keep(size_t(t * e), S(0));
    std::vector<S> band(size_t(t * e), S(0));
    for (int64_t i = 0; i < t; ++i) {
        for (int j : dec.topk_pre[size_t(i)]) band[i * e + j] = S(cfg.epsilon);
        for (int j : dec.topk_train[size_t(i)]) {
            keep[i * e + j] = S(1);
            band[i * e + j] = S(0);
        }
    }
    auto mask = TensorT<S>::from_vector({t, e}, std::move(keep));
    auto eps_mask = TensorT<S>::from_vector({t, e}, std::move(band));
    auto masked = add(mul(dec.probs, mask), eps_mask);
    if (cfg.router_norm == RouterNorm::normalized_softmax_k)
        dec.gates = div_rows(masked, row_sum(masked));
    else
        dec.gates = masked;
    return dec;
}

// ---------------------------------------------------------------------------
// Experts and per-k auxiliary state
// ---------------------------------------------------------------------------

template <typename S>
struct ExpertT {
    TensorT<S> w1;  // d_model x d_expert
    TensorT<S> w3;  // gate branch, present only with 3-matrix FFNs
    TensorT<S> w2;  // d_expert x d_model
};

using Expert = ExpertT<float>;

template <typename S>
TensorT<S> expert_forward(const ExpertT<S>& ex, const TensorT<S>& x, int ffn_matrices) {
    auto a = silu(matmul(x, ex.w1));
    if (ffn_matrices == 3) a = mul(a, matmul(x, ex.w3));
    return matmul(a, ex.w2);
}

// The bare gate-weighted expert mixture; each expert runs only on the token
// rows where its gate is nonzero.
template <typename S>
TensorT<S> moe_mixture(const TensorT<S>& h, const std::vector<ExpertT<S>>& experts,
                       const RouterDecisionT<S>& dec, int ffn_matrices) {
    const int64_t t = h.shape()[0];
    const int64_t d = h.shape()[1];
    const int64_t e = int64_t(experts.size());
    auto out = TensorT<S>::zeros({t, d});
    for (int64_t j = 0; j < e; ++j) {
        std::vector<int64_t> idx;
        for (int64_t i = 0; i < t; ++i)
            if (dec.gates.data()[i * e + j] != S(0)) idx.push_back(i);
        if (idx.empty()) continue;
        auto sub = take_rows(h, idx);
        auto w = take_elems(dec.gates, idx, j);
        auto y = expert_forward(experts[size_t(j)], sub, ffn_matrices);
        out = scatter_add_rows(out, mul_rows(y, w), idx);
    }
    return out;
}

struct LbAccumulator {
    std::vector<double> f_sum;
    std::vector<double> p_sum;
    int64_t batches = 0;
};

struct KEntry {
    Tensor ln_scale;
    Tensor ln_offset;
    LbAccumulator lb;
};

// Per-layer map from declared k to that k's layernorm parameters and
// load-balance accumulator. New entries are deep copies of the k_pre entry,
// so distinct k never share storage.
class KAuxBank {
public:
    void init(int k_pre, int64_t d) {
        k_pre_ = k_pre;
        d_ = d;
        KEntry e;
        e.ln_scale = Tensor::full({d}, 1.0f, true);
        e.ln_offset = Tensor::zeros({d}, true);
        entries_.emplace(k_pre, std::move(e));
    }

    void ensure(int k) {
        if (entries_.count(k)) return;
        const KEntry& src = entries_.at(k_pre_);
        KEntry e;
        e.ln_scale = Tensor::from_vector({d_}, src.ln_scale.data(), true);
        e.ln_offset = Tensor::from_vector({d_}, src.ln_offset.data(), true);
        e.lb = src.lb;
        entries_.emplace(k, std::move(e));
    }

    bool has(int k) const { return entries_.count(k) > 0; }

    KEntry& entry(int k) {
        auto it = entries_.find(k);
        if (it == entries_.end())
            throw ConfigError("k-aux bank: no entry for k=" + std::to_string(k));
        return it->second;
    }

    std::map<int, KEntry>& all() { return entries_; }
    const std::map<int, KEntry>& all() const { return entries_; }
    int k_pre() const { return k_pre_; }

private:
    int k_pre_ = 0;
    int64_t d_ = 0;
    std::map<int, KEntry> entries_;
};

// Gate-weighted mixture over the experts with nonzero gates, followed by the
// k-specific output layernorm. Training passes also fold this batch's
// routing statistics into the k entry's accumulator; no-grad (evaluation)
// passes leave it frozen.
inline Tensor moe_forward(const Tensor& h, std::vector<Expert>& experts,
                          const RouterDecision& dec, KAuxBank& bank, int k,
                          int ffn_matrices) {
    KEntry& entry = bank.entry(k);
    const int64_t t = h.shape()[0];
    const int64_t e = int64_t(experts.size());

    auto out = layer_norm(moe_mixture(h, experts, dec, ffn_matrices), entry.ln_scale,
                          entry.ln_offset);

    if (grad_enabled() && t > 0) {
        auto& lb = entry.lb;
        if (lb.f_sum.empty()) {
            lb.f_sum.assign(size_t(e), 0.0);
            lb.p_sum.assign(size_t(e), 0.0);
        }
        for (int64_t i = 0; i < t; ++i)
            for (int j : dec.topk_train[size_t(i)])
                lb.f_sum[size_t(j)] += 1.0 / double(t * dec.k_train);
        for (int64_t j = 0; j < e; ++j) {
            double p = 0;
            for (int64_t i = 0; i < t; ++i) p += double(dec.probs.data()[i * e + j]);
            lb.p_sum[size_t(j)] += p / double(t);
        }
        lb.batches += 1;
    }
    return out;
}

// L = E * sum_i f_i * P_i with f_i the top-k assignment fraction (a constant)
// and P_i the mean raw gate probability (differentiable). Uniform routing
// gives exactly 1.
template <typename S>
TensorT<S> load_balance_loss(const RouterDecisionT<S>& dec, int k) {
    const int64_t t = dec.probs.shape()[0];
    const int64_t e = dec.probs.shape()[1];
    if (t == 0) throw DomainError("load_balance_loss: empty batch");
    if (k < 1) throw DomainError("load_balance_loss: k must be >= 1");
    std::vector<S> weights(size_t(e), S(0));
    for (int64_t i = 0; i < t; ++i)
        for (int j : dec.topk_train[size_t(i)])
            weights[size_t(j)] += S(e) / S(t * int64_t(k));
    return dot_const(col_mean(dec.probs), std::move(weights));
}

// ---------------------------------------------------------------------------
// The model
// ---------------------------------------------------------------------------

enum class ParamKind { embedding, attention, layernorm, router, expert, bank_layernorm };

struct ParamRef {
    std::string name;
    ParamKind kind;
    Tensor tensor;
    int bank_k = -1;  // set only for bank_layernorm entries
};

struct LayerParams {
    Tensor ln1_scale, ln1_offset;
    Tensor wq, wk, wv, wo;
    Tensor ln2_scale, ln2_offset;
    Tensor router;
    std::vector<Expert> experts;
    KAuxBank bank;
};

struct ForwardResult {
    Tensor logits;   // T x vocab
    Tensor lb_loss;  // scalar, mean over layers
    std::vector<RouterDecision> decisions;
};

class MoeModel {
public:
    MoeModel(ModelConfig cfg, uint64_t seed) : cfg_(cfg) {
        validate(cfg_);
        Rng rng(seed);
        const int64_t d = cfg_.d_model;
        const double base = 0.02;
        const double resid = base / std::sqrt(2.0 * double(cfg_.n_layers));
        embedding_ = Tensor::randn({cfg_.vocab_size, d}, rng, base, true);
        for (int64_t l = 0; l < cfg_.n_layers; ++l) {
            LayerParams lp;
            lp.ln1_scale = Tensor::full({d}, 1.0f, true);
            lp.ln1_offset = Tensor::zeros({d}, true);
            lp.wq = Tensor::randn({d, d}, rng, base, true);
            lp.wk = Tensor::randn({d, d}, rng, base, true);
            lp.wv = Tensor::randn({d, d}, rng, base, true);
            lp.wo = Tensor::randn({d, d}, rng, resid, true);
            lp.ln2_scale = Tensor::full({d}, 1.0f, true);
            lp.ln2_offset = Tensor::zeros({d}, true);
            lp.router = Tensor::randn({d, cfg_.n_experts}, rng, base, true);
            for (int64_t x = 0; x < cfg_.n_experts; ++x) {
                Expert ex;
                ex.w1 = Tensor::randn({d, cfg_.d_expert}, rng, base, true);
                if (cfg_.ffn_matrices_per_expert == 3)
                    ex.w3 = Tensor::randn({d, cfg_.d_expert}, rng, base, true);
                ex.w2 = Tensor::randn({cfg_.d_expert, d}, rng, resid, true);
                lp.experts.push_back(std::move(ex));
            }
            lp.bank.init(cfg_.k_pre, d);
            layers_.push_back(std::move(lp));
        }
        final_ln_scale_ = Tensor::full({d}, 1.0f, true);
        final_ln_offset_ = Tensor::zeros({d}, true);
    }

    const ModelConfig& config() const { return cfg_; }

    void set_epsilon(double eps) {
        if (eps < 0) throw ConfigError("model config: epsilon must be >= 0");
        cfg_.epsilon = eps;
    }

    std::vector<LayerParams>& layers() { return layers_; }
    Tensor& embedding() { return embedding_; }
    Tensor& final_ln_scale() { return final_ln_scale_; }
    Tensor& final_ln_offset() { return final_ln_offset_; }

    void ensure_bank_entries(const std::vector<int>& ks) {
        for (auto& lp : layers_)
            for (int k : ks) lp.bank.ensure(k);
    }

    // Route at k_route but draw per-k state from bank_k; callers that want
    // the usual behavior pass the same value twice.
    ForwardResult forward(const std::vector<int64_t>& tokens, int64_t seq_len, int k_route,
                          int bank_k, bool allow_k_above_pre = false) {
        if (seq_len < 1 || tokens.empty() || int64_t(tokens.size()) % seq_len != 0)
            throw ShapeError("forward: token count must be a positive multiple of seq_len");
        if (seq_len > cfg_.context_len)
            throw DomainError("forward: seq_len exceeds context_len");
        for (int64_t id : tokens)
            if (id < 0 || id >= cfg_.vocab_size) throw DomainError("forward: token id out of vocabulary");

        ForwardResult res;
        auto x = take_rows(embedding_, tokens);
        Tensor lb_total;
        for (auto& lp : layers_) {
            auto a = layer_norm(x, lp.ln1_scale, lp.ln1_offset);
            auto att = causal_attention(matmul(a, lp.wq), matmul(a, lp.wk), matmul(a, lp.wv),
                                        cfg_.n_heads, seq_len);
            x = add(x, matmul(att, lp.wo));
            auto m = layer_norm(x, lp.ln2_scale, lp.ln2_offset);
            auto dec = route(m, lp.router, k_route, cfg_, allow_k_above_pre);
            auto moe = moe_forward(m, lp.experts, dec, lp.bank, bank_k,
                                   cfg_.ffn_matrices_per_expert);
            x = add(x, moe);
            auto lb = load_balance_loss(dec, k_route);
            lb_total = lb_total.defined() ? add(lb_total, lb) : lb;
            res.decisions.push_back(std::move(dec));
        }
        res.logits = matmul_nt(layer_norm(x, final_ln_scale_, final_ln_offset_), embedding_);
        res.lb_loss = scale(lb_total, 1.0f / float(cfg_.n_layers));
        return res;
    }

    // Deterministic registry: stable names and ordering for the optimizer,
    // freeze masks, and checkpoints.
    std::vector<ParamRef> parameters() {
        std::vector<ParamRef> out;
        out.push_back({"embedding", ParamKind::embedding, embedding_, -1});
        out.push_back({"final_ln.scale", ParamKind::layernorm, final_ln_scale_, -1});
        out.push_back({"final_ln.offset", ParamKind::layernorm, final_ln_offset_, -1});
        for (size_t l = 0; l < layers_.size(); ++l) {
            auto& lp = layers_[l];
            const std::string p = "layers." + std::to_string(l) + ".";
            out.push_back({p + "ln1.scale", ParamKind::layernorm, lp.ln1_scale, -1});
            out.push_back({p + "ln1.offset", ParamKind::layernorm, lp.ln1_offset, -1});
            out.push_back({p + "attn.wq", ParamKind::attention, lp.wq, -1});
            out.push_back({p + "attn.wk", ParamKind::attention, lp.wk, -1});
            out.push_back({p + "attn.wv", ParamKind::attention, lp.wv, -1});
            out.push_back({p + "attn.wo", ParamKind::attention, lp.wo, -1});
            out.push_back({p + "ln2.scale", ParamKind::layernorm, lp.ln2_scale, -1});
            out.push_back({p + "ln2.offset", ParamKind::layernorm, lp.ln2_offset, -1});
            out.push_back({p + "router", ParamKind::router, lp.router, -1});
            for (size_t x = 0; x < lp.experts.size(); ++x) {
                const std::string pe = p + "experts." + std::to_string(x) + ".";
                out.push_back({pe + "w1", ParamKind::expert, lp.experts[x].w1, -1});
                if (lp.experts[x].w3.defined())
                    out.push_back({pe + "w3", ParamKind::expert, lp.experts[x].w3, -1});
                out.push_back({pe + "w2", ParamKind::expert, lp.experts[x].w2, -1});
            }
            for (auto& [k, entry] : lp.bank.all()) {
                const std::string pb = p + "bank.k" + std::to_string(k) + ".";
                out.push_back({pb + "ln_scale", ParamKind::bank_layernorm, entry.ln_scale, k});
                out.push_back({pb + "ln_offset", ParamKind::bank_layernorm, entry.ln_offset, k});
            }
        }
        return out;
    }

private:
    ModelConfig cfg_;
    Tensor embedding_;
    Tensor final_ln_scale_, final_ln_offset_;
    std::vector<LayerParams> layers_;
};

}  // namespace phds
