#pragma once

#include <phds/checkpoint.hpp>
#include <phds/evaluator.hpp>

#include <cmath>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

namespace phds {

enum class FreezeSubset { none, gate_only, expert_only, attention_only, expert_and_gate };

inline std::string to_string(FreezeSubset s) {
    switch (s) {
        case FreezeSubset::none: return "none";
        case FreezeSubset::gate_only: return "gate_only";
        case FreezeSubset::expert_only: return "expert_only";
        case FreezeSubset::attention_only: return "attention_only";
        case FreezeSubset::expert_and_gate: return "expert_and_gate";
    }
    throw ConfigError("freeze subset: unknown enum value");
}

inline FreezeSubset freeze_subset_from_string(const std::string& s) {
    if (s == "none") return FreezeSubset::none;
    if (s == "gate_only") return FreezeSubset::gate_only;
    if (s == "expert_only") return FreezeSubset::expert_only;
    if (s == "attention_only") return FreezeSubset::attention_only;
    if (s == "expert_and_gate") return FreezeSubset::expert_and_gate;
    throw ConfigError("freeze subset: unknown name '" + s + "'");
}

struct TrainConfig {
    SparsitySchedule schedule;
    double lb_coefficient = 0.01;
    double learning_rate = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double weight_decay = 0.1;
    double grad_clip = 1.0;
    int64_t total_steps = 1000;
    int64_t eval_every = 200;
    int64_t burn_in_steps = 0;
    int64_t batch_size = 8;
    int64_t seq_len = 64;
    FreezeSubset freeze_subset = FreezeSubset::none;
    uint64_t seed = 0;
};

inline void validate(const TrainConfig& c) {
    validate(c.schedule);
    if (c.lb_coefficient < 0) throw ConfigError("train config: lb_coefficient must be >= 0");
    if (c.learning_rate <= 0) throw ConfigError("train config: learning_rate must be > 0");
    if (c.beta1 < 0 || c.beta1 >= 1 || c.beta2 < 0 || c.beta2 >= 1)
        throw ConfigError("train config: betas must lie in [0, 1)");
    if (c.weight_decay < 0) throw ConfigError("train config: weight_decay must be >= 0");
    if (c.grad_clip <= 0) throw ConfigError("train config: grad_clip must be > 0");
    if (c.total_steps < 1) throw ConfigError("train config: total_steps must be >= 1");
    if (c.eval_every < 1) throw ConfigError("train config: eval_every must be >= 1");
    if (c.burn_in_steps < 0 || c.burn_in_steps >= c.total_steps)
        throw ConfigError("train config: burn_in_steps must lie in [0, total_steps)");
    if (c.batch_size < 1 || c.seq_len < 1)
        throw ConfigError("train config: batch_size and seq_len must be >= 1");
}

struct ParamPartition {
    std::vector<ParamRef> trainable;
    std::vector<ParamRef> frozen;
};

inline ParamPartition apply_freeze_mask(MoeModel& model, FreezeSubset subset) {
    auto wanted = [&](ParamKind k) {
        switch (subset) {
            case FreezeSubset::none: return true;
            case FreezeSubset::gate_only: return k == ParamKind::router;
            case FreezeSubset::expert_only: return k == ParamKind::expert;
            case FreezeSubset::attention_only: return k == ParamKind::attention;
            case FreezeSubset::expert_and_gate:
                return k == ParamKind::router || k == ParamKind::expert;
        }
        throw ConfigError("freeze subset: unknown enum value");
    };
    ParamPartition part;
    for (auto& p : model.parameters())
        (wanted(p.kind) ? part.trainable : part.frozen).push_back(p);
    return part;
}

inline int64_t param_count(const std::vector<ParamRef>& params) {
    int64_t n = 0;
    for (const auto& p : params) n += int64_t(p.tensor.data().size());
    return n;
}

// Decoupled weight decay optimizer. Moment buffers and the bias-correction
// step count live per parameter name, so parameters outside a step's active
// set (frozen tensors, other-k bank entries) keep their state untouched.
class AdamW {
public:
    AdamW(double lr, double beta1, double beta2, double weight_decay, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), wd_(weight_decay), eps_(eps) {}

    void step(std::vector<ParamRef>& params) {
        for (auto& p : params) {
            auto& data = p.tensor.data();
            const auto& grad = p.tensor.grad();
            auto& st = state_[p.name];
            if (st.m.empty()) {
                st.m.assign(data.size(), 0.0);
                st.v.assign(data.size(), 0.0);
            }
            ++st.t;
            const double bc1 = 1.0 - std::pow(beta1_, double(st.t));
            const double bc2 = 1.0 - std::pow(beta2_, double(st.t));
            const bool decay = wd_ > 0 && p.tensor.shape().size() >= 2;
            for (size_t i = 0; i < data.size(); ++i) {
                const double g = double(grad[i]);
                st.m[i] = beta1_ * st.m[i] + (1.0 - beta1_) * g;
                st.v[i] = beta2_ * st.v[i] + (1.0 - beta2_) * g * g;
                double upd = (st.m[i] / bc1) / (std::sqrt(st.v[i] / bc2) + eps_);
                if (decay) upd += wd_ * double(data[i]);
                data[i] = float(double(data[i]) - lr_ * upd);
            }
        }
    }

private:
    struct State {
        std::vector<double> m, v;
        int64_t t = 0;
    };
    double lr_, beta1_, beta2_, wd_, eps_;
    std::unordered_map<std::string, State> state_;
};

struct StepStats {
    int64_t step = 0;
    int k = 0;
    double lm_loss = 0;
    double lb_loss = 0;
    double total_loss = 0;
};

namespace train_detail {

inline double global_grad_norm(const std::vector<ParamRef>& params) {
    double sq = 0;
    for (const auto& p : params)
        for (float g : p.tensor.grad()) sq += double(g) * double(g);
    return std::sqrt(sq);
}

inline void scale_grads(std::vector<ParamRef>& params, double s) {
    for (auto& p : params)
        for (float& g : p.tensor.grad()) g = float(double(g) * s);
}

// Trainable parameters that this step's k actually owns: everything except
// bank entries declared for a different k.
inline std::vector<ParamRef> active_set(const std::vector<ParamRef>& trainable, int k) {
    std::vector<ParamRef> out;
    out.reserve(trainable.size());
    for (const auto& p : trainable)
        if (p.bank_k < 0 || p.bank_k == k) out.push_back(p);
    return out;
}

}  // namespace train_detail

inline StepStats train_step(MoeModel& model, AdamW& opt, std::vector<ParamRef>& all_params,
                            const std::vector<ParamRef>& trainable, const Batch& batch, int k,
                            double lb_coefficient, double grad_clip, int64_t step_id,
                            int64_t batch_id) {
    StepStats stats;
    stats.step = step_id;
    stats.k = k;
    try {
        for (auto& p : all_params) p.tensor.zero_grad();
        auto res = model.forward(batch.inputs, batch.seq_len, k, k);
        auto lm = cross_entropy(res.logits, batch.targets);
        Tensor total = lb_coefficient != 0.0 ? add(lm, scale(res.lb_loss, float(lb_coefficient)))
                                             : lm;
        backward(total);
        stats.lm_loss = double(lm.item());
        stats.lb_loss = double(res.lb_loss.item());
        stats.total_loss = double(total.item());
    } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " (step " + std::to_string(step_id) + ", k " +
                           std::to_string(k) + ", batch " + std::to_string(batch_id) + ")");
    }

    auto active = train_detail::active_set(trainable, k);
    const double norm = train_detail::global_grad_norm(active);
    if (grad_clip > 0 && norm > grad_clip)
        train_detail::scale_grads(active, grad_clip / norm);
    opt.step(active);
    return stats;
}

struct EvalPoint {
    int64_t step = 0;
    std::map<int, EvalReport> metrics;
    std::string path;
};

struct SelectionRule {
    enum class Kind { best_at_k, best_avg };
    Kind kind = Kind::best_at_k;
    int k = 0;                 // best_at_k target
    std::vector<int> k_set;    // best_avg range
};

namespace train_detail {

inline const EvalReport& metric_at(const EvalPoint& rec, int k) {
    auto it = rec.metrics.find(k);
    if (it == rec.metrics.end())
        throw DomainError("selection: record at step " + std::to_string(rec.step) +
                          " lacks metrics for k=" + std::to_string(k));
    return it->second;
}

struct Score {
    double accuracy;
    double perplexity;
};

inline Score score_of(const EvalPoint& rec, const SelectionRule& rule) {
    if (rule.kind == SelectionRule::Kind::best_at_k) {
        const auto& m = metric_at(rec, rule.k);
        return {m.mc_accuracy, m.perplexity};
    }
    if (rule.k_set.empty()) throw DomainError("selection: best_avg needs a non-empty k set");
    double acc = 0, ppl = 0;
    for (int k : rule.k_set) {
        const auto& m = metric_at(rec, k);
        acc += m.mc_accuracy;
        ppl += m.perplexity;
    }
    return {acc / double(rule.k_set.size()), ppl / double(rule.k_set.size())};
}

}  // namespace train_detail

// Highest accuracy among records at or past burn-in; ties fall to lower
// perplexity, then to the later step.
inline const EvalPoint& select_checkpoint(const std::vector<EvalPoint>& records,
                                          const SelectionRule& rule, int64_t burn_in_steps) {
    const EvalPoint* best = nullptr;
    train_detail::Score best_score{0, 0};
    for (const auto& rec : records) {
        if (rec.step < burn_in_steps) continue;
        const auto s = train_detail::score_of(rec, rule);
        if (!best || s.accuracy > best_score.accuracy ||
            (s.accuracy == best_score.accuracy &&
             (s.perplexity < best_score.perplexity ||
              (s.perplexity == best_score.perplexity && rec.step > best->step)))) {
            best = &rec;
            best_score = s;
        }
    }
    if (!best) throw DomainError("selection: no records at or past burn-in");
    return *best;
}

struct FitOptions {
    std::string out_dir;            // empty disables checkpoint files
    std::string tag = "model";
    EvalDataset eval_ds;
    std::vector<int> eval_ks;
    SelectionRule selection;
    bool keep_history = false;
};

struct FitResult {
    std::vector<EvalPoint> records;
    size_t selected = 0;
    std::string selected_path;
    std::vector<StepStats> history;
    double final_lm_loss = 0;
};

inline FitResult fit(MoeModel& model, const Corpus& corpus, const TrainConfig& tc,
                     const FitOptions& opts) {
    validate(tc);
    if (tc.schedule.k_pre != model.config().k_pre)
        throw ConfigError("fit: schedule k_pre does not match the model");
    std::vector<int> bank_ks = tc.schedule.k_train_set;
    bank_ks.push_back(tc.schedule.k_pre);
    model.ensure_bank_entries(bank_ks);

    auto part = apply_freeze_mask(model, tc.freeze_subset);
    auto all_params = model.parameters();
    AdamW opt(tc.learning_rate, tc.beta1, tc.beta2, tc.weight_decay);

    FitResult result;
    int64_t epoch = 0;
    BatchStream stream(corpus, tc.seq_len, tc.batch_size, tc.seed, epoch);
    if (stream.size() < 1) throw DomainError("fit: corpus yields no training batches");

    int64_t batch_in_epoch = 0;
    for (int64_t s = 0; s < tc.total_steps; ++s) {
        if (batch_in_epoch == stream.size()) {
            ++epoch;
            stream = BatchStream(corpus, tc.seq_len, tc.batch_size, tc.seed, epoch);
            batch_in_epoch = 0;
        }
        const int k = sample_k(tc.schedule, s, tc.seed);
        const Batch batch = stream.get(batch_in_epoch);
        auto stats = train_step(model, opt, all_params, part.trainable, batch, k,
                                tc.lb_coefficient, tc.grad_clip, s, batch_in_epoch);
        ++batch_in_epoch;
        result.final_lm_loss = stats.lm_loss;
        if (opts.keep_history) result.history.push_back(stats);

        const int64_t done = s + 1;
        if (done % tc.eval_every == 0 || done == tc.total_steps) {
            EvalPoint rec;
            rec.step = done;
            for (int k_ev : opts.eval_ks)
                rec.metrics.emplace(k_ev, evaluate(model, opts.eval_ds, k_ev));
            if (!opts.out_dir.empty()) {
                CheckpointMeta meta;
                meta.config = model.config();
                meta.step = done;
                meta.schedule = tc.schedule;
                meta.rng_seed = tc.seed;
                rec.path = opts.out_dir + "/" + opts.tag + "_step" + std::to_string(done) +
                           ".phds";
                save_checkpoint(model, meta, rec.path);
            }
            result.records.push_back(std::move(rec));
        }
    }

    if (!opts.eval_ks.empty()) {
        const auto& chosen = select_checkpoint(result.records, opts.selection, tc.burn_in_steps);
        result.selected = size_t(&chosen - result.records.data());
        result.selected_path = chosen.path;
    }
    return result;
}

}  // namespace phds
