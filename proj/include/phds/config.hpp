#pragma once

#include <phds/trainer.hpp>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace phds {

struct DataConfig {
    std::string corpus_path;
    double val_fraction = 0.1;
    int64_t mc_items = 200;
    int mc_options = 4;
    int64_t mc_prompt_len = 32;
    int64_t mc_cont_len = 8;
    uint64_t mc_seed = 1234;
};

struct EvalConfig {
    int64_t seq_len = 64;
    int64_t lm_batch_size = 8;
    int64_t max_lm_batches = -1;
    int64_t mc_rows_per_chunk = 64;
};

// One declarative document drives every command; see the schema section of
// the README. The training block states its budget in tokens ("tokens") and
// its load-balance coefficient under the key "LB".
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    int64_t tokens = 0;  // 0 means total_steps was given directly
    DataConfig data;
    EvalConfig eval;
    std::string out_dir = "out";
    uint64_t seed = 0;
};

namespace config_detail {

inline void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                       const std::string& where) {
    if (!j.is_object()) throw ConfigError("config: '" + where + "' must be an object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key()))
            throw ConfigError("config: unknown key '" + it.key() + "' in " + where);
}

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) j.at(key).get_to(out);
}

inline void read_schedule(const nlohmann::json& j, SparsitySchedule& s) {
    check_keys(j, {"k_train_set", "anchor_k", "anneal_start_step", "anneal_ramp_steps"},
               "train.schedule");
    read(j, "k_train_set", s.k_train_set);
    if (j.contains("anchor_k") && !j.at("anchor_k").is_null())
        s.anchor_k = j.at("anchor_k").get<int>();
    if (j.contains("anneal_start_step") && !j.at("anneal_start_step").is_null())
        s.anneal_start_step = j.at("anneal_start_step").get<int64_t>();
    read(j, "anneal_ramp_steps", s.anneal_ramp_steps);
}

}  // namespace config_detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
    using namespace config_detail;
    check_keys(j, {"model", "train", "data", "eval", "out_dir", "seed"}, "the top level");
    RunConfig cfg;
    if (j.contains("model")) {
        const auto& m = j.at("model");
        check_keys(m,
                   {"n_layers", "d_model", "n_heads", "n_experts", "d_expert", "k_pre",
                    "epsilon", "router_norm", "vocab_size", "context_len",
                    "ffn_matrices_per_expert"},
                   "model");
        read(m, "n_layers", cfg.model.n_layers);
        read(m, "d_model", cfg.model.d_model);
        read(m, "n_heads", cfg.model.n_heads);
        read(m, "n_experts", cfg.model.n_experts);
        read(m, "d_expert", cfg.model.d_expert);
        read(m, "k_pre", cfg.model.k_pre);
        read(m, "epsilon", cfg.model.epsilon);
        read(m, "vocab_size", cfg.model.vocab_size);
        read(m, "context_len", cfg.model.context_len);
        read(m, "ffn_matrices_per_expert", cfg.model.ffn_matrices_per_expert);
        if (m.contains("router_norm"))
            cfg.model.router_norm = router_norm_from_string(m.at("router_norm").get<std::string>());
    }
    if (j.contains("train")) {
        const auto& t = j.at("train");
        check_keys(t,
                   {"tokens", "total_steps", "LB", "lb", "learning_rate", "beta1", "beta2",
                    "weight_decay", "grad_clip", "eval_every", "burn_in_steps", "batch_size",
                    "seq_len", "freeze_subset", "schedule"},
                   "train");
        if (t.contains("LB") && t.contains("lb"))
            throw ConfigError("config: give the load-balance coefficient once, as 'LB' or 'lb'");
        read(t, "LB", cfg.train.lb_coefficient);
        read(t, "lb", cfg.train.lb_coefficient);
        read(t, "learning_rate", cfg.train.learning_rate);
        read(t, "beta1", cfg.train.beta1);
        read(t, "beta2", cfg.train.beta2);
        read(t, "weight_decay", cfg.train.weight_decay);
        read(t, "grad_clip", cfg.train.grad_clip);
        read(t, "eval_every", cfg.train.eval_every);
        read(t, "burn_in_steps", cfg.train.burn_in_steps);
        read(t, "batch_size", cfg.train.batch_size);
        read(t, "seq_len", cfg.train.seq_len);
        if (t.contains("freeze_subset"))
            cfg.train.freeze_subset =
                freeze_subset_from_string(t.at("freeze_subset").get<std::string>());
        if (t.contains("tokens") && t.contains("total_steps"))
            throw ConfigError("config: give the budget once, as 'tokens' or 'total_steps'");
        if (t.contains("tokens")) {
            read(t, "tokens", cfg.tokens);
            if (cfg.tokens < 1) throw ConfigError("config: 'tokens' must be >= 1");
            const int64_t per_step = cfg.train.batch_size * cfg.train.seq_len;
            cfg.train.total_steps = (cfg.tokens + per_step - 1) / per_step;
        } else {
            read(t, "total_steps", cfg.train.total_steps);
        }
        if (t.contains("schedule")) read_schedule(t.at("schedule"), cfg.train.schedule);
    }
    if (j.contains("data")) {
        const auto& d = j.at("data");
        check_keys(d,
                   {"corpus", "val_fraction", "mc_items", "mc_options", "mc_prompt_len",
                    "mc_cont_len", "mc_seed"},
                   "data");
        read(d, "corpus", cfg.data.corpus_path);
        read(d, "val_fraction", cfg.data.val_fraction);
        read(d, "mc_items", cfg.data.mc_items);
        read(d, "mc_options", cfg.data.mc_options);
        read(d, "mc_prompt_len", cfg.data.mc_prompt_len);
        read(d, "mc_cont_len", cfg.data.mc_cont_len);
        read(d, "mc_seed", cfg.data.mc_seed);
    }
    if (j.contains("eval")) {
        const auto& e = j.at("eval");
        check_keys(e, {"seq_len", "lm_batch_size", "max_lm_batches", "mc_rows_per_chunk"},
                   "eval");
        read(e, "seq_len", cfg.eval.seq_len);
        read(e, "lm_batch_size", cfg.eval.lm_batch_size);
        read(e, "max_lm_batches", cfg.eval.max_lm_batches);
        read(e, "mc_rows_per_chunk", cfg.eval.mc_rows_per_chunk);
    }
    config_detail::read(j, "out_dir", cfg.out_dir);
    config_detail::read(j, "seed", cfg.seed);

    validate(cfg.model);
    if (cfg.data.corpus_path.empty()) throw ConfigError("config: data.corpus is required");
    if (cfg.data.mc_items < 1 || cfg.data.mc_options < 2)
        throw ConfigError("config: mc_items must be >= 1 and mc_options >= 2");
    if (cfg.data.mc_prompt_len < 1 || cfg.data.mc_cont_len < 1)
        throw ConfigError("config: mc prompt and continuation lengths must be >= 1");
    if (cfg.data.val_fraction <= 0 || cfg.data.val_fraction >= 1)
        throw ConfigError("config: val_fraction must lie in (0, 1)");
    if (cfg.eval.seq_len < 1 || cfg.eval.lm_batch_size < 1 || cfg.eval.mc_rows_per_chunk < 1)
        throw ConfigError("config: eval sizes must be >= 1");
    if (cfg.train.seq_len > cfg.model.context_len || cfg.eval.seq_len > cfg.model.context_len)
        throw ConfigError("config: seq_len exceeds the model context length");
    return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("config: cannot open " + path);
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ConfigError("config: " + path + " is not valid JSON");
    return parse_run_config(j);
}

// The SFT recipes: "oracle" keeps k_pre, "naive(k)" fixes a single lower k,
// "phds [a,b,c] -> d" samples the set and anneals toward the anchor.
struct Regime {
    enum class Kind { oracle, naive, phds };
    Kind kind = Kind::oracle;
    std::optional<int> k;
    std::vector<int> k_set;
    std::optional<int> anchor_k;
};

namespace config_detail {

inline std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t");
    return s.substr(a, b - a + 1);
}

inline int parse_int(const std::string& s, const std::string& what) {
    try {
        size_t used = 0;
        const int v = std::stoi(trim(s), &used);
        if (used != trim(s).size()) throw ConfigError("");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("regime: expected an integer for " + what + ", got '" + trim(s) + "'");
    }
}

}  // namespace config_detail

inline Regime parse_regime(const std::string& text) {
    using namespace config_detail;
    std::string s = trim(text);
    Regime r;

    auto take_word = [&]() {
        size_t i = 0;
        while (i < s.size() && (std::isalnum(uint8_t(s[i])) || s[i] == '_')) ++i;
        std::string w = s.substr(0, i);
        s = trim(s.substr(i));
        return w;
    };
    const std::string word = take_word();

    auto paren_arg = [&]() -> std::optional<std::string> {
        if (s.empty()) return std::nullopt;
        if (s.front() == '(') {
            const auto close = s.find(')');
            if (close == std::string::npos) throw ConfigError("regime: unbalanced '(' in '" + text + "'");
            std::string inner = s.substr(1, close - 1);
            s = trim(s.substr(close + 1));
            return inner;
        }
        std::string rest = s;
        s.clear();
        return rest;
    };

    if (word == "oracle") {
        r.kind = Regime::Kind::oracle;
        if (auto arg = paren_arg()) r.k = parse_int(*arg, "the oracle k");
    } else if (word == "naive") {
        r.kind = Regime::Kind::naive;
        auto arg = paren_arg();
        if (!arg) throw ConfigError("regime: naive needs a target k, e.g. naive(2)");
        r.k = parse_int(*arg, "the naive k");
    } else if (word == "phds") {
        r.kind = Regime::Kind::phds;
        std::string rest = s;
        s.clear();
        // split on the arrow, spelled "->" or as the UTF-8 arrow
        std::string anchor_part;
        for (const std::string arrow : {std::string("->"), std::string("\xE2\x86\x92")}) {
            const auto pos = rest.find(arrow);
            if (pos != std::string::npos) {
                anchor_part = trim(rest.substr(pos + arrow.size()));
                rest = trim(rest.substr(0, pos));
                break;
            }
        }
        if (!rest.empty()) {
            if (rest.front() != '[' || rest.back() != ']')
                throw ConfigError("regime: expected a bracketed k set, e.g. phds [2,3,4]");
            std::string inner = rest.substr(1, rest.size() - 2);
            size_t start = 0;
            while (start <= inner.size()) {
                auto comma = inner.find(',', start);
                const std::string tok =
                    inner.substr(start, comma == std::string::npos ? std::string::npos
                                                                   : comma - start);
                if (!trim(tok).empty()) r.k_set.push_back(parse_int(tok, "a k set element"));
                if (comma == std::string::npos) break;
                start = comma + 1;
            }
        }
        if (!anchor_part.empty()) r.anchor_k = parse_int(anchor_part, "the anchor k");
    } else {
        throw ConfigError("regime: unknown kind '" + word + "' (use oracle, naive, or phds)");
    }
    if (!s.empty()) throw ConfigError("regime: trailing text '" + s + "' in '" + text + "'");
    return r;
}

// Turn a regime into the concrete schedule for a base model with the given
// k_pre. Anchored runs without an explicit anneal start begin annealing two
// thirds of the way through.
inline SparsitySchedule resolve_schedule(const Regime& r, int k_pre, const TrainConfig& base,
                                         int64_t total_steps) {
    SparsitySchedule s;
    s.k_pre = k_pre;
    s.anneal_ramp_steps = base.schedule.anneal_ramp_steps;
    switch (r.kind) {
        case Regime::Kind::oracle:
            if (r.k && *r.k != k_pre)
                throw ConfigError("regime: oracle trains at k_pre=" + std::to_string(k_pre) +
                                  ", not k=" + std::to_string(*r.k));
            s.k_train_set = {k_pre};
            break;
        case Regime::Kind::naive:
            if (!r.k || *r.k < 1 || *r.k >= k_pre)
                throw ConfigError("regime: naive needs 1 <= k < k_pre");
            s.k_train_set = {*r.k};
            break;
        case Regime::Kind::phds:
            if (r.k_set.empty() && k_pre < 2)
                throw ConfigError("regime: phds on a k_pre=1 base needs an explicit k set");
            s.k_train_set = r.k_set.empty() ? default_k_train_set(k_pre) : r.k_set;
            std::sort(s.k_train_set.begin(), s.k_train_set.end());
            s.k_train_set.erase(std::unique(s.k_train_set.begin(), s.k_train_set.end()),
                                s.k_train_set.end());
            if (r.anchor_k) {
                s.anchor_k = *r.anchor_k;
                s.anneal_start_step = base.schedule.anneal_start_step
                                          ? *base.schedule.anneal_start_step
                                          : (2 * total_steps) / 3;
            }
            break;
    }
    validate(s);
    return s;
}

}  // namespace phds
