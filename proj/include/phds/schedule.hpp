#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <vector>

#include <json.hpp>

#include "phds/errors.hpp"
#include "phds/rng.hpp"

namespace phds {

// Which k the trainer routes with at a given step. Plain multi-k when
// anchor/anneal are absent; annealed toward anchor_k once anneal_start_step
// is set. anneal_ramp_steps == 0 means a hard switch at the start step.
struct SparsitySchedule {
    std::vector<int> k_train_set;
    std::optional<int> anchor_k;
    std::optional<int64_t> anneal_start_step;
    int64_t anneal_ramp_steps = 0;
    int k_pre = 0;
};

inline std::vector<int> default_k_train_set(int k_pre) {
    if (k_pre < 2) throw DomainError("default_k_train_set: k_pre must be >= 2");
    std::vector<int> out;
    for (int k = (k_pre + 1) / 2; k <= k_pre; ++k) out.push_back(k);
    return out;
}

inline void validate(const SparsitySchedule& s) {
    if (s.k_train_set.empty()) throw ConfigError("schedule: k_train_set is empty");
    for (size_t i = 0; i < s.k_train_set.size(); ++i) {
        if (s.k_train_set[i] < 1) throw ConfigError("schedule: k values must be >= 1");
        if (i && s.k_train_set[i] <= s.k_train_set[i - 1])
            throw ConfigError("schedule: k_train_set must be strictly increasing");
    }
    if (s.k_pre < 1) throw ConfigError("schedule: k_pre must be >= 1");
    if (s.k_train_set.back() > s.k_pre)
        throw ConfigError("schedule: max(k_train_set) exceeds k_pre");
    if (s.anchor_k &&
        std::find(s.k_train_set.begin(), s.k_train_set.end(), *s.anchor_k) == s.k_train_set.end())
        throw ConfigError("schedule: anchor_k not in k_train_set");
    if (s.anneal_start_step) {
        if (*s.anneal_start_step < 0) throw ConfigError("schedule: anneal_start_step must be >= 0");
        if (!s.anchor_k) throw ConfigError("schedule: anneal configured without anchor_k");
    }
    if (s.anneal_ramp_steps < 0) throw ConfigError("schedule: anneal_ramp_steps must be >= 0");
}

inline void to_json(nlohmann::json& j, const SparsitySchedule& s) {
    j = nlohmann::json{{"k_train_set", s.k_train_set},
                       {"anchor_k", nullptr},
                       {"anneal_start_step", nullptr},
                       {"anneal_ramp_steps", s.anneal_ramp_steps},
                       {"k_pre", s.k_pre}};
    if (s.anchor_k) j["anchor_k"] = *s.anchor_k;
    if (s.anneal_start_step) j["anneal_start_step"] = *s.anneal_start_step;
}

inline void from_json(const nlohmann::json& j, SparsitySchedule& s) {
    j.at("k_train_set").get_to(s.k_train_set);
    s.anchor_k.reset();
    if (j.contains("anchor_k") && !j["anchor_k"].is_null()) s.anchor_k = j["anchor_k"].get<int>();
    s.anneal_start_step.reset();
    if (j.contains("anneal_start_step") && !j["anneal_start_step"].is_null())
        s.anneal_start_step = j["anneal_start_step"].get<int64_t>();
    s.anneal_ramp_steps = j.value("anneal_ramp_steps", int64_t(0));
    j.at("k_pre").get_to(s.k_pre);
}

// Pure in (schedule, step, seed): the draw is a hash, not generator state, so
// any step can be evaluated in isolation and sequences are reproducible
// across platforms.
inline int sample_k(const SparsitySchedule& s, int64_t step, uint64_t seed) {
    if (step < 0) throw DomainError("sample_k: step must be >= 0");
    if (s.k_train_set.empty()) throw ConfigError("schedule: k_train_set is empty");

    double alpha = 0.0;
    if (s.anneal_start_step) {
        if (!s.anchor_k) throw ConfigError("schedule: anneal configured without anchor_k");
        const int64_t start = *s.anneal_start_step;
        if (s.anneal_ramp_steps == 0)
            alpha = step >= start ? 1.0 : 0.0;
        else
            alpha = std::clamp(double(step - start) / double(s.anneal_ramp_steps), 0.0, 1.0);
    }

    const uint64_t h = splitmix64(splitmix64(seed) ^ uint64_t(step));
    if (alpha > 0.0) {
        const double u = double(h >> 11) * 0x1.0p-53;
        if (u < alpha) return *s.anchor_k;
    }
    const uint64_t h2 = splitmix64(h);
    return s.k_train_set[size_t(h2 % s.k_train_set.size())];
}

}  // namespace phds
