#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace phds {

// splitmix64: the usual finalizer, good enough to whiten (seed, step) pairs.
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

// Small counter-based generator. All draws are pure integer arithmetic so the
// same (seed) gives the same stream on every platform.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(splitmix64(seed ^ 0xD1B54A32D192ED03ull)) {}

    uint64_t next_u64() {
        state_ = splitmix64(state_);
        return state_;
    }

    // Uniform in [0, 1) with 53 bits of mantissa.
    double next_double() { return double(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in [0, n). Modulo bias is < n / 2^64, irrelevant at our scales.
    uint64_t next_below(uint64_t n) { return next_u64() % n; }

    // Standard normal via Box-Muller. One value per call, cached pair dropped
    // on purpose to keep the draw count predictable.
    double next_normal() {
        double u1 = next_double();
        double u2 = next_double();
        while (u1 <= 0.0) u1 = next_double();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    // Fisher-Yates with our own bounded draw; std::shuffle's ordering is
    // implementation-defined and would break run-to-run reproducibility
    // across standard libraries.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = size_t(next_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    uint64_t state_;
};

}  // namespace phds
