#pragma once

#include <phds/rng.hpp>

#include <algorithm>
#include <string>
#include <vector>

namespace phds {

// Deterministic synthetic text: a large fixed table of key>value; records with
// random short codes, emitted in short repetition bursts. A fresh record's
// value bytes are only predictable for a model that has memorized the pairing;
// the repeats reward in-context copying over a span wider than any n-gram.
// Variable code length keeps record boundaries irregular, so surface
// periodicity alone does not decide multiple-choice continuations.
inline std::string synth_corpus_text(size_t n_bytes, uint64_t seed = 0x5eed,
                                     size_t n_pairs = 2048) {
    static const char kAlpha[] = "abcdefghijklmnopqrstuvwxyz0123456789";

    Rng rng(seed);
    auto code = [&] {
        std::string w;
        const size_t len = 3 + size_t(rng.next_below(3));
        for (size_t s = 0; s < len; ++s) w += kAlpha[rng.next_below(36)];
        return w;
    };
    std::vector<std::string> keys, vals;
    keys.reserve(n_pairs);
    vals.reserve(n_pairs);
    while (keys.size() < n_pairs) {
        std::string k = code();
        if (std::find(keys.begin(), keys.end(), k) != keys.end()) continue;
        keys.push_back(std::move(k));
        vals.push_back(code());
    }

    std::string out;
    out.reserve(n_bytes + 32);
    size_t records = 0;
    while (out.size() < n_bytes) {
        const size_t i = size_t(rng.next_below(n_pairs));
        const uint64_t burst = rng.next_below(10);
        const int copies = burst < 5 ? 1 : burst < 8 ? 2 : 3;
        for (int c = 0; c < copies && out.size() < n_bytes; ++c) {
            out += keys[i];
            out += '>';
            out += vals[i];
            out += ';';
            if (++records % 8 == 0) out += '\n';
        }
    }
    out.resize(n_bytes);
    return out;
}

}  // namespace phds
