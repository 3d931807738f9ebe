#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "phds/errors.hpp"
#include "phds/rng.hpp"

namespace phds {

// Byte-level vocabulary: 256 raw bytes plus two reserved specials.
constexpr int64_t kByteVocab = 256;
constexpr int64_t kBosId = 256;
constexpr int64_t kEosId = 257;
constexpr int64_t kVocabSize = 258;

struct Corpus {
    std::vector<int64_t> tokens;
    int64_t vocab_size = kVocabSize;
    int64_t train_end = 0;  // tokens [0, train_end) train, [train_end, size) val

    int64_t size() const { return int64_t(tokens.size()); }
    int64_t split_begin(bool val) const { return val ? train_end : 0; }
    int64_t split_end(bool val) const { return val ? size() : train_end; }
};

inline Corpus tokenize(const std::string& bytes, double val_fraction = 0.1) {
    if (bytes.empty()) throw DomainError("tokenize: empty input");
    if (val_fraction <= 0.0 || val_fraction >= 1.0)
        throw DomainError("tokenize: val_fraction must be in (0, 1)");
    Corpus c;
    c.tokens.reserve(bytes.size());
    for (unsigned char b : bytes) c.tokens.push_back(int64_t(b));
    const int64_t n = c.size();
    const int64_t val_count = std::max<int64_t>(1, int64_t(double(n) * val_fraction));
    c.train_end = n - val_count;
    return c;
}

inline std::string detokenize(const std::vector<int64_t>& ids) {
    std::string out;
    out.reserve(ids.size());
    for (int64_t id : ids) {
        if (id < 0 || id >= kVocabSize) throw DomainError("detokenize: id out of vocabulary");
        if (id < kByteVocab) out.push_back(char(static_cast<unsigned char>(id)));
    }
    return out;
}

inline Corpus load_corpus(const std::string& path, double val_fraction = 0.1) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DomainError("load_corpus: cannot open " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return tokenize(bytes, val_fraction);
}

struct Batch {
    int64_t batch_size = 0;
    int64_t seq_len = 0;
    std::vector<int64_t> inputs;   // batch_size * seq_len, row-major
    std::vector<int64_t> targets;  // same layout, shifted one position ahead
};

// Shuffled fixed-stride windows over one split. The permutation is a pure
// function of (seed, epoch); every window appears once per epoch and the
// trailing remainder that cannot fill a batch is dropped.
class BatchStream {
public:
    BatchStream(const Corpus& corpus, int64_t seq_len, int64_t batch_size,
                uint64_t seed, int64_t epoch, bool val = false)
        : corpus_(&corpus), seq_len_(seq_len), batch_size_(batch_size) {
        if (seq_len < 1 || batch_size < 1)
            throw DomainError("batches: seq_len and batch_size must be >= 1");
        const int64_t begin = corpus.split_begin(val);
        const int64_t split_len = corpus.split_end(val) - begin;
        if (seq_len + 1 > split_len)
            throw DomainError("batches: seq_len + 1 exceeds split length " +
                              std::to_string(split_len));
        const int64_t n_windows = (split_len - 1) / seq_len;
        starts_.reserve(size_t(n_windows));
        for (int64_t i = 0; i < n_windows; ++i) starts_.push_back(begin + i * seq_len);
        Rng rng(splitmix64(seed) ^ uint64_t(epoch));
        rng.shuffle(starts_);
    }

    int64_t size() const { return int64_t(starts_.size()) / batch_size_; }

    Batch get(int64_t b) const {
        if (b < 0 || b >= size()) throw DomainError("batches: batch index out of range");
        Batch out;
        out.batch_size = batch_size_;
        out.seq_len = seq_len_;
        out.inputs.reserve(size_t(batch_size_ * seq_len_));
        out.targets.reserve(size_t(batch_size_ * seq_len_));
        for (int64_t r = 0; r < batch_size_; ++r) {
            const int64_t s = starts_[size_t(b * batch_size_ + r)];
            for (int64_t i = 0; i < seq_len_; ++i) {
                out.inputs.push_back(corpus_->tokens[size_t(s + i)]);
                out.targets.push_back(corpus_->tokens[size_t(s + i + 1)]);
            }
        }
        return out;
    }

private:
    const Corpus* corpus_;
    int64_t seq_len_;
    int64_t batch_size_;
    std::vector<int64_t> starts_;
};

struct McItem {
    std::vector<int64_t> prompt;
    std::vector<std::vector<int64_t>> options;
    int answer = 0;
};

// Synthetic multiple-choice items from the val split: the true continuation
// of a prompt window plus distractor continuations sampled elsewhere.
inline std::vector<McItem> make_mc_task(const Corpus& corpus, int64_t n_items, int n_options,
                                        uint64_t seed, int64_t prompt_len = 32,
                                        int64_t cont_len = 8) {
    if (n_options < 2) throw DomainError("make_mc_task: n_options must be >= 2");
    if (n_items < 1) throw DomainError("make_mc_task: n_items must be >= 1");
    const int64_t begin = corpus.split_begin(true);
    const int64_t val_len = corpus.split_end(true) - begin;
    if (prompt_len + cont_len > val_len)
        throw DomainError("make_mc_task: corpus too small for prompt_len + cont_len");

    Rng rng(seed);
    std::vector<McItem> items;
    items.reserve(size_t(n_items));
    const int64_t max_prompt_start = val_len - (prompt_len + cont_len);
    const int64_t max_distractor_start = val_len - cont_len;
    for (int64_t it = 0; it < n_items; ++it) {
        const int64_t s = begin + int64_t(rng.next_below(uint64_t(max_prompt_start + 1)));
        McItem item;
        item.prompt.assign(corpus.tokens.begin() + s, corpus.tokens.begin() + s + prompt_len);
        std::vector<int64_t> truth(corpus.tokens.begin() + s + prompt_len,
                                   corpus.tokens.begin() + s + prompt_len + cont_len);
        item.answer = int(rng.next_below(uint64_t(n_options)));
        item.options.assign(size_t(n_options), {});
        item.options[size_t(item.answer)] = truth;
        for (int o = 0; o < n_options; ++o) {
            if (o == item.answer) continue;
            bool placed = false;
            for (int attempt = 0; attempt < 100; ++attempt) {
                const int64_t ds = begin + int64_t(rng.next_below(uint64_t(max_distractor_start + 1)));
                std::vector<int64_t> cand(corpus.tokens.begin() + ds,
                                          corpus.tokens.begin() + ds + cont_len);
                if (cand == truth) continue;
                item.options[size_t(o)] = std::move(cand);
                placed = true;
                break;
            }
            if (!placed) throw DomainError("make_mc_task: corpus too repetitive for distractors");
        }
        items.push_back(std::move(item));
    }
    return items;
}

inline void save_mc(const std::vector<McItem>& items, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DomainError("save_mc: cannot open " + path);
    for (const auto& item : items) {
        nlohmann::json j;
        j["prompt"] = item.prompt;
        j["options"] = item.options;
        j["answer"] = item.answer;
        out << j.dump() << "\n";
    }
}

inline std::vector<McItem> load_mc(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DomainError("load_mc: cannot open " + path);
    std::vector<McItem> items;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.contains("prompt") || !j.contains("options") ||
            !j.contains("answer"))
            throw FormatError("load_mc: malformed record in " + path);
        McItem item;
        item.prompt = j["prompt"].get<std::vector<int64_t>>();
        item.options = j["options"].get<std::vector<std::vector<int64_t>>>();
        item.answer = j["answer"].get<int>();
        if (item.answer < 0 || item.answer >= int(item.options.size()))
            throw FormatError("load_mc: answer index out of range in " + path);
        items.push_back(std::move(item));
    }
    return items;
}

}  // namespace phds
