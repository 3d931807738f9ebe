#pragma once

#include <phds/data.hpp>
#include <phds/model.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <locale>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace phds {

struct EvalDataset {
    const Corpus* corpus = nullptr;
    std::vector<McItem> items;
    int64_t seq_len = 64;
    int64_t lm_batch_size = 8;
    int64_t max_lm_batches = -1;  // cap on evaluated val batches, -1 = all
    int64_t mc_rows_per_chunk = 64;
};

struct EvalReport {
    int k_ev = 0;
    double perplexity = 1.0;
    double mc_accuracy = 0.0;
    std::vector<int> answers;
    int64_t flops_per_token = 0;
    int64_t active_params = 0;
};

namespace eval_detail {

inline double token_nll(const std::vector<float>& logits, int64_t vocab, int64_t pos,
                        int64_t target) {
    const float* row = logits.data() + pos * vocab;
    double mx = double(row[0]);
    for (int64_t j = 1; j < vocab; ++j) mx = std::max(mx, double(row[j]));
    double se = 0.0;
    for (int64_t j = 0; j < vocab; ++j) se += std::exp(double(row[j]) - mx);
    return std::log(se) + mx - double(row[target]);
}

// Routing k plus the bank entry to read per-k state from. Evaluation at a k
// the bank has never seen falls back to the k_pre entry.
struct ResolvedK {
    int k_route;
    int bank_k;
};

inline ResolvedK resolve_k(MoeModel& model, int k_ev, bool override_k_bound) {
    const auto& cfg = model.config();
    if (k_ev < 1 || int64_t(k_ev) > cfg.n_experts)
        throw DomainError("evaluate: k_ev=" + std::to_string(k_ev) + " outside [1, " +
                          std::to_string(cfg.n_experts) + "]");
    if (k_ev > cfg.k_pre && !override_k_bound)
        throw SparsityError("evaluate: k_ev=" + std::to_string(k_ev) + " exceeds k_pre=" +
                            std::to_string(cfg.k_pre) +
                            " (pass the k-bound override to force this)");
    const int bank_k = model.layers().front().bank.has(k_ev) ? k_ev : cfg.k_pre;
    return {k_ev, bank_k};
}

}  // namespace eval_detail

// Mean token NLL (nats) over the validation split, windows taken in corpus
// order so the result needs no seed.
inline double lm_mean_nll(MoeModel& model, const EvalDataset& ds, int k_ev,
                          bool override_k_bound = false) {
    if (!ds.corpus) throw DomainError("evaluate: dataset has no corpus");
    if (ds.seq_len < 1 || ds.lm_batch_size < 1)
        throw DomainError("evaluate: seq_len and lm_batch_size must be >= 1");
    const auto rk = eval_detail::resolve_k(model, k_ev, override_k_bound);

    const Corpus& c = *ds.corpus;
    const int64_t begin = c.split_begin(true);
    const int64_t val_len = c.split_end(true) - begin;
    if (ds.seq_len + 1 > val_len)
        throw DomainError("evaluate: validation split shorter than seq_len + 1");
    const int64_t n_windows = (val_len - 1) / ds.seq_len;

    NoGradGuard ng;
    const int64_t vocab = model.config().vocab_size;
    double total = 0.0;
    int64_t count = 0;
    int64_t batches = 0;
    for (int64_t w = 0; w < n_windows; w += ds.lm_batch_size) {
        if (ds.max_lm_batches >= 0 && batches >= ds.max_lm_batches) break;
        const int64_t rows = std::min(ds.lm_batch_size, n_windows - w);
        std::vector<int64_t> inputs, targets;
        inputs.reserve(size_t(rows * ds.seq_len));
        targets.reserve(size_t(rows * ds.seq_len));
        for (int64_t r = 0; r < rows; ++r) {
            const int64_t s = begin + (w + r) * ds.seq_len;
            for (int64_t i = 0; i < ds.seq_len; ++i) {
                inputs.push_back(c.tokens[size_t(s + i)]);
                targets.push_back(c.tokens[size_t(s + i + 1)]);
            }
        }
        auto res = model.forward(inputs, ds.seq_len, rk.k_route, rk.bank_k, override_k_bound);
        const auto& logits = res.logits.data();
        for (size_t p = 0; p < targets.size(); ++p)
            total += eval_detail::token_nll(logits, vocab, int64_t(p), targets[p]);
        count += int64_t(targets.size());
        ++batches;
    }
    if (count == 0) throw DomainError("evaluate: no validation windows to score");
    return total / double(count);
}

// Chosen option index per item: lowest length-normalized NLL, ties to the
// lower index. Rows of equal length are scored in shared forward passes.
inline std::vector<int> mc_answers(MoeModel& model, const std::vector<McItem>& items, int k_ev,
                                   bool override_k_bound = false, int64_t rows_per_chunk = 64) {
    const auto rk = eval_detail::resolve_k(model, k_ev, override_k_bound);
    if (rows_per_chunk < 1) throw DomainError("evaluate: rows_per_chunk must be >= 1");

    struct Row {
        size_t item;
        size_t option;
        int64_t prompt_len;
    };
    std::map<int64_t, std::vector<Row>> buckets;
    for (size_t i = 0; i < items.size(); ++i) {
        const auto& it = items[i];
        if (it.prompt.empty()) throw DomainError("evaluate: mc item has an empty prompt");
        if (it.options.empty()) throw DomainError("evaluate: mc item has no options");
        for (size_t o = 0; o < it.options.size(); ++o) {
            if (it.options[o].empty())
                throw DomainError("evaluate: mc item has an empty option");
            const int64_t len = int64_t(it.prompt.size() + it.options[o].size());
            buckets[len].push_back({i, o, int64_t(it.prompt.size())});
        }
    }

    NoGradGuard ng;
    const int64_t vocab = model.config().vocab_size;
    std::vector<std::vector<double>> nll(items.size());
    for (size_t i = 0; i < items.size(); ++i) nll[i].resize(items[i].options.size());

    for (auto& [len, rows] : buckets) {
        for (size_t start = 0; start < rows.size(); start += size_t(rows_per_chunk)) {
            const size_t n = std::min(size_t(rows_per_chunk), rows.size() - start);
            std::vector<int64_t> tokens;
            tokens.reserve(n * size_t(len));
            for (size_t r = 0; r < n; ++r) {
                const Row& row = rows[start + r];
                const auto& it = items[row.item];
                tokens.insert(tokens.end(), it.prompt.begin(), it.prompt.end());
                tokens.insert(tokens.end(), it.options[row.option].begin(),
                              it.options[row.option].end());
            }
            auto res = model.forward(tokens, len, rk.k_route, rk.bank_k, override_k_bound);
            const auto& logits = res.logits.data();
            for (size_t r = 0; r < n; ++r) {
                const Row& row = rows[start + r];
                const int64_t base = int64_t(r) * len;
                double sum = 0.0;
                int64_t scored = 0;
                for (int64_t p = row.prompt_len - 1; p < len - 1; ++p) {
                    sum += eval_detail::token_nll(logits, vocab, base + p,
                                                  tokens[size_t(base + p + 1)]);
                    ++scored;
                }
                nll[row.item][row.option] = sum / double(scored);
            }
        }
    }

    std::vector<int> answers(items.size());
    for (size_t i = 0; i < items.size(); ++i) {
        size_t best = 0;
        for (size_t o = 1; o < nll[i].size(); ++o)
            if (nll[i][o] < nll[i][best]) best = o;
        answers[i] = int(best);
    }
    return answers;
}

inline EvalReport evaluate(MoeModel& model, const EvalDataset& ds, int k_ev,
                           bool override_k_bound = false) {
    EvalReport rep;
    rep.k_ev = k_ev;
    rep.perplexity = std::exp(lm_mean_nll(model, ds, k_ev, override_k_bound));
    if (!ds.items.empty()) {
        rep.answers = mc_answers(model, ds.items, k_ev, override_k_bound, ds.mc_rows_per_chunk);
        int64_t hits = 0;
        for (size_t i = 0; i < ds.items.size(); ++i)
            if (rep.answers[i] == ds.items[i].answer) ++hits;
        rep.mc_accuracy = double(hits) / double(ds.items.size());
    }
    const auto cost = flops_per_token(model.config(), k_ev);
    rep.flops_per_token = cost.flops;
    rep.active_params = cost.active_params;
    return rep;
}

inline double agreement(const std::vector<int>& a, const std::vector<int>& b) {
    if (a.size() != b.size())
        throw DomainError("agreement: answer vectors differ in length (" +
                          std::to_string(a.size()) + " vs " + std::to_string(b.size()) + ")");
    if (a.empty()) throw DomainError("agreement: no items");
    int64_t matches = 0;
    for (size_t i = 0; i < a.size(); ++i)
        if (a[i] == b[i]) ++matches;
    return double(matches) / double(a.size());
}

struct AgreementReport {
    std::string model_a;
    std::string model_b;
    int k_a = 0;
    int k_b = 0;
    int64_t n = 0;
    double value = 0.0;
};

inline std::string to_kv_line(const AgreementReport& r) {
    std::ostringstream ss;
    ss.imbue(std::locale::classic());
    ss << "model_a=" << r.model_a << " model_b=" << r.model_b << " k_a=" << r.k_a
       << " k_b=" << r.k_b << " n=" << r.n << " agreement=" << std::fixed
       << std::setprecision(6) << r.value;
    return ss.str();
}

// One report per requested k, ascending and deduplicated.
inline std::vector<EvalReport> sweep(MoeModel& model, const EvalDataset& ds,
                                     std::vector<int> k_list, bool override_k_bound = false) {
    if (k_list.empty()) throw DomainError("sweep: empty k list");
    std::sort(k_list.begin(), k_list.end());
    k_list.erase(std::unique(k_list.begin(), k_list.end()), k_list.end());
    std::vector<EvalReport> out;
    out.reserve(k_list.size());
    for (int k : k_list) out.push_back(evaluate(model, ds, k, override_k_bound));
    return out;
}

inline std::string sweep_csv(const std::vector<EvalReport>& reports) {
    std::ostringstream ss;
    ss.imbue(std::locale::classic());
    ss << "k,active_params,flops_per_token,perplexity,mc_accuracy\n";
    ss << std::setprecision(10);
    for (const auto& r : reports)
        ss << r.k_ev << ',' << r.active_params << ',' << r.flops_per_token << ','
           << r.perplexity << ',' << r.mc_accuracy << '\n';
    return ss.str();
}

inline void write_sweep_csv(const std::vector<EvalReport>& reports, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("sweep: cannot open " + path + " for writing");
    const std::string doc = sweep_csv(reports);
    out.write(doc.data(), std::streamsize(doc.size()));
    if (!out) throw FormatError("sweep: write failed for " + path);
}

}  // namespace phds
