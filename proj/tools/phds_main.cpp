#include <CLI11.hpp>
#include <phds/config.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

using namespace phds;
namespace fs = std::filesystem;

namespace {

struct Workspace {
    RunConfig cfg;
    Corpus corpus;
    std::vector<McItem> items;
};

Workspace open_workspace(const std::string& config_path, const std::string& out_override,
                         std::optional<uint64_t> seed_override, bool uses_out_dir) {
    Workspace ws;
    ws.cfg = load_run_config(config_path);
    if (!out_override.empty()) ws.cfg.out_dir = out_override;
    if (seed_override) ws.cfg.seed = *seed_override;
    ws.cfg.train.seed = ws.cfg.seed;
    ws.corpus = load_corpus(ws.cfg.data.corpus_path, ws.cfg.data.val_fraction);
    ws.items = make_mc_task(ws.corpus, ws.cfg.data.mc_items, ws.cfg.data.mc_options,
                            ws.cfg.data.mc_seed, ws.cfg.data.mc_prompt_len,
                            ws.cfg.data.mc_cont_len);
    if (uses_out_dir) {
        fs::create_directories(ws.cfg.out_dir);
        const fs::path dst = fs::path(ws.cfg.out_dir) / fs::path(config_path).filename();
        if (!fs::exists(dst) || !fs::equivalent(dst, fs::path(config_path)))
            fs::copy_file(config_path, dst, fs::copy_options::overwrite_existing);
    }
    return ws;
}

EvalDataset eval_dataset(const Workspace& ws) {
    EvalDataset ds;
    ds.corpus = &ws.corpus;
    ds.items = ws.items;
    ds.seq_len = ws.cfg.eval.seq_len;
    ds.lm_batch_size = ws.cfg.eval.lm_batch_size;
    ds.max_lm_batches = ws.cfg.eval.max_lm_batches;
    ds.mc_rows_per_chunk = ws.cfg.eval.mc_rows_per_chunk;
    return ds;
}

std::vector<int> eval_ks_for(const SparsitySchedule& schedule) {
    std::set<int> ks(schedule.k_train_set.begin(), schedule.k_train_set.end());
    ks.insert(schedule.k_pre);
    return {ks.begin(), ks.end()};
}

SelectionRule selection_for(const SparsitySchedule& schedule) {
    SelectionRule rule;
    if (schedule.anchor_k) {
        rule.kind = SelectionRule::Kind::best_at_k;
        rule.k = *schedule.anchor_k;
    } else if (schedule.k_train_set.size() == 1) {
        rule.kind = SelectionRule::Kind::best_at_k;
        rule.k = schedule.k_train_set.front();
    } else {
        rule.kind = SelectionRule::Kind::best_avg;
        rule.k_set = schedule.k_train_set;
    }
    return rule;
}

void print_report(const EvalReport& r) {
    std::printf("eval k=%d perplexity=%.6f mc_accuracy=%.6f flops_per_token=%lld "
                "active_params=%lld\n",
                r.k_ev, r.perplexity, r.mc_accuracy, (long long)r.flops_per_token,
                (long long)r.active_params);
}

CheckpointMeta meta_for(const MoeModel& model, int64_t step, const SparsitySchedule& schedule,
                        uint64_t seed) {
    CheckpointMeta meta;
    meta.config = model.config();
    meta.step = step;
    meta.schedule = schedule;
    meta.rng_seed = seed;
    return meta;
}

// ---------------------------------------------------------------- commands

int cmd_pretrain(const std::string& config_path, const std::string& out,
                 std::optional<uint64_t> seed) {
    auto ws = open_workspace(config_path, out, seed, true);
    MoeModel model(ws.cfg.model, ws.cfg.seed);

    TrainConfig tc = ws.cfg.train;
    tc.schedule = SparsitySchedule{};
    tc.schedule.k_pre = ws.cfg.model.k_pre;
    tc.schedule.k_train_set = {ws.cfg.model.k_pre};
    tc.burn_in_steps = 0;

    FitOptions opts;
    opts.out_dir = ws.cfg.out_dir;
    opts.tag = "pretrain";
    auto result = fit(model, ws.corpus, tc, opts);

    const std::string path = ws.cfg.out_dir + "/base.phds";
    auto model_meta = meta_for(model, tc.total_steps, tc.schedule, ws.cfg.seed);
    save_checkpoint(model, model_meta, path);
    std::printf("pretrain done steps=%lld final_lm_loss=%.9f checkpoint=%s\n",
                (long long)tc.total_steps, result.final_lm_loss, path.c_str());
    return 0;
}

int cmd_sft(const std::string& config_path, const std::string& ckpt,
            const std::string& regime_text, const std::string& out,
            std::optional<uint64_t> seed) {
    auto ws = open_workspace(config_path, out, seed, true);
    auto loaded = load_checkpoint(ckpt);
    MoeModel model = std::move(loaded.model);

    const Regime regime = parse_regime(regime_text);
    TrainConfig tc = ws.cfg.train;
    tc.schedule = resolve_schedule(regime, model.config().k_pre, ws.cfg.train, tc.total_steps);

    FitOptions opts;
    opts.out_dir = ws.cfg.out_dir;
    opts.tag = "sft";
    opts.eval_ds = eval_dataset(ws);
    opts.eval_ks = eval_ks_for(tc.schedule);
    opts.selection = selection_for(tc.schedule);
    auto result = fit(model, ws.corpus, tc, opts);

    const auto& chosen = result.records[result.selected];
    const std::string path = ws.cfg.out_dir + "/selected.phds";
    fs::copy_file(chosen.path, path, fs::copy_options::overwrite_existing);
    std::printf("sft done regime=\"%s\" steps=%lld selected_step=%lld checkpoint=%s\n",
                regime_text.c_str(), (long long)tc.total_steps, (long long)chosen.step,
                path.c_str());
    for (const auto& [k, rep] : chosen.metrics)
        std::printf("metric k=%d perplexity=%.6f mc_accuracy=%.6f\n", k, rep.perplexity,
                    rep.mc_accuracy);
    return 0;
}

int cmd_eval(const std::string& config_path, const std::string& ckpt, int k, bool override_k,
             std::optional<uint64_t> seed) {
    auto ws = open_workspace(config_path, "", seed, false);
    auto loaded = load_checkpoint(ckpt);
    if (k == 0) k = loaded.model.config().k_pre;
    auto ds = eval_dataset(ws);
    print_report(evaluate(loaded.model, ds, k, override_k));
    return 0;
}

int cmd_sweep(const std::string& config_path, const std::string& ckpt, std::vector<int> k_list,
              bool override_k, const std::string& out, std::optional<uint64_t> seed) {
    auto ws = open_workspace(config_path, out, seed, true);
    auto loaded = load_checkpoint(ckpt);
    if (k_list.empty())
        for (int k = 1; k <= loaded.model.config().k_pre; ++k) k_list.push_back(k);
    auto ds = eval_dataset(ws);
    auto reports = sweep(loaded.model, ds, k_list, override_k);
    const std::string path = ws.cfg.out_dir + "/sweep.csv";
    write_sweep_csv(reports, path);
    std::fputs(sweep_csv(reports).c_str(), stdout);
    std::fprintf(stderr, "sweep written to %s\n", path.c_str());
    return 0;
}

int cmd_agree(const std::string& config_path, const std::vector<std::string>& ckpts,
              const std::vector<int>& ks, bool override_k, std::optional<uint64_t> seed) {
    if (ckpts.empty() || ckpts.size() > 2)
        throw ConfigError("agree: give one checkpoint with two k values or two checkpoints");

    auto ws = open_workspace(config_path, "", seed, false);
    AgreementReport rep;
    std::vector<int> answers_a, answers_b;

    if (ckpts.size() == 1) {
        auto loaded = load_checkpoint(ckpts[0]);
        int ka, kb;
        if (ks.empty()) {
            // default comparison: the schedule's lowest k against k_pre
            const auto& set = loaded.meta.schedule.k_train_set;
            ka = set.empty() ? loaded.model.config().k_pre : set.front();
            kb = loaded.model.config().k_pre;
        } else if (ks.size() == 2) {
            ka = ks[0];
            kb = ks[1];
        } else {
            throw ConfigError("agree: one checkpoint needs exactly two k values (or none)");
        }
        answers_a = mc_answers(loaded.model, ws.items, ka, override_k,
                               ws.cfg.eval.mc_rows_per_chunk);
        answers_b = mc_answers(loaded.model, ws.items, kb, override_k,
                               ws.cfg.eval.mc_rows_per_chunk);
        rep.model_a = rep.model_b = fs::path(ckpts[0]).stem().string();
        rep.k_a = ka;
        rep.k_b = kb;
    } else {
        if (ks.size() > 2) throw ConfigError("agree: at most two k values");
        auto a = load_checkpoint(ckpts[0]);
        auto b = load_checkpoint(ckpts[1]);
        const int ka = ks.empty() ? a.model.config().k_pre : ks.front();
        const int kb = ks.empty() ? b.model.config().k_pre : ks.back();
        answers_a = mc_answers(a.model, ws.items, ka, override_k,
                               ws.cfg.eval.mc_rows_per_chunk);
        answers_b = mc_answers(b.model, ws.items, kb, override_k,
                               ws.cfg.eval.mc_rows_per_chunk);
        rep.model_a = fs::path(ckpts[0]).stem().string();
        rep.model_b = fs::path(ckpts[1]).stem().string();
        rep.k_a = ka;
        rep.k_b = kb;
    }
    rep.n = int64_t(answers_a.size());
    rep.value = agreement(answers_a, answers_b);
    std::printf("%s\n", to_kv_line(rep).c_str());
    return 0;
}

int cmd_flops(const std::string& config_path, std::vector<int> k_list) {
    const RunConfig cfg = load_run_config(config_path);
    if (k_list.empty())
        for (int k = 1; k <= cfg.model.k_pre; ++k) k_list.push_back(k);
    std::printf("k,active_params,flops_per_token\n");
    for (int k : k_list) {
        const auto cost = flops_per_token(cfg.model, k);
        std::printf("%d,%lld,%lld\n", k, (long long)cost.active_params, (long long)cost.flops);
    }
    return 0;
}

// ---------------------------------------------------------------- ablate

struct AblateRow {
    std::string label;
    SparsitySchedule schedule;
    FreezeSubset freeze = FreezeSubset::none;
    std::optional<double> epsilon;
    bool zero_steps = false;
};

std::string set_label(const std::vector<int>& ks, std::optional<int> anchor) {
    std::string s = "[";
    for (size_t i = 0; i < ks.size(); ++i) s += (i ? "," : "") + std::to_string(ks[i]);
    s += "]";
    if (anchor) s += "->" + std::to_string(*anchor);
    return s;
}

SparsitySchedule anchored(std::vector<int> set, std::optional<int> anchor, int k_pre,
                          const TrainConfig& base, int64_t total_steps) {
    SparsitySchedule s;
    s.k_pre = k_pre;
    s.k_train_set = std::move(set);
    s.anneal_ramp_steps = base.schedule.anneal_ramp_steps;
    if (anchor) {
        s.anchor_k = *anchor;
        s.anneal_start_step = base.schedule.anneal_start_step
                                  ? *base.schedule.anneal_start_step
                                  : (2 * total_steps) / 3;
    }
    validate(s);
    return s;
}

std::vector<AblateRow> ablate_rows(const std::string& kind, int k_pre, const TrainConfig& base,
                                   int64_t total_steps) {
    if (k_pre < 2)
        throw ConfigError("ablate: needs a base with k_pre >= 2");
    std::vector<AblateRow> rows;
    const auto full = default_k_train_set(k_pre);

    if (kind == "epsilon") {
        for (int e = 1; e <= 8; ++e) {
            AblateRow r;
            r.epsilon = std::pow(10.0, -e);
            char buf[32];
            std::snprintf(buf, sizeof(buf), "epsilon=1e-%02d", e);
            r.label = buf;
            r.schedule = anchored(full, full.front(), k_pre, base, total_steps);
            rows.push_back(std::move(r));
        }
    } else if (kind == "ktrain_sets") {
        std::vector<std::vector<int>> sets;
        std::vector<int> partial(full.begin(), full.end() - 1);
        if (!partial.empty()) sets.push_back(partial);
        sets.push_back(full);
        if (full.size() > 2) sets.push_back({full.front(), full.back()});
        for (const auto& set : sets) {
            for (bool anchor : {false, true}) {
                AblateRow r;
                std::optional<int> a = anchor ? std::optional<int>(set.front()) : std::nullopt;
                r.label = set_label(set, a);
                r.schedule = anchored(set, a, k_pre, base, total_steps);
                rows.push_back(std::move(r));
            }
        }
    } else if (kind == "curriculum") {
        {
            AblateRow r;
            r.label = set_label(full, std::nullopt);
            r.schedule = anchored(full, std::nullopt, k_pre, base, total_steps);
            rows.push_back(std::move(r));
        }
        for (int a : full) {
            AblateRow r;
            r.label = set_label(full, a);
            r.schedule = anchored(full, a, k_pre, base, total_steps);
            rows.push_back(std::move(r));
        }
    } else if (kind == "subset") {
        AblateRow baseline;
        baseline.label = "baseline";
        baseline.zero_steps = true;
        baseline.schedule = anchored(full, std::nullopt, k_pre, base, total_steps);
        rows.push_back(std::move(baseline));
        for (auto sub : {FreezeSubset::gate_only, FreezeSubset::expert_only,
                         FreezeSubset::attention_only, FreezeSubset::expert_and_gate}) {
            AblateRow r;
            r.label = to_string(sub);
            r.freeze = sub;
            r.schedule = anchored(full, std::nullopt, k_pre, base, total_steps);
            rows.push_back(std::move(r));
        }
    } else {
        throw ConfigError("ablate: unknown kind '" + kind +
                          "' (use epsilon, ktrain_sets, curriculum, or subset)");
    }
    return rows;
}

int cmd_ablate(const std::string& config_path, const std::string& ckpt, const std::string& kind,
               const std::string& out, std::optional<uint64_t> seed) {
    auto ws = open_workspace(config_path, out, seed, true);
    const int k_pre = load_checkpoint(ckpt).model.config().k_pre;
    auto rows = ablate_rows(kind, k_pre, ws.cfg.train, ws.cfg.train.total_steps);

    std::set<int> column_set;
    for (const auto& r : rows)
        for (int k : eval_ks_for(r.schedule)) column_set.insert(k);
    const std::vector<int> columns(column_set.begin(), column_set.end());

    std::ostringstream csv;
    csv.imbue(std::locale::classic());
    csv << "config";
    for (int k : columns) csv << ",acc_k" << k;
    csv << '\n';

    for (const auto& row : rows) {
        auto loaded = load_checkpoint(ckpt);
        MoeModel model = std::move(loaded.model);
        if (row.epsilon) model.set_epsilon(*row.epsilon);

        std::map<int, EvalReport> metrics;
        if (row.zero_steps) {
            auto ds = eval_dataset(ws);
            for (int k : columns) metrics.emplace(k, evaluate(model, ds, k));
        } else {
            TrainConfig tc = ws.cfg.train;
            tc.schedule = row.schedule;
            tc.freeze_subset = row.freeze;
            FitOptions opts;
            opts.eval_ds = eval_dataset(ws);
            opts.eval_ks = columns;
            opts.selection = selection_for(tc.schedule);
            auto result = fit(model, ws.corpus, tc, opts);
            metrics = result.records[result.selected].metrics;
        }

        csv << row.label;
        char buf[32];
        for (int k : columns) {
            std::snprintf(buf, sizeof(buf), ",%.6f", metrics.at(k).mc_accuracy);
            csv << buf;
        }
        csv << '\n';
        std::printf("ablate %s row=%s done\n", kind.c_str(), row.label.c_str());
    }

    const std::string path = ws.cfg.out_dir + "/ablate_" + kind + ".csv";
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("ablate: cannot open " + path + " for writing");
    f << csv.str();
    std::printf("ablate table written to %s\n", path.c_str());
    return 0;
}

// ---------------------------------------------------------------- wiring

const char* kind_of(const Error& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return "config";
    if (dynamic_cast<const SparsityError*>(&e)) return "sparsity";
    if (dynamic_cast<const FormatError*>(&e)) return "format";
    if (dynamic_cast<const NumericError*>(&e)) return "numeric";
    if (dynamic_cast<const ShapeError*>(&e)) return "shape";
    if (dynamic_cast<const DomainError*>(&e)) return "domain";
    return "runtime";
}

void error_line(const char* kind, const std::string& msg) {
    std::string clean = msg;
    for (char& c : clean)
        if (c == '"' || c == '\n') c = '\'';
    std::fprintf(stderr, "error kind=%s msg=\"%s\"\n", kind, clean.c_str());
}

template <typename F>
int guarded(F&& f) {
    try {
        return f();
    } catch (const ConfigError& e) {
        error_line("config", e.what());
        return 2;
    } catch (const Error& e) {
        error_line(kind_of(e), e.what());
        return 3;
    } catch (const std::exception& e) {
        error_line("runtime", e.what());
        return 3;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Desk-scale MoE language models whose sparsity k is declared at evaluation "
                 "time: pretrain, fine-tune, and compare one checkpoint across k."};
    app.require_subcommand(1);

    std::string config_path, out_dir, regime_text, kind;
    std::vector<std::string> ckpts;
    std::vector<int> ks, k_list;
    uint64_t seed_val = 0;
    bool override_k = false;

    auto add_common = [&](CLI::App* sub, bool with_out) {
        sub->add_option("--config", config_path, "run configuration file")->required();
        sub->add_option("--seed", seed_val, "override the config seed");
        if (with_out) sub->add_option("--out", out_dir, "override the output directory");
    };

    auto* pretrain = app.add_subcommand("pretrain", "train a base model at fixed k_pre");
    add_common(pretrain, true);

    auto* sft = app.add_subcommand("sft", "fine-tune a base checkpoint under a regime");
    add_common(sft, true);
    sft->add_option("--ckpt", ckpts, "base checkpoint")->required();
    sft->add_option("--regime", regime_text,
                    "oracle | naive(k) | phds [a,b,c] -> anchor")
        ->required();

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint at one k");
    add_common(eval, false);
    eval->add_option("--ckpt", ckpts, "checkpoint to evaluate")->required();
    eval->add_option("--k", ks, "evaluation k (default: the checkpoint's k_pre)");
    eval->add_flag("--override-k-bound", override_k, "permit k above k_pre");

    auto* sweep_cmd = app.add_subcommand("sweep", "evaluate across k and emit a CSV");
    add_common(sweep_cmd, true);
    sweep_cmd->add_option("--ckpt", ckpts, "checkpoint to evaluate")->required();
    sweep_cmd->add_option("--k-list", k_list, "k values to sweep")->delimiter(',');
    sweep_cmd->add_flag("--override-k-bound", override_k, "permit k above k_pre");

    auto* agree = app.add_subcommand("agree", "answer agreement between two (model, k) pairs");
    add_common(agree, false);
    agree->add_option("--ckpt", ckpts, "one checkpoint (two k) or two checkpoints")->required();
    agree->add_option("--k", ks, "k values, paired with the checkpoints")->delimiter(',');
    agree->add_flag("--override-k-bound", override_k, "permit k above k_pre");

    auto* flops = app.add_subcommand("flops", "active parameters and FLOPs per token");
    flops->add_option("--config", config_path, "run configuration file")->required();
    flops->add_option("--k-list", k_list, "k values to report")->delimiter(',');
    flops->add_option("--k", ks, "single k to report");

    auto* ablate = app.add_subcommand("ablate", "run one ablation matrix");
    add_common(ablate, true);
    ablate->add_option("--ckpt", ckpts, "base checkpoint")->required();
    ablate->add_option("--kind", kind, "epsilon | ktrain_sets | curriculum | subset")
        ->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        error_line("cli", e.what());
        return 2;
    }

    std::optional<uint64_t> seed;
    for (auto* sub : app.get_subcommands()) {
        auto* opt = sub->get_option_no_throw("--seed");
        if (opt && opt->count()) seed = seed_val;
    }

    return guarded([&]() -> int {
        if (pretrain->parsed()) return cmd_pretrain(config_path, out_dir, seed);
        if (sft->parsed()) {
            if (ckpts.size() != 1) throw ConfigError("sft: exactly one --ckpt");
            return cmd_sft(config_path, ckpts[0], regime_text, out_dir, seed);
        }
        if (eval->parsed()) {
            if (ckpts.size() != 1) throw ConfigError("eval: exactly one --ckpt");
            if (ks.size() > 1) throw ConfigError("eval: at most one --k");
            return cmd_eval(config_path, ckpts[0], ks.empty() ? 0 : ks[0], override_k, seed);
        }
        if (sweep_cmd->parsed()) {
            if (ckpts.size() != 1) throw ConfigError("sweep: exactly one --ckpt");
            return cmd_sweep(config_path, ckpts[0], k_list, override_k, out_dir, seed);
        }
        if (agree->parsed()) return cmd_agree(config_path, ckpts, ks, override_k, seed);
        if (flops->parsed()) {
            if (!ks.empty()) k_list.insert(k_list.end(), ks.begin(), ks.end());
            return cmd_flops(config_path, k_list);
        }
        if (ablate->parsed()) {
            if (ckpts.size() != 1) throw ConfigError("ablate: exactly one --ckpt");
            return cmd_ablate(config_path, ckpts[0], kind, out_dir, seed);
        }
        throw ConfigError("no subcommand given");
    });
}
