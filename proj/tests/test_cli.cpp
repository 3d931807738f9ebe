// End-to-end runs of the installed binary through a shell, checking exit
// codes, output formats, and the files each subcommand leaves behind.

#include <gtest/gtest.h>

#include <phds/checkpoint.hpp>
#include <phds/config.hpp>
#include <phds/evaluator.hpp>
#include <phds/synth.hpp>

#include <json.hpp>
#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

using namespace phds;
namespace fs = std::filesystem;

namespace {

struct RunResult {
    int code = -1;
    std::string out;
    std::string err;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::string> lines_of(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream ss(text);
    std::string line;
    while (std::getline(ss, line)) out.push_back(line);
    return out;
}

class CliTest : public ::testing::Test {
  protected:
    static fs::path root() { return fs::temp_directory_path() / "phds_cli_test"; }
    static fs::path corpus_path() { return root() / "corpus.txt"; }
    static fs::path config_path() { return root() / "config.json"; }
    static fs::path base_ckpt() { return root() / "base_out" / "base.phds"; }

    static RunResult run(const std::string& args) {
        RunResult r;
        const fs::path out = root() / "stdout.txt";
        const fs::path err = root() / "stderr.txt";
        const std::string cmd = std::string(PHDS_BIN) + " " + args + " > \"" + out.string() +
                                "\" 2> \"" + err.string() + "\"";
        const int rc = std::system(cmd.c_str());
        if (rc == -1) return r;
        r.code = WEXITSTATUS(rc);
        r.out = slurp(out);
        r.err = slurp(err);
        return r;
    }

    static void write_config(const fs::path& path, int64_t total_steps, int64_t eval_every) {
        nlohmann::json j;
        j["model"] = {{"n_layers", 1},   {"d_model", 32},     {"n_heads", 2},
                      {"n_experts", 4},  {"d_expert", 16},    {"k_pre", 2},
                      {"vocab_size", 258}, {"context_len", 64}};
        j["train"] = {{"total_steps", total_steps}, {"eval_every", eval_every},
                      {"batch_size", 4},            {"seq_len", 32},
                      {"learning_rate", 1e-3},      {"LB", 0.01}};
        j["data"] = {{"corpus", corpus_path().string()},
                     {"mc_items", 24},
                     {"mc_options", 4},
                     {"mc_prompt_len", 16},
                     {"mc_cont_len", 4}};
        j["eval"] = {{"seq_len", 32}, {"lm_batch_size", 4}, {"max_lm_batches", 4}};
        j["seed"] = 7;
        std::ofstream f(path, std::ios::binary);
        f << j.dump(2) << '\n';
    }

    static void SetUpTestSuite() {
        fs::remove_all(root());
        fs::create_directories(root());
        std::ofstream(corpus_path(), std::ios::binary) << synth_corpus_text(60000);
        write_config(config_path(), 12, 6);

        const auto r = run("pretrain --config \"" + config_path().string() + "\" --out \"" +
                           (root() / "base_out").string() + "\" --seed 7");
        ASSERT_EQ(r.code, 0) << r.err;
        ASSERT_TRUE(fs::exists(base_ckpt()));
    }

    static void TearDownTestSuite() { fs::remove_all(root()); }

    static EvalDataset dataset_from_config(const RunConfig& cfg, const Corpus& corpus,
                                           std::vector<McItem> items) {
        EvalDataset ds;
        ds.corpus = &corpus;
        ds.items = std::move(items);
        ds.seq_len = cfg.eval.seq_len;
        ds.lm_batch_size = cfg.eval.lm_batch_size;
        ds.max_lm_batches = cfg.eval.max_lm_batches;
        ds.mc_rows_per_chunk = cfg.eval.mc_rows_per_chunk;
        return ds;
    }
};

TEST_F(CliTest, PretrainLeavesCheckpointAndConfigCopy) {
    auto loaded = load_checkpoint(base_ckpt().string());
    EXPECT_EQ(loaded.model.config().k_pre, 2);
    EXPECT_EQ(loaded.meta.step, 12);
    EXPECT_EQ(loaded.meta.rng_seed, 7u);

    const fs::path copied = root() / "base_out" / "config.json";
    ASSERT_TRUE(fs::exists(copied));
    EXPECT_EQ(slurp(copied), slurp(config_path()));
}

TEST_F(CliTest, EvalReportMatchesLibrary) {
    const auto r = run("eval --config \"" + config_path().string() + "\" --ckpt \"" +
                       base_ckpt().string() + "\" --k 1");
    ASSERT_EQ(r.code, 0) << r.err;

    int k = 0;
    double ppl = 0, acc = 0;
    long long flops = 0, active = 0;
    ASSERT_EQ(std::sscanf(r.out.c_str(),
                          "eval k=%d perplexity=%lf mc_accuracy=%lf flops_per_token=%lld "
                          "active_params=%lld",
                          &k, &ppl, &acc, &flops, &active),
              5)
        << r.out;
    EXPECT_EQ(k, 1);

    const RunConfig cfg = load_run_config(config_path().string());
    const Corpus corpus = load_corpus(cfg.data.corpus_path, cfg.data.val_fraction);
    auto items = make_mc_task(corpus, cfg.data.mc_items, cfg.data.mc_options, cfg.data.mc_seed,
                              cfg.data.mc_prompt_len, cfg.data.mc_cont_len);
    auto ds = dataset_from_config(cfg, corpus, std::move(items));
    auto model = load_checkpoint(base_ckpt().string()).model;
    const auto rep = evaluate(model, ds, 1);
    EXPECT_NEAR(ppl, rep.perplexity, 1e-3);
    EXPECT_NEAR(acc, rep.mc_accuracy, 1e-6);
    EXPECT_EQ(flops, (long long)rep.flops_per_token);
    EXPECT_EQ(active, (long long)rep.active_params);
}

TEST_F(CliTest, EvalDefaultsToPretrainK) {
    const auto r = run("eval --config \"" + config_path().string() + "\" --ckpt \"" +
                       base_ckpt().string() + "\"");
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(r.out.rfind("eval k=2 ", 0), 0u) << r.out;
}

TEST_F(CliTest, EvalAboveBoundNeedsOverride) {
    const std::string common = "eval --config \"" + config_path().string() + "\" --ckpt \"" +
                               base_ckpt().string() + "\" --k 3";
    const auto denied = run(common);
    EXPECT_EQ(denied.code, 3);
    EXPECT_NE(denied.err.find("error kind=sparsity"), std::string::npos) << denied.err;

    const auto forced = run(common + " --override-k-bound");
    ASSERT_EQ(forced.code, 0) << forced.err;
    EXPECT_EQ(forced.out.rfind("eval k=3 ", 0), 0u) << forced.out;
}

TEST_F(CliTest, SftPhdsRegimeSelectsCheckpoint) {
    const fs::path out = root() / "sft_phds";
    const auto r = run("sft --config \"" + config_path().string() + "\" --ckpt \"" +
                       base_ckpt().string() + "\" --regime 'phds [1,2] -> 1' --out \"" +
                       out.string() + "\"");
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("sft done regime=\"phds [1,2] -> 1\""), std::string::npos) << r.out;
    EXPECT_NE(r.out.find("metric k=1 "), std::string::npos) << r.out;
    EXPECT_NE(r.out.find("metric k=2 "), std::string::npos) << r.out;

    auto sel = load_checkpoint((out / "selected.phds").string());
    ASSERT_TRUE(sel.meta.schedule.anchor_k.has_value());
    EXPECT_EQ(*sel.meta.schedule.anchor_k, 1);
    EXPECT_EQ(sel.meta.schedule.k_train_set, (std::vector<int>{1, 2}));
}

TEST_F(CliTest, SftAcceptsUtf8Arrow) {
    const fs::path out = root() / "sft_arrow";
    const auto r = run("sft --config \"" + config_path().string() + "\" --ckpt \"" +
                       base_ckpt().string() + "\" --regime 'phds [1,2] \xE2\x86\x92 2' --out \"" +
                       out.string() + "\"");
    ASSERT_EQ(r.code, 0) << r.err;
    auto sel = load_checkpoint((out / "selected.phds").string());
    ASSERT_TRUE(sel.meta.schedule.anchor_k.has_value());
    EXPECT_EQ(*sel.meta.schedule.anchor_k, 2);
}

TEST_F(CliTest, SftNaiveRegime) {
    const fs::path out = root() / "sft_naive";
    const auto r = run("sft --config \"" + config_path().string() + "\" --ckpt \"" +
                       base_ckpt().string() + "\" --regime 'naive(1)' --out \"" + out.string() +
                       "\"");
    ASSERT_EQ(r.code, 0) << r.err;
    auto sel = load_checkpoint((out / "selected.phds").string());
    EXPECT_EQ(sel.meta.schedule.k_train_set, (std::vector<int>{1}));
    EXPECT_FALSE(sel.meta.schedule.anchor_k.has_value());
}

TEST_F(CliTest, SftOracleRejectsForeignK) {
    const auto r = run("sft --config \"" + config_path().string() + "\" --ckpt \"" +
                       base_ckpt().string() + "\" --regime 'oracle(1)' --out \"" +
                       (root() / "sft_bad").string() + "\"");
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("error kind=config"), std::string::npos) << r.err;
}

TEST_F(CliTest, SweepWritesCsvMatchingStdout) {
    const fs::path out = root() / "sweep_out";
    const auto r = run("sweep --config \"" + config_path().string() + "\" --ckpt \"" +
                       base_ckpt().string() + "\" --k-list 1,2 --out \"" + out.string() + "\"");
    ASSERT_EQ(r.code, 0) << r.err;

    const auto rows = lines_of(r.out);
    ASSERT_EQ(rows.size(), 3u) << r.out;
    EXPECT_EQ(rows[0], "k,active_params,flops_per_token,perplexity,mc_accuracy");
    EXPECT_EQ(rows[1].rfind("1,", 0), 0u);
    EXPECT_EQ(rows[2].rfind("2,", 0), 0u);
    EXPECT_EQ(slurp(out / "sweep.csv"), r.out);
}

TEST_F(CliTest, SweepDefaultCoversOneThroughKPre) {
    const fs::path out = root() / "sweep_default";
    const auto r = run("sweep --config \"" + config_path().string() + "\" --ckpt \"" +
                       base_ckpt().string() + "\" --out \"" + out.string() + "\"");
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(lines_of(r.out).size(), 3u) << r.out;
}

TEST_F(CliTest, AgreeTwoKsOnOneCheckpoint) {
    const auto r = run("agree --config \"" + config_path().string() + "\" --ckpt \"" +
                       base_ckpt().string() + "\" --k 1,2");
    ASSERT_EQ(r.code, 0) << r.err;

    char ma[64] = {0}, mb[64] = {0};
    int ka = 0, kb = 0;
    long long n = 0;
    double value = -1;
    ASSERT_EQ(std::sscanf(r.out.c_str(), "model_a=%63s model_b=%63s k_a=%d k_b=%d n=%lld "
                                         "agreement=%lf",
                          ma, mb, &ka, &kb, &n, &value),
              6)
        << r.out;
    EXPECT_STREQ(ma, "base");
    EXPECT_STREQ(mb, "base");
    EXPECT_EQ(ka, 1);
    EXPECT_EQ(kb, 2);
    EXPECT_EQ(n, 24);

    const RunConfig cfg = load_run_config(config_path().string());
    const Corpus corpus = load_corpus(cfg.data.corpus_path, cfg.data.val_fraction);
    auto items = make_mc_task(corpus, cfg.data.mc_items, cfg.data.mc_options, cfg.data.mc_seed,
                              cfg.data.mc_prompt_len, cfg.data.mc_cont_len);
    auto model = load_checkpoint(base_ckpt().string()).model;
    const auto a = mc_answers(model, items, 1, false, cfg.eval.mc_rows_per_chunk);
    const auto b = mc_answers(model, items, 2, false, cfg.eval.mc_rows_per_chunk);
    EXPECT_NEAR(value, agreement(a, b), 5e-7);
}

TEST_F(CliTest, AgreeTwoCheckpointsDefaultsToTheirKPre) {
    const fs::path twin = root() / "twin.phds";
    fs::copy_file(base_ckpt(), twin, fs::copy_options::overwrite_existing);
    const auto r = run("agree --config \"" + config_path().string() + "\" --ckpt \"" +
                       base_ckpt().string() + "\" --ckpt \"" + twin.string() + "\"");
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(r.out, "model_a=base model_b=twin k_a=2 k_b=2 n=24 agreement=1.000000\n");
}

TEST_F(CliTest, AgreeOneCheckpointOneKRejected) {
    const auto r = run("agree --config \"" + config_path().string() + "\" --ckpt \"" +
                       base_ckpt().string() + "\" --k 1");
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("error kind=config"), std::string::npos) << r.err;
}

TEST_F(CliTest, FlopsMatchesClosedForm) {
    nlohmann::json j;
    j["model"] = {{"n_layers", 24},  {"d_model", 1024},      {"n_heads", 16},
                  {"n_experts", 16}, {"d_expert", 768},      {"k_pre", 6},
                  {"vocab_size", 25000}, {"context_len", 4096}};
    j["data"] = {{"corpus", corpus_path().string()}};
    const fs::path big = root() / "big.json";
    std::ofstream(big, std::ios::binary) << j.dump(2) << '\n';

    const auto r = run("flops --config \"" + big.string() + "\" --k-list 2,4,6");
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(r.out,
              "k,active_params,flops_per_token\n"
              "2,239902720,882458624\n"
              "4,353148928,1108951040\n"
              "6,466395136,1335443456\n");
}

TEST_F(CliTest, AblateSubsetWritesTable) {
    const fs::path cfg = root() / "ablate_cfg.json";
    write_config(cfg, 4, 4);
    const fs::path out = root() / "ablate_out";
    const auto r = run("ablate --config \"" + cfg.string() + "\" --ckpt \"" +
                       base_ckpt().string() + "\" --kind subset --out \"" + out.string() + "\"");
    ASSERT_EQ(r.code, 0) << r.err;

    const auto rows = lines_of(slurp(out / "ablate_subset.csv"));
    ASSERT_EQ(rows.size(), 6u);
    EXPECT_EQ(rows[0], "config,acc_k1,acc_k2");
    EXPECT_EQ(rows[1].rfind("baseline,", 0), 0u);
    for (size_t i = 1; i < rows.size(); ++i)
        EXPECT_EQ(std::count(rows[i].begin(), rows[i].end(), ','), 2) << rows[i];
}

TEST_F(CliTest, BadConfigExitsTwo) {
    const fs::path bad = root() / "bad.json";
    std::ofstream(bad, std::ios::binary) << "{\"model\": {\"n_layer\": 3}}\n";
    const auto r = run("eval --config \"" + bad.string() + "\" --ckpt \"" +
                       base_ckpt().string() + "\"");
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("error kind=config msg=\"config: unknown key"), std::string::npos)
        << r.err;
}

TEST_F(CliTest, MissingCheckpointExitsThree) {
    const auto r = run("eval --config \"" + config_path().string() + "\" --ckpt \"" +
                       (root() / "nope.phds").string() + "\"");
    EXPECT_EQ(r.code, 3);
    EXPECT_NE(r.err.find("error kind=format"), std::string::npos) << r.err;
}

TEST_F(CliTest, MissingRequiredFlagExitsTwo) {
    const auto r = run("eval --config \"" + config_path().string() + "\"");
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("error kind=cli"), std::string::npos) << r.err;
}

}  // namespace
