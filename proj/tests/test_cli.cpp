#include <gtest/gtest.h>

#include <sys/wait.h>

#include <chrono>
#include <filesystem>

#include "ftss/binary.hpp"
#include "ftss/dataset.hpp"
#include "ftss/edf.hpp"
#include "ftss/metrics.hpp"

namespace fs = std::filesystem;

namespace ftss {
namespace {

const std::string kCli = FTSS_CLI_PATH;

int run(const std::string& args, const std::string& log = "/dev/null") {
  const int st = std::system((kCli + " " + args + " >" + log + " 2>&1").c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

std::size_t count_lines(const std::string& text) { return std::size_t(std::count(text.begin(), text.end(), '\n')); }

class Cli : public ::testing::Test {
 protected:
  static fs::path root;

  static std::string p(const std::string& rel) { return (root / rel).string(); }

  // 140 epochs over 7 subjects, a tiny pretrained model and a fine-tuned one.
  static void SetUpTestSuite() {
    root = fs::temp_directory_path() / "ftss_cli_test";
    fs::remove_all(root);
    fs::create_directories(root);
    write_file(p("tiny.cfg"), "blocks=2\nheads=2\ndim=8\nmlp_dim=16\ndropout=0.0\nbatch=10\n");
    ASSERT_EQ(run("synth --out " + p("data") + " --per-class 28 --seed 3"), 0);
    ASSERT_EQ(run("train --data " + p("data") + " --config " + p("tiny.cfg") + " --phase pretrain --epochs 2 --out " +
                  p("pre")),
              0);
    ASSERT_EQ(run("train --data " + p("data") + " --config " + p("tiny.cfg") + " --phase finetune --init " +
                  p("pre/model.ftss") + " --epochs 1 --out " + p("fin")),
              0);
  }

  static void TearDownTestSuite() { fs::remove_all(root); }
};

fs::path Cli::root;

TEST_F(Cli, SynthPerClassIsDeterministic) {
  ASSERT_EQ(run("synth --out " + p("s1") + " --per-class 100 --seed 7"), 0);
  ASSERT_EQ(run("synth --out " + p("s2") + " --per-class 100 --seed 7"), 0);
  const auto manifest = read_file(p("s1/manifest.csv"));
  EXPECT_EQ(count_lines(manifest), 501u);
  EXPECT_EQ(read_file(p("s1/epochs.csv")), read_file(p("s2/epochs.csv")));
  EXPECT_EQ(manifest, read_file(p("s2/manifest.csv")));
  EXPECT_EQ(load_csv_epochs(p("s1/epochs.csv")).size(), 500u);
  fs::remove_all(p("s1"));
  fs::remove_all(p("s2"));
}

TEST_F(Cli, ImbalancedPresetFollowsTableShares) {
  ASSERT_EQ(run("synth --out " + p("imb") + " --preset imbalanced --total 1000 --seed 1"), 0);
  const auto epochs = load_csv_epochs(p("imb/epochs.csv"));
  std::array<std::size_t, 5> counts{};
  for (const auto& e : epochs) ++counts[e.stage];
  const std::array<double, 5> share = {0.288, 0.037, 0.409, 0.126, 0.140};
  for (std::size_t s = 0; s < 5; ++s) EXPECT_NEAR(double(counts[s]), 1000 * share[s], 1.0) << stage_name(s);
  fs::remove_all(p("imb"));
}

TEST_F(Cli, UnwritableOutputIsExitTwo) {
  EXPECT_EQ(run("synth --out /proc/ftss_no_such_dir --per-class 1"), 2);
}

TEST_F(Cli, TrainWritesCheckpointLogAndConfig) {
  EXPECT_TRUE(fs::exists(p("pre/model.ftss")));
  const auto log = read_file(p("pre/train_log.csv"));
  EXPECT_EQ(log.rfind("epoch,phase,loss,train_acc,val_acc\n1,pretrain,", 0), 0u);
  EXPECT_EQ(count_lines(log), 3u);
  EXPECT_NE(read_file(p("fin/train_log.csv")).find("\n1,finetune,"), std::string::npos);
  const auto cfg = read_file(p("pre/run.cfg"));
  EXPECT_NE(cfg.find("\ndropout=0\n"), std::string::npos);
  EXPECT_NE(cfg.find("\nlr_pretrain=0.001\n"), std::string::npos);
  EXPECT_NE(read_file(p("fin/run.cfg")).find("\nlr_finetune=0.0001\n"), std::string::npos);
  const auto ck = load_checkpoint<float>(p("fin/model.ftss"));
  EXPECT_EQ(ck.params.config.dim, 8u);
  EXPECT_EQ(ck.get("phase"), "finetune");
}

TEST_F(Cli, FlagsOverrideConfigFile) {
  ASSERT_EQ(run("train --data " + p("data") + " --config " + p("tiny.cfg") +
                " --set dropout=0.25 --epochs 1 --seed 9 --out " + p("ovr")),
            0);
  const auto cfg = read_file(p("ovr/run.cfg"));
  EXPECT_NE(cfg.find("\ndropout=0.25\n"), std::string::npos);
  EXPECT_EQ(cfg.rfind("seed=9\n", 0), 0u);
}

TEST_F(Cli, FinetuneWithoutInitIsExitTwo) {
  EXPECT_EQ(run("train --data " + p("data") + " --phase finetune --out " + p("x")), 2);
}

TEST_F(Cli, UnknownConfigKeyIsExitTwo) {
  EXPECT_EQ(run("train --data " + p("data") + " --set no_such_key=1 --out " + p("x")), 2);
}

TEST_F(Cli, DivergedLossIsExitThree) {
  EXPECT_EQ(run("train --data " + p("data") + " --config " + p("tiny.cfg") +
                " --set lr_pretrain=1e30 --epochs 3 --out " + p("nan")),
            3);
}

TEST_F(Cli, TinySmokeConfigIsFast) {
  ASSERT_EQ(run("synth --out " + p("fifty") + " --per-class 10 --seed 2"), 0);
  const auto t0 = std::chrono::steady_clock::now();
  ASSERT_EQ(run("train --data " + p("fifty") + " --config " + p("tiny.cfg") + " --epochs 5 --out " + p("smoke")), 0);
  const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_LT(sec, 60.0);
  EXPECT_EQ(count_lines(read_file(p("smoke/train_log.csv"))), 6u);
}

TEST_F(Cli, EvalWritesReports) {
  ASSERT_EQ(run("eval --data " + p("data") + " --checkpoint " + p("fin/model.ftss") + " --report " + p("rep")), 0);
  EXPECT_EQ(read_file(p("rep/metrics.csv")).rfind("stage,precision,recall,f1,support,undefined\n", 0), 0u);
  EXPECT_EQ(read_file(p("rep/confusion.csv")).rfind("true\\pred,W,N1,N2,N3,REM\n", 0), 0u);
  EXPECT_EQ(read_file(p("rep/transitions.csv")).rfind("kind,pair,count\n", 0), 0u);
  for (int s = 0; s < 7; ++s) {
    EXPECT_EQ(read_hypnogram(p("rep/hypnogram_subject" + std::to_string(s) + ".csv")).size(), 20u);
  }
}

TEST_F(Cli, EvalSevenFoldsGivesFoldAndPooledReports) {
  ASSERT_EQ(run("eval --data " + p("data") + " --checkpoint " + p("fin/model.ftss") + " --folds 7 --report " +
                p("rep7")),
            0);
  std::size_t scored = 0;
  for (int f = 0; f < 7; ++f) {
    const auto dir = p("rep7/fold" + std::to_string(f));
    ASSERT_TRUE(fs::exists(dir + "/metrics.csv"));
    const auto m = read_file(dir + "/metrics.csv");
    const auto at = m.find("\naccuracy,");
    ASSERT_NE(at, std::string::npos);
    scored += std::stoul(m.substr(m.find(",,,", at) + 3));
  }
  EXPECT_EQ(scored, 140u);
  EXPECT_TRUE(fs::exists(p("rep7/pooled/metrics.csv")));
}

TEST_F(Cli, ExplainWritesMapsPerChannel) {
  ASSERT_EQ(run("explain --data " + p("data") + " --checkpoint " + p("fin/model.ftss") + " --epoch 0:3 --out-dir " +
                p("ex")),
            0);
  const auto pgm = read_file(p("ex/relevance_ch0.pgm"));
  EXPECT_EQ(pgm.rfind("P5\n480 80\n255\n", 0), 0u);
  EXPECT_TRUE(fs::exists(p("ex/relevance_ch1.pgm")));
  EXPECT_FALSE(fs::exists(p("ex/relevance_ch2.pgm")));
  EXPECT_EQ(count_lines(read_file(p("ex/entropy.csv"))), 1u + 2 * 5);
  EXPECT_EQ(count_lines(read_file(p("ex/relevance.csv"))), 1u + 2 * 5 * 30);
  EXPECT_EQ(run("explain --data " + p("data") + " --checkpoint " + p("fin/model.ftss") +
                " --epoch 5 --rollout matmul --out-dir " + p("exm")),
            0);
}

TEST_F(Cli, ExplainUnknownEpochIsExitTwo) {
  EXPECT_EQ(run("explain --data " + p("data") + " --checkpoint " + p("fin/model.ftss") + " --epoch 99:0 --out-dir " +
                p("ex2")),
            2);
  EXPECT_EQ(run("explain --data " + p("data") + " --checkpoint " + p("fin/model.ftss") + " --epoch 140 --out-dir " +
                p("ex2")),
            2);
}

// Two-signal recording of `epochs` synthetic epochs at `fs`.
std::string synthetic_edf(std::size_t fs, std::size_t epochs) {
  SynthConfig sc;
  sc.fs = fs;
  sc.seed = 5;
  Recording rec;
  rec.n_records = epochs * kEpochSeconds;
  for (const char* label : {"EEG C4-A1", "EEG Fpz-Cz"}) {
    EdfSignal s;
    s.label = label;
    s.samples_per_record = fs;
    rec.signals.push_back(s);
  }
  for (std::size_t e = 0; e < epochs; ++e) {
    Rng rng = make_stream(sc.seed, {e});
    const auto sig = synth_signal(e % kStages, sc, rng);
    for (std::size_t c = 0; c < 2; ++c)
      for (double v : sig.channels[c]) rec.signals[c].samples.push_back(std::clamp(v, -250.0, 250.0));
  }
  return write_edf(rec);
}

TEST_F(Cli, StageEdfAtBothRates) {
  for (std::size_t fs : {100u, 125u}) {
    const auto edf = p("rec" + std::to_string(fs) + ".edf");
    write_file(edf, synthetic_edf(fs, 6));
    const auto out = p("stage" + std::to_string(fs) + "/hyp.csv");
    ASSERT_EQ(run("stage --edf " + edf + " --channels C4,Fpz --checkpoint " + p("fin/model.ftss") + " --out " + out), 0)
        << fs;
    EXPECT_EQ(read_hypnogram(out).size(), 6u);
    const auto first = read_file(out);
    ASSERT_EQ(run("stage --edf " + edf + " --channels C4,Fpz --checkpoint " + p("fin/model.ftss") + " --out " + out), 0);
    EXPECT_EQ(read_file(out), first);
    EXPECT_TRUE(fs::exists(p("stage" + std::to_string(fs) + "/run.cfg")));
  }
}

TEST_F(Cli, StageMissingChannelListsLabels) {
  write_file(p("rec.edf"), synthetic_edf(125, 1));
  EXPECT_EQ(run("stage --edf " + p("rec.edf") + " --channels C4,O2 --checkpoint " + p("fin/model.ftss") + " --out " +
                    p("st/h.csv"),
                p("stage_err.txt")),
            2);
  const auto err = read_file(p("stage_err.txt"));
  EXPECT_NE(err.find("EEG C4-A1"), std::string::npos);
  EXPECT_NE(err.find("EEG Fpz-Cz"), std::string::npos);
}

TEST_F(Cli, StageCsvEmitsOneRowPerEpoch) {
  ASSERT_EQ(run("stage --csv " + p("data/epochs.csv") + " --checkpoint " + p("fin/model.ftss") + " --out " +
                p("stc/h.csv")),
            0);
  EXPECT_EQ(read_hypnogram(p("stc/h.csv")).size(), 140u);
}

}  // namespace
}  // namespace ftss
