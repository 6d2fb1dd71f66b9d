#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>
#include <set>
#include <utility>

#include "ftss/training.hpp"
#include "test_support.hpp"

namespace ftss {
namespace {

ModelConfig tiny_model(std::size_t len = 4) {
  ModelConfig c;
  c.blocks = 1;
  c.heads = 2;
  c.dim = 8;
  c.mlp_dim = 8;
  c.dropout = 0.0;
  c.seq_len = len;
  c.patch_dim = 4;
  c.channels = 1;
  return c;
}

Example make_example(std::size_t label, std::size_t len, Rng& rng, double sep = 2.0) {
  std::normal_distribution<double> d(0.0, 0.3);
  Example ex;
  ex.label = label;
  ex.seq.length = len;
  ex.seq.patch_dim = 4;
  ex.seq.channels = 1;
  ex.seq.patches.resize(len * 4);
  for (std::size_t i = 0; i < ex.seq.patches.size(); ++i) {
    ex.seq.patches[i] = d(rng) + (i % 4 == label % 4 ? sep : 0.0) - (label == 4 ? sep : 0.0);
  }
  return ex;
}

std::vector<Example> toy_set(std::size_t per_class, std::size_t len, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Example> out;
  for (std::size_t i = 0; i < per_class; ++i)
    for (std::size_t c = 0; c < 5; ++c) {
      out.push_back(make_example(c, len, rng));
      out.back().subject = i;
      out.back().index = c;
    }
  return out;
}

TEST(CrossEntropy, UniformLogitsGiveLogFive) {
  const std::vector<double> z(5, 0.0);
  EXPECT_NEAR(cross_entropy(z, 3), std::log(5.0), 1e-15);
  EXPECT_NEAR(cross_entropy(z, 0), 1.6094379124341003, 1e-15);
}

TEST(CrossEntropy, ConfidentCorrectIsNearZero) {
  std::vector<double> z(5, -30.0);
  z[2] = 30.0;
  EXPECT_LT(cross_entropy(z, 2), 1e-6);
}

TEST(CrossEntropy, WeightedLabel) {
  const std::vector<double> z(5, 0.0), w = {2, 1, 1, 1, 1};
  EXPECT_NEAR(cross_entropy(z, 0, w), 2 * std::log(5.0), 1e-15);
}

TEST(CrossEntropy, InvalidLabelIsContractError) {
  const std::vector<double> z(5, 0.0);
  EXPECT_THROW(cross_entropy(z, 5), ContractError);
  Graph<double> g;
  EXPECT_THROW(cross_entropy(g.parameter(Tensor<double>({1, 5})), 7), ContractError);
}

TEST(CrossEntropy, GraphOpMatchesScalarAndFiniteDifferences) {
  Rng rng(1);
  const auto z = testing::random_tensor({1, 5}, rng, 2.0);
  Graph<double> g;
  const auto loss = cross_entropy(g.parameter(z), 3, 1.7);
  EXPECT_NEAR(loss.value()[0], 1.7 * cross_entropy(std::vector<double>(z.data().begin(), z.data().end()), 3),
              1e-14);
  const auto res = testing::check_gradients(
      {z}, [](Graph<double>&, const std::vector<Var<double>>& v) { return cross_entropy(v[0], 3, 1.7); });
  EXPECT_LT(res.max_rel, 1e-6);
}

TEST(ClassWeights, Balanced) {
  const std::vector<std::size_t> counts = {7, 7, 7, 7, 7};
  for (double w : class_weights(counts)) EXPECT_EQ(w, 1.0);
}

TEST(ClassWeights, InverseFrequency) {
  const std::vector<std::size_t> counts = {10, 10, 10, 10, 60};
  const auto w = class_weights(counts);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(w[i], 2.0, 1e-15);
  EXPECT_NEAR(w[4], 1.0 / 3.0, 1e-15);
}

TEST(ClassWeights, ScaleInvariantAndZeroRejected) {
  const std::vector<std::size_t> a = {3, 5, 8, 1, 2}, b = {30, 50, 80, 10, 20};
  const auto wa = class_weights(a), wb = class_weights(b);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(wa[i], wb[i], 1e-15);
  const std::vector<std::size_t> z = {3, 0, 1, 1, 1};
  EXPECT_THROW(class_weights(z), ConfigError);
}

struct VecParams {
  std::vector<Tensor<double>> values;
  std::vector<Tensor<double>*> ptrs;
  explicit VecParams(std::vector<Tensor<double>> v) : values(std::move(v)) {
    for (auto& t : values) ptrs.push_back(&t);
  }
};

TEST(AdamW, ZeroGradsWithoutDecayLeaveParams) {
  VecParams p({Tensor<double>::vector({1.5, -2.0, 0.25})});
  OptimizerState<double> st(p.ptrs);
  TrainConfig cfg;
  cfg.weight_decay = 0;
  const std::vector<Tensor<double>> g = {Tensor<double>({3})};
  for (int i = 0; i < 3; ++i) adamw_step<double>(p.ptrs, g, st, 1e-3, cfg);
  EXPECT_EQ(p.values[0], Tensor<double>::vector({1.5, -2.0, 0.25}));
  EXPECT_EQ(st.step, 3u);
}

TEST(AdamW, FirstStepIsLrSizedSignStep) {
  VecParams p({Tensor<double>::vector({1.0, 1.0})});
  OptimizerState<double> st(p.ptrs);
  TrainConfig cfg;
  cfg.weight_decay = 0;
  const std::vector<Tensor<double>> g = {Tensor<double>::vector({0.3, -40.0})};
  adamw_step<double>(p.ptrs, g, st, 0.01, cfg);
  EXPECT_NEAR(p.values[0][0], 1.0 - 0.01, 1e-7);
  EXPECT_NEAR(p.values[0][1], 1.0 + 0.01, 1e-9);
}

// Hand-expanded two steps: p0 = [1, -2], g1 = [0.5, -1], g2 = [0.1, 2],
// lr = 0.1, wd = 0.1, betas (0.9, 0.999), eps 1e-8.
TEST(AdamW, TwoStepClosedForm) {
  VecParams p({Tensor<double>::vector({1.0, -2.0})});
  OptimizerState<double> st(p.ptrs);
  TrainConfig cfg;
  cfg.weight_decay = 0.1;
  const double lr = 0.1;
  const double p0[2] = {1.0, -2.0}, g1[2] = {0.5, -1.0}, g2[2] = {0.1, 2.0};
  double expected[2];
  for (int i = 0; i < 2; ++i) {
    double q = p0[i] * (1 - lr * 0.1);
    double m = 0.1 * g1[i], v = 0.001 * g1[i] * g1[i];
    q -= lr * (m / 0.1) / (std::sqrt(v / 0.001) + 1e-8);
    q *= (1 - lr * 0.1);
    m = 0.9 * m + 0.1 * g2[i];
    v = 0.999 * v + 0.001 * g2[i] * g2[i];
    q -= lr * (m / 0.19) / (std::sqrt(v / (1 - 0.999 * 0.999)) + 1e-8);
    expected[i] = q;
  }
  adamw_step<double>(p.ptrs, std::vector<Tensor<double>>{Tensor<double>::vector({0.5, -1.0})}, st, lr, cfg);
  adamw_step<double>(p.ptrs, std::vector<Tensor<double>>{Tensor<double>::vector({0.1, 2.0})}, st, lr, cfg);
  EXPECT_NEAR(p.values[0][0], expected[0], 1e-10);
  EXPECT_NEAR(p.values[0][1], expected[1], 1e-10);
  // first coordinate worked separately in 64-bit
  EXPECT_NEAR(p.values[0][0], 0.8007959063646517, 1e-10);
}

TEST(AdamW, NoDecayEqualsAdam) {
  Rng rng(2);
  VecParams p({testing::random_tensor({4, 3}, rng), testing::random_tensor({5}, rng)});
  std::vector<Tensor<double>> ref = p.values, m1 = {Tensor<double>({4, 3}), Tensor<double>({5})},
                              m2 = m1;
  OptimizerState<double> st(p.ptrs);
  TrainConfig cfg;
  cfg.weight_decay = 0;
  for (int step = 1; step <= 20; ++step) {
    std::vector<Tensor<double>> g = {testing::random_tensor({4, 3}, rng), testing::random_tensor({5}, rng)};
    adamw_step<double>(p.ptrs, g, st, 3e-3, cfg);
    for (std::size_t k = 0; k < 2; ++k)
      for (std::size_t e = 0; e < ref[k].size(); ++e) {
        m1[k][e] = 0.9 * m1[k][e] + 0.1 * g[k][e];
        m2[k][e] = 0.999 * m2[k][e] + 0.001 * g[k][e] * g[k][e];
        const double mh = m1[k][e] / (1 - std::pow(0.9, step)), vh = m2[k][e] / (1 - std::pow(0.999, step));
        ref[k][e] -= 3e-3 * mh / (std::sqrt(vh) + 1e-8);
      }
  }
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t e = 0; e < ref[k].size(); ++e) EXPECT_NEAR(p.values[k][e], ref[k][e], 1e-12);
}

TEST(KFold, SevenSubjectsOnePerFold) {
  std::vector<std::size_t> s(7);
  std::iota(s.begin(), s.end(), std::size_t{0});
  const auto folds = kfold_split(s, 7, 1);
  for (const auto& f : folds) EXPECT_EQ(f.size(), 1u);
}

TEST(KFold, HundredSubjectSizes) {
  std::vector<std::size_t> s(100);
  std::iota(s.begin(), s.end(), std::size_t{0});
  const auto folds = kfold_split(s, 7, 3);
  std::multiset<std::size_t> sizes;
  for (const auto& f : folds) sizes.insert(f.size());
  EXPECT_EQ(sizes, (std::multiset<std::size_t>{15, 15, 14, 14, 14, 14, 14}));
}

TEST(KFold, DeterministicAndDisjoint) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::size_t> ids;
    const std::size_t n = 7 + uniform_index(rng, 60);
    for (std::size_t i = 0; i < 5 * n; ++i) ids.push_back(uniform_index(rng, n) * 3);  // repeated ids
    const auto a = kfold_split(ids, 7, 9), b = kfold_split(ids, 7, 9);
    EXPECT_EQ(a, b);
    std::set<std::size_t> seen;
    std::size_t total = 0;
    for (const auto& f : a) {
      total += f.size();
      seen.insert(f.begin(), f.end());
    }
    EXPECT_EQ(seen.size(), total);
    EXPECT_EQ(seen, std::set<std::size_t>(ids.begin(), ids.end()));
  }
  EXPECT_NE(kfold_split({1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14}, 7, 1),
            kfold_split({1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14}, 7, 2));
}

TEST(KFold, TooFewSubjects) { EXPECT_THROW(kfold_split({1, 2, 3, 3, 3, 3, 3}, 7, 0), ConfigError); }

TEST(KFold, EpochsOfASubjectStayTogether) {
  const auto data = toy_set(14, 4, 1);
  std::vector<std::size_t> subjects;
  for (const auto& e : data) subjects.push_back(e.subject);
  const auto folds = kfold_split(subjects, 7, 5);
  std::size_t held = 0;
  for (const auto& f : folds) {
    const auto [train, test] = split_by_subjects(data, f);
    held += test.size();
    for (const auto& a : train)
      for (const auto& b : test) EXPECT_NE(a.subject, b.subject);
  }
  EXPECT_EQ(held, data.size());
}

TEST(Fit, LossDecreasesOnSeparableToy) {
  Rng rng(5);
  std::vector<Example> train = {make_example(0, 4, rng, 3.0), make_example(3, 4, rng, 3.0)};
  auto params = init_params<double>(tiny_model(), rng);
  TrainConfig cfg;
  cfg.max_epochs = 10;
  cfg.batch = 2;
  cfg.lr_pretrain = 1e-2;
  cfg.threads = 1;
  const auto res = fit(train, {}, params, cfg, Phase::kPretrain);
  ASSERT_EQ(res.log.size(), 10u);
  for (std::size_t i = 1; i < res.log.size(); ++i) EXPECT_LT(res.log[i].loss, res.log[i - 1].loss);
}

TEST(Fit, ZeroLrLeavesParams) {
  Rng rng(6);
  auto params = init_params<double>(tiny_model(), rng);
  const auto before = params;
  TrainConfig cfg;
  cfg.max_epochs = 1;
  cfg.lr_pretrain = 0;
  cfg.weight_decay = 0;
  fit(toy_set(3, 4, 1), {}, params, cfg, Phase::kPretrain);
  const auto a = param_pointers(before), b = param_pointers(std::as_const(params));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(*a[i], *b[i]);
}

TEST(Fit, EmptyDatasetIsConfigError) {
  Rng rng(7);
  auto params = init_params<double>(tiny_model(), rng);
  EXPECT_THROW(fit({}, {}, params, TrainConfig{}, Phase::kPretrain), ConfigError);
}

TEST(Fit, SameSeedSameLogAcrossThreadCounts) {
  const auto train = toy_set(6, 4, 2), val = toy_set(2, 4, 3);
  auto run = [&](std::size_t threads) {
    Rng rng(8);
    auto m = tiny_model();
    m.dropout = 0.3;
    auto params = init_params<float>(m, rng);
    TrainConfig cfg;
    cfg.max_epochs = 3;
    cfg.batch = 8;
    cfg.seed = 11;
    cfg.threads = threads;
    return std::pair(training_log_csv(fit(train, val, params, cfg, Phase::kPretrain).log),
                     serialize_checkpoint(params));
  };
  const auto a = run(1), b = run(1), c = run(3);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a, c);
  EXPECT_NE(a.first.find("epoch,phase,loss,train_acc,val_acc\n1,pretrain,"), std::string::npos);
}

TEST(Fit, AllOnesWeightsEqualUnweighted) {
  const auto train = toy_set(5, 4, 4);
  auto run = [&](std::vector<double> w) {
    Rng rng(9);
    auto params = init_params<float>(tiny_model(), rng);
    TrainConfig cfg;
    cfg.max_epochs = 2;
    cfg.batch = 4;
    cfg.class_weights = std::move(w);
    const auto log = training_log_csv(fit(train, {}, params, cfg, Phase::kFinetune).log);
    return log + serialize_checkpoint(params);
  };
  EXPECT_EQ(run({}), run({1, 1, 1, 1, 1}));
  EXPECT_NE(run({}), run({2, 1, 1, 1, 1}));
}

TEST(Fit, LearnsToyProblem) {
  const auto train = toy_set(20, 4, 5), val = toy_set(6, 4, 6);
  Rng rng(10);
  auto params = init_params<float>(tiny_model(), rng);
  TrainConfig cfg;
  cfg.max_epochs = 30;
  cfg.batch = 16;
  cfg.lr_pretrain = 1e-2;
  cfg.patience = 10;
  const auto res = fit(train, val, params, cfg, Phase::kPretrain);
  EXPECT_GE(accuracy_on(val, params), 0.9);
  EXPECT_GE(res.best_epoch, 1u);
}

TEST(Checkpoint, RoundTripIsBitwise) {
  Rng rng(11);
  auto cfg = tiny_model(6);
  cfg.patch_mode = PatchMode::kTimeOnly;
  const auto p32 = init_params<float>(cfg, rng);
  const auto bytes = serialize_checkpoint(p32, nullptr, {{"seed", "42"}});
  const auto back = parse_checkpoint<float>(bytes);
  EXPECT_EQ(serialize_checkpoint(back.params, nullptr, {{"seed", "42"}}), bytes);
  EXPECT_EQ(back.get("seed"), "42");
  EXPECT_EQ(back.params.config.seq_len, 6u);
  EXPECT_EQ(back.params.config.patch_mode, PatchMode::kTimeOnly);
  const auto a = param_pointers(p32), b = param_pointers(std::as_const(back.params));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(*a[i], *b[i]);

  const auto p64 = init_params<double>(tiny_model(), rng);
  EXPECT_EQ(serialize_checkpoint(parse_checkpoint<double>(serialize_checkpoint(p64)).params),
            serialize_checkpoint(p64));
}

TEST(Checkpoint, HeaderLayout) {
  Rng rng(12);
  const auto bytes = serialize_checkpoint(init_params<float>(tiny_model(), rng));
  EXPECT_EQ(bytes.substr(0, 4), "FTSS");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5], 0);
  ByteReader r(bytes);
  r.bytes(8, "head");
  const std::string cfg = r.str("cfg");
  EXPECT_NE(cfg.find("blocks=1\n"), std::string::npos);
  EXPECT_NE(cfg.find("dtype=f32\n"), std::string::npos);
  EXPECT_EQ(r.u32("count"), 24u);  // 4 embed + 16 block + 4 head
  EXPECT_EQ(r.str("name"), "patch.weight");
  EXPECT_EQ(r.u8("dtype"), 0);
  EXPECT_EQ(r.u32("rank"), 2u);
  EXPECT_EQ(r.u64("d0"), 4u);
  EXPECT_EQ(r.u64("d1"), 8u);
}

TEST(Checkpoint, BadMagic) {
  Rng rng(13);
  auto bytes = serialize_checkpoint(init_params<float>(tiny_model(), rng));
  bytes[0] = 'X';
  try {
    parse_checkpoint<float>(bytes);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("bad magic"), std::string::npos);
    EXPECT_EQ(e.offset(), 0u);
  }
  EXPECT_THROW(parse_checkpoint<float>("FT"), ParseError);
}

TEST(Checkpoint, VersionMismatch) {
  Rng rng(14);
  auto bytes = serialize_checkpoint(init_params<float>(tiny_model(), rng));
  bytes[4] = 2;
  try {
    parse_checkpoint<float>(bytes);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("version 2"), std::string::npos);
    EXPECT_EQ(e.offset(), 4u);
  }
}

TEST(Checkpoint, TruncatedPayloadNamesByteCounts) {
  Rng rng(15);
  const auto bytes = serialize_checkpoint(init_params<float>(tiny_model(), rng));
  const auto cut = bytes.substr(0, bytes.size() - 7);  // head.bias is 5 floats = 20 bytes
  try {
    parse_checkpoint<float>(cut);
    FAIL();
  } catch (const ParseError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("'head.bias'"), std::string::npos) << msg;
    EXPECT_NE(msg.find("expected 20 bytes, got 13"), std::string::npos) << msg;
    EXPECT_EQ(e.offset(), bytes.size() - 20);
  }
  // Every shorter prefix fails cleanly.
  for (std::size_t n = 0; n < bytes.size(); n += 37) EXPECT_THROW(parse_checkpoint<float>(bytes.substr(0, n)), ParseError);
}

TEST(Checkpoint, ResumedTrainingMatchesUninterrupted) {
  const auto train = toy_set(4, 4, 7);
  auto m = tiny_model();
  m.dropout = 0.2;
  TrainConfig cfg;
  cfg.batch = 8;
  cfg.seed = 5;
  cfg.max_epochs = 1;

  Rng rng(16);
  auto params = init_params<float>(m, rng);
  OptimizerState<float> st;
  fit(train, {}, params, cfg, Phase::kPretrain, st);
  const auto bytes = serialize_checkpoint(params, &st);
  const auto second = fit(train, {}, params, cfg, Phase::kPretrain, st);

  auto ck = parse_checkpoint<float>(bytes);
  ASSERT_TRUE(ck.optimizer.has_value());
  EXPECT_EQ(ck.optimizer->step, 3u);
  const auto resumed = fit(train, {}, ck.params, cfg, Phase::kPretrain, *ck.optimizer);
  EXPECT_EQ(training_log_csv(resumed.log), training_log_csv(second.log));
  EXPECT_EQ(serialize_checkpoint(ck.params, &*ck.optimizer), serialize_checkpoint(params, &st));
}

TEST(Checkpoint, FileRoundTrip) {
  Rng rng(17);
  const auto p = init_params<float>(tiny_model(), rng);
  const auto path = (std::filesystem::temp_directory_path() / "ftss_ck_test.bin").string();
  save_checkpoint(path, p);
  EXPECT_EQ(serialize_checkpoint(load_checkpoint<float>(path).params), serialize_checkpoint(p));
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint<float>(path), IoError);
}

TEST(TrainConfigKeys, RoundTrip) {
  TrainConfig c;
  c.class_weights = {1, 2, 3, 4, 5};
  c.lr_finetune = 3e-5;
  TrainConfig d;
  for (const auto& [k, v] : config_items(c)) EXPECT_TRUE(set_config_key(d, k, v)) << k;
  EXPECT_EQ(d.class_weights, c.class_weights);
  EXPECT_EQ(d.lr_finetune, 3e-5);
  EXPECT_FALSE(set_config_key(d, "bogus", "1"));
  EXPECT_THROW(set_config_key(d, "batch", "x"), ConfigError);
}

}  // namespace
}  // namespace ftss
