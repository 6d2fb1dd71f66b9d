#include <gtest/gtest.h>

#include <filesystem>
#include <numeric>
#include <random>

#include "ftss/metrics.hpp"

namespace ftss {
namespace {

using Labels = std::vector<std::size_t>;

TEST(Confusion, PerfectPredictionsAreDiagonal) {
  const Labels y = {0, 1, 2, 3, 4, 2, 2};
  const auto cm = confusion(y, y);
  EXPECT_TRUE(cm.diagonal());
  EXPECT_EQ(cm.at(2, 2), 3u);
  EXPECT_EQ(cm.total(), 7u);
}

TEST(Confusion, SingleOffDiagonalPair) {
  const auto cm = confusion(Labels{2}, Labels{3});
  EXPECT_EQ(cm.at(2, 3), 1u);
  EXPECT_EQ(cm.total(), 1u);
  EXPECT_FALSE(cm.diagonal());
}

TEST(Confusion, PermutationPreservesTotalsAndKappa) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<std::size_t> d(0, 4);
  Labels t(200), p(200);
  for (auto& v : t) v = d(rng);
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = d(rng) < 3 ? t[i] : d(rng);
  const Labels perm = {3, 0, 4, 1, 2};
  Labels tp, pp;
  for (auto v : t) tp.push_back(perm[v]);
  for (auto v : p) pp.push_back(perm[v]);
  const auto a = confusion(t, p), b = confusion(tp, pp);
  EXPECT_EQ(a.total(), b.total());
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(a.at(i, j), b.at(perm[i], perm[j]));
  EXPECT_NEAR(kappa(a), kappa(b), 1e-12);
  EXPECT_NEAR(accuracy(a), accuracy(b), 1e-12);
}

TEST(Confusion, LengthMismatchIsContractError) {
  EXPECT_THROW(confusion(Labels{1, 2}, Labels{1}), ContractError);
  EXPECT_THROW(confusion(Labels{5}, Labels{1}), ContractError);
}

TEST(Prf1, DiagonalIsAllOnes) {
  const Labels y = {0, 1, 2, 3, 4};
  for (const auto& m : prf1(confusion(y, y))) {
    EXPECT_EQ(m.precision, 1.0);
    EXPECT_EQ(m.recall, 1.0);
    EXPECT_EQ(m.f1, 1.0);
  }
}

TEST(Prf1, TwoClassHandCase) {
  const auto cm = ConfusionMatrix::from_rows({{1, 1}, {0, 2}});
  const auto m = prf1(cm);
  EXPECT_NEAR(m[0].precision, 1.0, 1e-12);
  EXPECT_NEAR(m[1].precision, 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(m[0].recall, 0.5, 1e-12);
  EXPECT_NEAR(m[1].recall, 1.0, 1e-12);
  EXPECT_NEAR(m[0].f1, 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(m[1].f1, 0.8, 1e-12);
  EXPECT_NEAR(accuracy(cm), 0.75, 1e-12);
}

TEST(Prf1, EmptyClassIsFlaggedZero) {
  const auto m = prf1(confusion(Labels{0, 1, 2}, Labels{0, 1, 1}));
  EXPECT_EQ(m[4].precision, 0.0);
  EXPECT_EQ(m[4].recall, 0.0);
  EXPECT_EQ(m[4].f1, 0.0);
  EXPECT_TRUE(m[4].precision_undefined && m[4].recall_undefined && m[4].f1_undefined);
  EXPECT_TRUE(m[2].precision_undefined);
  EXPECT_FALSE(m[2].recall_undefined);
  EXPECT_FALSE(m[0].precision_undefined);
}

TEST(Prf1, MicroRecallEqualsAccuracy) {
  const auto cm = ConfusionMatrix::from_rows({{5, 1, 0}, {2, 7, 1}, {0, 3, 4}});
  std::uint64_t tp = 0, all = 0;
  for (std::size_t c = 0; c < 3; ++c) tp += cm.at(c, c), all += cm.row_sum(c);
  EXPECT_EQ(double(tp) / double(all), accuracy(cm));
}

TEST(Kappa, HandCases) {
  EXPECT_NEAR(kappa(ConfusionMatrix::from_rows({{20, 5}, {10, 15}})), 0.4, 1e-12);
  EXPECT_NEAR(kappa(ConfusionMatrix::from_rows({{1, 1}, {1, 1}})), 0.0, 1e-12);
  EXPECT_NEAR(kappa(ConfusionMatrix::from_rows({{3, 0}, {0, 4}})), 1.0, 1e-12);
}

TEST(Kappa, ChanceAgreementOfOne) {
  const auto one = cohen_kappa(ConfusionMatrix::from_rows({{4, 0}, {0, 0}}));
  EXPECT_EQ(one.value, 1.0);
  EXPECT_TRUE(one.undefined);
  const auto empty = cohen_kappa(ConfusionMatrix(5));
  EXPECT_EQ(empty.value, 0.0);
  EXPECT_TRUE(empty.undefined);
}

TEST(Kappa, OneIffDiagonal) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<std::uint64_t> d(0, 3);
  for (int trial = 0; trial < 200; ++trial) {
    ConfusionMatrix cm(5);
    for (auto& c : cm.counts) c = d(rng) == 0 ? d(rng) : 0;
    for (std::size_t i = 0; i < 5; ++i) cm.at(i, i) += 1;
    if (trial % 2) {
      for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 5; ++j)
          if (i != j) cm.at(i, j) = 0;
    }
    EXPECT_EQ(kappa(cm) == 1.0, cm.diagonal()) << "trial " << trial;
  }
}

TEST(Transitions, AllCorrectIsZero) {
  const Labels y = {0, 1, 2, 3, 4};
  EXPECT_EQ(transition_pairs(y, y).total(), 0u);
}

TEST(Transitions, SingleN2N3) {
  const auto t = transition_pairs(Labels{2}, Labels{3});
  EXPECT_EQ(t.regular[3], 1u);
  EXPECT_EQ(t.total(), 1u);
  EXPECT_EQ(pair_name(kRegularPairs[3]), "{N2,N3}");
}

TEST(Transitions, MatchesEnumeration) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> d(0, 4);
  Labels t(500), p(500);
  for (auto& v : t) v = d(rng);
  for (auto& v : p) v = d(rng);
  // oracle: tally every unordered off-diagonal pair directly
  std::uint64_t pairs[5][5] = {};
  for (std::size_t i = 0; i < t.size(); ++i)
    if (t[i] != p[i]) ++pairs[std::min(t[i], p[i])][std::max(t[i], p[i])];
  const auto c = transition_pairs(t, p);
  EXPECT_EQ(c.regular[0], pairs[0][1]);
  EXPECT_EQ(c.regular[1], pairs[0][2]);
  EXPECT_EQ(c.regular[2], pairs[1][2]);
  EXPECT_EQ(c.regular[3], pairs[2][3]);
  EXPECT_EQ(c.regular[4], pairs[0][4]);
  EXPECT_EQ(c.irregular[0], pairs[1][4]);
  EXPECT_EQ(c.irregular[1], pairs[2][4]);
  EXPECT_EQ(c.irregular[2], pairs[0][3]);
  EXPECT_EQ(c.other, pairs[1][3] + pairs[3][4]);
  const auto csv = transitions_csv(c);
  EXPECT_EQ(csv.rfind("kind,pair,count\nregular,{W,N1},", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 10);
}

TEST(Hypnogram, ThreeRowsAndRoundTrip) {
  const Labels y = {0, 4, 3};
  const std::string csv = hypnogram_csv(y);
  EXPECT_EQ(csv, "epoch_index,stage_code,stage_name\n0,0,W\n1,4,REM\n2,3,N3\n");
  EXPECT_EQ(parse_hypnogram(csv), y);
  const auto path = (std::filesystem::temp_directory_path() / "ftss_hyp_test.csv").string();
  write_hypnogram(path, y);
  EXPECT_EQ(read_hypnogram(path), y);
  std::filesystem::remove(path);
}

TEST(Hypnogram, StageNamesAndParsing) {
  EXPECT_EQ(stage_name(0), "W");
  EXPECT_EQ(stage_name(1), "N1");
  EXPECT_EQ(stage_name(2), "N2");
  EXPECT_EQ(stage_name(3), "N3");
  EXPECT_EQ(stage_name(4), "REM");
  EXPECT_EQ(parse_stage("S4"), 3u);
  EXPECT_EQ(parse_stage(" n2 "), 2u);
  EXPECT_FALSE(parse_stage("N4").has_value());
}

TEST(Hypnogram, BadInputIsParseErrorWithLine) {
  try {
    parse_hypnogram("epoch_index,stage_code,stage_name\n0,0,W\n1,9,X\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 3u);
  }
  EXPECT_THROW(parse_hypnogram("a,b,c\n"), ParseError);
  EXPECT_THROW(read_hypnogram("/nonexistent/dir/h.csv"), IoError);
  EXPECT_THROW(write_hypnogram("/nonexistent/dir/h.csv", Labels{0}), IoError);
}

TEST(Report, MetricsCsvSchema) {
  const auto cm = confusion(Labels{0, 1, 2, 2}, Labels{0, 1, 2, 1});
  const std::string csv = metrics_csv(cm);
  EXPECT_EQ(csv.rfind("stage,precision,recall,f1,support,undefined\nW,1.000000,1.000000,1.000000,1,\n", 0), 0u);
  EXPECT_NE(csv.find("\nN3,0.000000,0.000000,0.000000,0,precision;recall;f1\n"), std::string::npos);
  EXPECT_NE(csv.find("\naccuracy,0.750000,,,4,\n"), std::string::npos);
  EXPECT_NE(csv.find("\nkappa,"), std::string::npos);
  EXPECT_EQ(confusion_csv(cm).substr(0, 25), "true\\pred,W,N1,N2,N3,REM\n");
}

}  // namespace
}  // namespace ftss
