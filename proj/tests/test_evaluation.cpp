#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "published_scores.hpp"
#include "sensor3d/evaluation.hpp"
#include "sensor3d/synth.hpp"

using namespace sensor3d;
using sensor3d::testing::wilcoxon_brute_force;

namespace {

Tensor<std::uint8_t> bits(std::initializer_list<int> v) {
  std::vector<std::uint8_t> d(v.begin(), v.end());
  return Tensor<std::uint8_t>({d.size()}, d);
}

MaskVolume block_mask(std::size_t D, std::size_t n, std::size_t first, std::size_t last) {
  MaskVolume m{Tensor<std::uint8_t>({D, n, n})};
  for (std::size_t k = first; k <= last; ++k)
    for (std::size_t y = n / 4; y < 3 * n / 4; ++y)
      for (std::size_t x = n / 4; x < 3 * n / 4; ++x) m.labels.at(k, y, x) = 1;
  return m;
}

}  // namespace

TEST(Threshold, StrictBandAroundOne) {
  Tensor<float> p({5}, {0.9f, 0.75f, 0.5f, 0.76f, 1.0f});
  EXPECT_EQ(threshold_prediction(p).vec(), (std::vector<std::uint8_t>{1, 0, 0, 1, 1}));
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<float> u(0, 1);
  for (int t = 0; t < 1000; ++t) {
    Tensor<float> a({1}, u(rng));
    Tensor<float> b({1}, std::min(1.0f, a[0] + u(rng) * 0.2f));
    EXPECT_LE(threshold_prediction(a)[0], threshold_prediction(b)[0]);
  }
}

TEST(Overlap, BasicCases) {
  auto same = dice_and_voe(bits({1, 1, 0}), bits({1, 1, 0}));
  EXPECT_DOUBLE_EQ(same.dice, 1.0);
  EXPECT_DOUBLE_EQ(same.voe, 0.0);
  auto disjoint = dice_and_voe(bits({1, 0, 0}), bits({0, 1, 0}));
  EXPECT_DOUBLE_EQ(disjoint.dice, 0.0);
  EXPECT_DOUBLE_EQ(disjoint.voe, 1.0);
  auto empty = dice_and_voe(bits({0, 0}), bits({0, 0}));
  EXPECT_DOUBLE_EQ(empty.dice, 1.0);
  EXPECT_DOUBLE_EQ(empty.voe, 0.0);
  EXPECT_THROW(dice_and_voe(bits({0, 0}), bits({0, 0, 0})), InvalidArgument);
  EXPECT_NEAR(100 * voe_from_dice(0.943), 10.78, 0.01);
  EXPECT_EQ(std::round(1000 * voe_from_dice(0.943)) / 10, 10.8);
}

TEST(Overlap, VoeIdentityHoldsForPublishedPairs) {
  for (const auto& pair : sensor3d::testing::published_pairs()) {
    // Printed Dice is rounded to one decimal, so the true value lies within +-0.05.
    double lo = 1e9, hi = -1e9;
    for (double d = pair.dice - 0.05; d <= pair.dice + 0.05 + 1e-12; d += 0.001) {
      lo = std::min(lo, 100 * voe_from_dice(d / 100));
      hi = std::max(hi, 100 * voe_from_dice(d / 100));
    }
    EXPECT_GE(pair.voe, lo - 0.1) << pair.where;
    EXPECT_LE(pair.voe, hi + 0.1) << pair.where;
  }
}

TEST(Overlap, DiceFallsAsSymmetricDifferenceGrows) {
  // Fixed union of 20 pixels; move pixels from the intersection to the
  // symmetric difference one at a time.
  double prev = 2.0;
  for (std::size_t sym = 0; sym <= 20; ++sym) {
    const std::size_t inter = 20 - sym;
    Overlap o = overlap_from_counts(inter, inter + sym / 2, inter + sym - sym / 2);
    EXPECT_LE(o.dice, prev);
    EXPECT_GE(o.dice, 0.0);
    EXPECT_LE(o.voe, 1.0);
    prev = o.dice;
  }
}

TEST(Regimes, OracleAndEmptyPredictions) {
  MaskVolume truth = block_mask(10, 16, 3, 6);
  EvalRow oracle = evaluate_prediction("s", truth.labels, truth);
  EXPECT_DOUBLE_EQ(oracle.organ.dice, 1.0);
  EXPECT_DOUBLE_EQ(oracle.full.dice, 1.0);
  EXPECT_DOUBLE_EQ(oracle.organ.voe, 0.0);
  EvalRow none = evaluate_prediction("s", Tensor<std::uint8_t>(truth.labels.shape()), truth);
  EXPECT_DOUBLE_EQ(none.organ.dice, 0.0);
  EXPECT_DOUBLE_EQ(none.full.voe, 1.0);
}

TEST(Regimes, FalsePositivesOutsideOrganOnlyHurtFullVolume) {
  MaskVolume truth = block_mask(10, 16, 3, 6);
  Tensor<std::uint8_t> pred = truth.labels;
  for (std::size_t x = 0; x < 16; ++x) pred.at(std::size_t{8}, std::size_t{0}, x) = 1;
  EvalRow row = evaluate_prediction("s", pred, truth);
  EXPECT_DOUBLE_EQ(row.organ.dice, 1.0);
  EXPECT_LT(row.full.dice, 1.0);
  EXPECT_THROW(score_volume(Tensor<std::uint8_t>({10, 16, 15}), truth, Regime::FullVolume), InvalidArgument);
}

TEST(Regimes, NetworkPipelineAndResolutionCheck) {
  SynthConfig sc{10, 32, 32};
  auto data = synth_generate(1, sc, 3);
  PrepOptions po;
  po.resolution = 16;
  PreparedScan scan = prepare_scan("s", data[0].first, data[0].second, po);
  NetworkConfig nc;
  nc.resolution = 16;
  nc.capacity_divisor = 8;
  Network<float> net = build<float>(nc);
  init(net, 1);
  EvalRow row = evaluate_volume(net, scan, 2.5);
  EXPECT_GE(row.organ.dice, 0.0);
  EXPECT_LE(row.full.dice, 1.0);
  EXPECT_NEAR(row.full.voe, voe_from_dice(row.full.dice), 1e-12);
  auto prob = predict_volume(net, scan, 2.5);
  EXPECT_EQ(native_prediction(prob, 32, 32).shape(), (Shape{10, 32, 32}));
  nc.resolution = 32;
  Network<float> other = build<float>(nc);
  EXPECT_THROW(evaluate_volume(other, scan, 2.5), ConfigMismatch);
}

TEST(Regimes, GroundTruthAsProbabilities) {
  MaskVolume truth = block_mask(6, 64, 1, 4);
  std::vector<Tensor<float>> native, coarse;
  for (std::size_t k = 0; k < 6; ++k) {
    native.push_back(mask_to_float(truth.slice(k)));
    coarse.push_back(resample_inplane(native.back(), 16, ResampleKind::Mask));
  }
  EvalRow row = evaluate_prediction("s", native_prediction(native, 64, 64), truth);
  EXPECT_DOUBLE_EQ(row.organ.dice, 1.0);
  EXPECT_DOUBLE_EQ(row.full.dice, 1.0);
  EXPECT_DOUBLE_EQ(row.organ.voe, 0.0);
  EXPECT_DOUBLE_EQ(row.full.voe, 0.0);
  // Through the 16x16 network grid only the block edges can move.
  EvalRow rough = evaluate_prediction("s", native_prediction(coarse, 64, 64), truth);
  EXPECT_GT(rough.organ.dice, 0.98);
}

TEST(Wilcoxon, DegenerateAndWorkedCases) {
  std::vector<double> a = {0.9, 0.8, 0.95, 0.7};
  EXPECT_EQ(wilcoxon_signed_rank(a, a), 1.0);
  // n = 6, one negative difference with the smallest rank: W+ = 20, W- = 1.
  std::vector<double> x = {1.1, 2.2, 3.3, 4.4, 5.5, 5.9}, y = {1.2, 0, 0, 0, 0, 0};
  // Sign patterns with positive-rank sum >= 20: {1..6}, {2..6} => 2 of 64.
  EXPECT_NEAR(wilcoxon_signed_rank(x, y), 2 * 2.0 / 64.0, 1e-12);
  EXPECT_NEAR(wilcoxon_signed_rank(x, y), wilcoxon_brute_force(x, y), 1e-12);
  EXPECT_THROW(wilcoxon_signed_rank({1, 2}, {1}), InvalidArgument);
}

TEST(Wilcoxon, ExactMatchesEnumerationUpToTen) {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> len(1, 10), val(-4, 4);
  for (int trial = 0; trial < 3000; ++trial) {
    const int n = len(rng);
    std::vector<double> a(n), b(n);
    for (int i = 0; i < n; ++i) {
      a[i] = val(rng) * 0.25;  // exact binary fractions: ties and zeros are real ties
      b[i] = 0.0;
    }
    if (trial % 3 == 0)
      for (int i = 0; i < n; ++i) b[i] = val(rng) * 0.5, a[i] += b[i];
    const double p = wilcoxon_signed_rank(a, b);
    ASSERT_NEAR(p, wilcoxon_brute_force(a, b), 1e-9) << "trial " << trial;
    ASSERT_EQ(p, wilcoxon_signed_rank(b, a));
  }
}

TEST(Wilcoxon, NormalApproximationMatchesReferenceValue) {
  // Differences with ties and one zero; the reference p-value comes from an
  // independent implementation (normal approximation, tie and continuity
  // corrections, zeros dropped).
  std::vector<double> d = {1, -1, 2, 0, 1, 3, -1, 3, 1, 3, 2, -1, 2, 1, 3};
  std::vector<double> zero(d.size(), 0.0);
  EXPECT_NEAR(wilcoxon_signed_rank(d, zero), 0.010603345382122658, 1e-12);
}

TEST(Wilcoxon, ShiftedPairsAreSignificant) {
  for (std::size_t n : {12u, 20u}) {
    std::mt19937_64 rng(n);
    std::normal_distribution<double> noise(0, 0.01);
    std::vector<double> a, b;
    for (std::size_t i = 0; i < n; ++i) {
      b.push_back(0.9 + noise(rng));
      a.push_back(b.back() + 0.02 + 0.001 * double(i));
    }
    EXPECT_LT(wilcoxon_signed_rank(a, b), 0.01) << n;
    EXPECT_EQ(wilcoxon_signed_rank(a, b), wilcoxon_signed_rank(b, a));
  }
}

TEST(Reports, SignificanceMatrixLayout) {
  std::vector<std::vector<double>> dice = {{0.90, 0.91, 0.92, 0.93, 0.94, 0.95},
                                           {0.95, 0.96, 0.97, 0.98, 0.99, 0.995},
                                           {0.90, 0.91, 0.92, 0.93, 0.94, 0.95}};
  auto p = significance_matrix(dice);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_TRUE(std::isinf(p[i][i]));
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(p[i][j], p[j][i]);
  }
  EXPECT_EQ(p[0][2], 1.0);
  const std::string text = format_significance({"3 mm", "5 mm", "7 mm"}, p);
  EXPECT_NE(text.find("∞"), std::string::npos);
  EXPECT_NE(text.find("1.00"), std::string::npos);
  EXPECT_EQ(format_p_value(0.005), "<0.01");
  EXPECT_EQ(format_p_value(0.17), "0.17");
  EXPECT_NE(significance_csv({"a", "b", "c"}, p).find("inf"), std::string::npos);
}

TEST(Reports, TableAndCsv) {
  EvalReport r{"5 mm", {{"s1", {0.95, voe_from_dice(0.95)}, {0.90, voe_from_dice(0.90)}},
                        {"s2", {0.97, voe_from_dice(0.97)}, {0.94, voe_from_dice(0.94)}}}};
  EXPECT_NEAR(r.mean(Regime::OrganArea).dice, 0.96, 1e-12);
  EXPECT_NEAR(r.mean(Regime::FullVolume).dice, 0.92, 1e-12);
  const std::string table = report_table({r});
  EXPECT_NE(table.find("Organ Area"), std::string::npos);
  EXPECT_NE(table.find("Full Volume"), std::string::npos);
  EXPECT_NE(table.find(" 96.0"), std::string::npos);
  EXPECT_NE(table.find(" 92.0"), std::string::npos);
  const std::string csv = report_csv({r});
  EXPECT_NE(csv.find("5 mm,s1,organ-area,0.950000000"), std::string::npos);
  EXPECT_NE(csv.find("5 mm,mean,full-volume,0.920000000"), std::string::npos);
}
