#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "dflow/codebook.hpp"
#include "dflow/stats.hpp"

namespace dflow {
namespace {

const CodebookSpec kPaper = CodebookSpec::paper_scale();
const CodebookSpec kDesk = CodebookSpec::desk();

TEST(Codebook, Sizes) {
  EXPECT_EQ(kPaper.size(), 20001);
  EXPECT_EQ(kDesk.size(), 161);
}

TEST(Codebook, RejectsBadSpecs) {
  EXPECT_THROW((CodebookSpec{0.0, 1.0, 0.0}).validate(), ValidationError);
  EXPECT_THROW((CodebookSpec{1.0, 0.0, 0.1}).validate(), ValidationError);
  EXPECT_THROW((CodebookSpec{0.0, 1.0, 0.3}).validate(), ValidationError);
}

TEST(Quantize, PaperScaleExamples) {
  EXPECT_EQ(quantize(-100.0, kPaper), 0);
  EXPECT_EQ(quantize(0.0, kPaper), 10000);
  EXPECT_EQ(quantize(0.013, kPaper), 10001);
}

TEST(Quantize, MatchesExhaustiveNearestSearch) {
  SplitMix64 rng(3);
  for (int trial = 0; trial < 2000; ++trial) {
    const double v = -8.0 + 16.0 * uniform01(rng);
    TokenId best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (TokenId k = 0; k < kDesk.size(); ++k) {
      const double d = std::abs(kDesk.value(k) - v);
      if (d < best_d) best_d = d, best = k;
    }
    EXPECT_EQ(quantize(v, kDesk), best) << v;
  }
}

TEST(Quantize, TiesRoundHalfToEven) {
  const CodebookSpec unit{0.0, 10.0, 1.0};
  EXPECT_EQ(quantize(0.5, unit), 0);
  EXPECT_EQ(quantize(1.5, unit), 2);
  EXPECT_EQ(quantize(2.5, unit), 2);
}

TEST(Quantize, ClampsOrRaises) {
  EXPECT_EQ(quantize(-1e6, kDesk), 0);
  EXPECT_EQ(quantize(1e6, kDesk), 160);
  EXPECT_THROW(quantize(8.5, kDesk, true), RangeError);
  EXPECT_THROW(quantize(std::nan(""), kDesk), RangeError);
  EXPECT_THROW(quantize(std::numeric_limits<double>::infinity(), kDesk, false), RangeError);
}

TEST(Dequantize, ExamplesAndRange) {
  EXPECT_NEAR(dequantize(10000, kPaper), 0.0, 1e-12);
  EXPECT_DOUBLE_EQ(dequantize(0, kPaper), -100.0);
  EXPECT_THROW(dequantize(-1, kDesk), RangeError);
  EXPECT_THROW(dequantize(161, kDesk), RangeError);
}

TEST(Dequantize, RoundTrip) {
  SplitMix64 rng(11);
  for (int i = 0; i < 1000; ++i) {
    const double v = -100.0 + 200.0 * uniform01(rng);
    EXPECT_LE(std::abs(dequantize(quantize(v, kPaper), kPaper) - v), kPaper.resolution / 2 + 1e-9);
  }
  for (TokenId k = 0; k < kDesk.size(); ++k) EXPECT_EQ(quantize(dequantize(k, kDesk), kDesk), k);
}

TEST(TripletLoss, HingeValues) {
  EXPECT_DOUBLE_EQ(triplet_margin_loss(0.3, 0.5, 0.05), 0.0);
  EXPECT_NEAR(triplet_margin_loss(0.5, 0.3, 0.05), 0.25, 1e-15);
  EXPECT_NEAR(triplet_margin_loss(0.3, 0.3, 0.05), 0.05, 1e-15);
  EXPECT_THROW(triplet_margin_loss(-0.1, 0.3), ValidationError);
  EXPECT_THROW(triplet_margin_loss(0.1, 0.3, 0.0), ValidationError);
}

TEST(TripletSampler, OrderingPredicateAndDeterminism) {
  const auto a = sample_triplets(kDesk, 10000, 5);
  const auto b = sample_triplets(kDesk, 10000, 5);
  ASSERT_EQ(a.size(), 10000u);
  int near_within_10 = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& t = a[i];
    EXPECT_LT(std::abs(kDesk.value(t.anchor) - kDesk.value(t.near)), std::abs(kDesk.value(t.anchor) - kDesk.value(t.far)));
    EXPECT_EQ(t.anchor, b[i].anchor);
    EXPECT_EQ(t.near, b[i].near);
    EXPECT_EQ(t.far, b[i].far);
    near_within_10 += std::abs(t.anchor - t.near) <= 10;
  }
  EXPECT_GE(near_within_10, 9000);
}

TEST(Embeddings, RandomRowsAreUnitNorm) {
  const auto t = EmbeddingTable::random(kDesk, 32, 1);
  for (TokenId k = 0; k < t.size(); ++k) EXPECT_NEAR(t.row(k).norm(), 1.0, 1e-12);
  EXPECT_LT(stats::embedding_alignment(t), 0.5);
}

TEST(Embeddings, ShortTrainingReducesLossAndKeepsUnitRows) {
  EmbedConfig cfg;
  cfg.steps = 3000;
  cfg.eval_triplets = 2000;
  const auto r = train_embeddings(kDesk, cfg);
  EXPECT_LT(r.final_eval_loss, r.initial_eval_loss);
  EXPECT_EQ(r.loss_trace.size(), 3000u);
  for (TokenId k = 0; k < r.table.size(); ++k) EXPECT_NEAR(r.table.row(k).norm(), 1.0, 1e-6);
  EXPECT_GT(stats::embedding_alignment(r.table), stats::embedding_alignment(EmbeddingTable::random(kDesk, 32, 1)));
}

TEST(Embeddings, CheckpointRoundTrip) {
  const auto t = EmbeddingTable::random(kDesk, 8, 4);
  const auto path = (std::filesystem::temp_directory_path() / "dflow_unit_emb.emb").string();
  save_embeddings(t, path);
  const auto u = load_embeddings(path);
  EXPECT_EQ(u.spec(), t.spec());
  EXPECT_EQ(u.rows(), t.rows());
  std::filesystem::remove(path);
}

TEST(GroundDistance, Kinds) {
  const GroundMetric abs_metric{};
  EXPECT_DOUBLE_EQ(ground_distance(0, kDesk.size() - 1, abs_metric, kDesk), 1.0);
  EXPECT_DOUBLE_EQ(ground_distance(7, 7, abs_metric, kDesk), 0.0);
  EXPECT_DOUBLE_EQ(ground_distance(3, 9, abs_metric, kDesk), ground_distance(9, 3, abs_metric, kDesk));

  // Angles 0.1 and 2*pi - 0.1 on a fine codebook over [0, 2*pi].
  const double two_pi = 2.0 * 3.14159265358979323846;
  const CodebookSpec angles{0.0, 6.3, 0.05};
  GroundMetric circ{MetricKind::circular, two_pi, 1.0};
  const TokenId a = quantize(0.1, angles);
  const TokenId b = quantize(6.2, angles);
  const double expected = std::min(std::abs(angles.value(b) - angles.value(a)), two_pi - std::abs(angles.value(b) - angles.value(a)));
  EXPECT_NEAR(ground_distance(a, b, circ, angles), expected, 1e-12);
  EXPECT_LE(ground_distance(0, angles.size() - 1, circ, angles), two_pi / 2);
  EXPECT_DOUBLE_EQ(ground_distance(4, 4, circ, angles), 0.0);

  const GroundMetric emb{MetricKind::embedding_l2};
  EXPECT_THROW(ground_distance(0, 1, emb, kDesk), ValidationError);
  const auto t = EmbeddingTable::random(kDesk, 4, 2);
  EXPECT_NEAR(ground_distance(0, 1, emb, kDesk, &t), (t.row(0) - t.row(1)).norm(), 1e-15);
  EXPECT_DOUBLE_EQ(ground_distance(5, 5, emb, kDesk, &t), 0.0);
}

TEST(GroundDistance, CircularWrapExample) {
  // A codebook whose end points are exactly 0.1 and 2*pi - 0.1.
  const double two_pi = 2.0 * 3.14159265358979323846;
  const CodebookSpec angles{0.1, two_pi - 0.1, (two_pi - 0.2) / 100.0};
  angles.validate();
  const GroundMetric circ{MetricKind::circular, two_pi, 1.0};
  EXPECT_NEAR(ground_distance(0, 100, circ, angles), 0.2, 1e-12);
}

}  // namespace
}  // namespace dflow
