#include <gtest/gtest.h>

#include <boost/math/distributions/chi_squared.hpp>

#include <cmath>
#include <numeric>

#include "dflow/prob_path.hpp"

namespace dflow {
namespace {

const GibbsSchedule kSched{};

TEST(Schedule, Values) {
  EXPECT_EQ(beta_of(0.0, kSched), 0.0);
  EXPECT_NEAR(beta_of(0.5, kSched), 3.0, 1e-15);
  const double at_max = beta_of(kSched.t_max, kSched);
  EXPECT_TRUE(std::isfinite(at_max));
  EXPECT_EQ(beta_of(1.0, kSched), at_max);
  EXPECT_EQ(beta_at(0.9995, kSched).beta_dot, 0.0);
  EXPECT_THROW(beta_at(-0.1, kSched), RangeError);
  EXPECT_THROW(beta_at(1.1, kSched), RangeError);
}

TEST(Schedule, StrictlyIncreasingWithAnalyticDerivative) {
  double prev = -1.0;
  for (int i = 1; i < 999; ++i) {
    const double t = i / 1000.0;
    const auto sv = beta_at(t, kSched);
    EXPECT_GT(sv.beta, prev);
    EXPECT_GT(sv.beta_dot, 0.0);
    const double h = 1e-7;
    const double fd = (beta_of(t + h, kSched) - beta_of(t - h, kSched)) / (2 * h);
    EXPECT_NEAR(sv.beta_dot, fd, 1e-5 * std::max(1.0, fd));
    prev = sv.beta;
  }
}

CoordinateSpace three_tokens() {
  // Distances (0, 1, 2) to token 0: unit grid over [0, 2], scalar_abs normalized by the range 2, weight 2.
  return CoordinateSpace::uniform(CodebookSpec{0.0, 2.0, 1.0}, 1, GroundMetric{MetricKind::scalar_abs, 0.0, 2.0});
}

TEST(Gibbs, ThreeTokenSoftmax) {
  const auto p = gibbs_conditional_at_beta(0, 1.0, three_tokens(), 0);
  EXPECT_NEAR(p[0], 0.6652, 5e-5);
  EXPECT_NEAR(p[1], 0.2447, 5e-5);
  EXPECT_NEAR(p[2], 0.0900, 5e-5);
}

TEST(Gibbs, UniformAtZeroAndPeakedAtTmax) {
  const auto space = CoordinateSpace::uniform(CodebookSpec::desk(), 1);
  const auto p0 = gibbs_conditional(37, 0.0, space, 0, kSched);
  for (double v : p0) EXPECT_EQ(v, 1.0 / 161.0);
  const auto p1 = gibbs_conditional(37, kSched.t_max, space, 0, kSched);
  EXPECT_GE(p1[37], 0.999);
}

TEST(Gibbs, NormalizedPositivePeakedAndShiftInvariant) {
  const auto space = CoordinateSpace::uniform(CodebookSpec::desk(), 1);
  for (double t : {0.01, 0.2, 0.5, 0.9, 0.99}) {
    const auto p = gibbs_conditional(100, t, space, 0, kSched);
    EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-12);
    for (std::size_t x = 0; x < p.size(); ++x) {
      EXPECT_GT(p[x], 0.0);
      if (x != 100) {
        EXPECT_GT(p[100], p[x]);
      }
    }
    std::vector<double> d;
    space.distances_to(0, 100, d);
    auto shifted = d;
    for (double& v : shifted) v += 3.7;
    const auto a = gibbs_from_distances(d, beta_of(t, kSched));
    const auto b = gibbs_from_distances(shifted, beta_of(t, kSched));
    for (std::size_t x = 0; x < a.size(); ++x) EXPECT_NEAR(a[x], b[x], 1e-14);
  }
}

TEST(Mixture, Examples) {
  const std::vector<double> prior(4, 0.25);
  const auto p0 = mixture_conditional(prior, 2, 0.0);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(p0[i], 0.25);
  const auto p1 = mixture_conditional(prior, 2, 1.0);
  EXPECT_EQ(p1[2], 1.0);
  EXPECT_EQ(p1[0], 0.0);
  EXPECT_NEAR(mixture_conditional(prior, 2, 0.3)[2], 0.475, 1e-15);
  EXPECT_THROW(mixture_conditional(std::vector<double>{0.5, 0.6}, 0, 0.3), ValidationError);
  EXPECT_THROW(mixture_conditional(prior, 0, 1.5), RangeError);
}

TEST(Mixture, MaskPrior) {
  const auto prior = mask_prior(4);
  ASSERT_EQ(prior.size(), 5u);
  const auto p = mixture_conditional(prior, 1, 0.4);
  EXPECT_NEAR(p[4], 0.6, 1e-15);
  EXPECT_NEAR(p[1], 0.4, 1e-15);
}

TEST(Corrupt, TmaxKeepsTargets) {
  const auto space = CoordinateSpace::uniform(CodebookSpec::desk(), 16);
  TrajectoryTokens x1(16);
  for (int i = 0; i < 16; ++i) x1[static_cast<std::size_t>(i)] = static_cast<TokenId>(10 * i);
  long same = 0;
  long total = 0;
  for (int draw = 0; draw < 6250; ++draw) {  // 10^5 coordinates
    const auto x = corrupt(x1, kSched.t_max, space, kSched, static_cast<std::uint64_t>(draw));
    for (int i = 0; i < 16; ++i) same += x[static_cast<std::size_t>(i)] == x1[static_cast<std::size_t>(i)];
    total += 16;
  }
  EXPECT_GE(static_cast<double>(same) / static_cast<double>(total), 0.999);
}

TEST(Corrupt, UniformAtZeroChiSquared) {
  const auto space = CoordinateSpace::uniform(CodebookSpec::desk(), 1);
  const int draws = 100000;
  std::vector<double> counts(161, 0.0);
  for (int d = 0; d < draws; ++d) counts[static_cast<std::size_t>(corrupt({80}, 0.0, space, kSched, d)[0])] += 1.0;
  const double expected = draws / 161.0;
  double chi2 = 0.0;
  for (double c : counts) chi2 += (c - expected) * (c - expected) / expected;
  const boost::math::chi_squared dist(160);
  EXPECT_GT(boost::math::cdf(boost::math::complement(dist, chi2)), 0.01) << "chi2 " << chi2;
}

TEST(Corrupt, DeterministicAndValidated) {
  const auto space = CoordinateSpace::uniform(CodebookSpec::desk(), 16);
  const TrajectoryTokens x1(16, 80);
  EXPECT_EQ(corrupt(x1, 0.4, space, kSched, 9), corrupt(x1, 0.4, space, kSched, 9));
  EXPECT_NE(corrupt(x1, 0.4, space, kSched, 9), corrupt(x1, 0.4, space, kSched, 10));
  EXPECT_THROW(corrupt(TrajectoryTokens(15, 0), 0.4, space, kSched, 1), ValidationError);
  EXPECT_THROW(corrupt(TrajectoryTokens(16, 161), 0.4, space, kSched, 1), RangeError);
}

TEST(CoordinateSpaceTest, Validation) {
  auto space = CoordinateSpace::uniform(CodebookSpec::desk(), 2);
  EXPECT_NO_THROW(space.validate());
  space.metrics[0].weight = 0.0;
  space.metrics[1].weight = 0.0;
  EXPECT_THROW(space.validate(), ValidationError);
  space.metrics[0] = GroundMetric{MetricKind::embedding_l2};
  EXPECT_THROW(space.validate(), ValidationError);
}

}  // namespace
}  // namespace dflow
