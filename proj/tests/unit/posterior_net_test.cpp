#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "dflow/flow_trainer.hpp"
#include "dflow/oracles.hpp"
#include "dflow/posterior_net.hpp"

namespace dflow {
namespace {

NetDims small_dims() { return NetDims{16, 21, 8, 16, 24}; }

PolicyInput random_input(SplitMix64& rng, const NetDims& d) {
  PolicyInput in;
  for (int i = 0; i < d.positions; ++i) in.tokens.push_back(static_cast<TokenId>(uniform_index(rng, d.alphabet)));
  in.t = uniform01(rng);
  in.ctx.command = static_cast<Command>(uniform_index(rng, kNumCommands));
  for (auto& e : in.ctx.ego) e = static_cast<TokenId>(uniform_index(rng, d.alphabet));
  return in;
}

TEST(Net, DeskInputWidth) { EXPECT_EQ(NetDims{}.input_width(), 691); }

TEST(Net, ShapeDeterminismAndBidirectionality) {
  const NetDims d{};
  const auto theta = PolicyParams::initialize(d, 3);
  SplitMix64 rng(1);
  auto in = random_input(rng, d);
  const auto a = forward(in.tokens, in.t, in.ctx, theta);
  EXPECT_EQ(a.rows(), 16);
  EXPECT_EQ(a.cols(), 161);
  const auto b = forward(in.tokens, in.t, in.ctx, theta);
  EXPECT_TRUE((a.array() == b.array()).all());
  auto perturbed = in.tokens;
  perturbed[0] = (perturbed[0] + 50) % 161;
  const auto c = forward(perturbed, in.t, in.ctx, theta);
  EXPECT_GT((c.row(15) - a.row(15)).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Net, RejectsBadInputs) {
  const auto theta = PolicyParams::initialize(small_dims(), 3);
  ContextEncoding ctx;
  EXPECT_THROW(forward(TrajectoryTokens(15, 0), 0.5, ctx, theta), ValidationError);
  EXPECT_THROW(forward(TrajectoryTokens(16, 21), 0.5, ctx, theta), ValidationError);
  EXPECT_THROW(forward(TrajectoryTokens(16, 0), 1.5, ctx, theta), ValidationError);
}

TEST(CrossEntropy, Examples) {
  const int D = 16, K = 4;
  const std::vector<TrajectoryTokens> y{TrajectoryTokens(D, 1)};
  Eigen::MatrixXd zero = Eigen::MatrixXd::Zero(D * K, 1);
  EXPECT_NEAR(ce_loss(zero, y, D, K).loss, 16.0 * std::log(4.0), 1e-12);
  EXPECT_NEAR(ce_loss(zero, y, D, K).loss, 22.1807, 1e-4);

  Eigen::MatrixXd sharp = Eigen::MatrixXd::Zero(D * K, 1);
  for (int i = 0; i < D; ++i) sharp(i * K + 1, 0) = 30.0;
  EXPECT_LT(ce_loss(sharp, y, D, K).loss, 1e-9);

  SplitMix64 rng(2);
  Eigen::MatrixXd logits(D * K, 1);
  for (Eigen::Index r = 0; r < logits.rows(); ++r) logits(r, 0) = standard_normal(rng);
  Eigen::MatrixXd shifted = logits;
  for (int i = 0; i < D; ++i) shifted.block(i * K, 0, K, 1).array() += 5.0 * (i + 1);
  EXPECT_NEAR(ce_loss(logits, y, D, K).loss, ce_loss(shifted, y, D, K).loss, 1e-12);
  EXPECT_GE(ce_loss(logits, y, D, K).loss, 0.0);
}

TEST(CrossEntropy, LogitGradientIsSoftmaxMinusOnehot) {
  const int D = 16, K = 5;
  SplitMix64 rng(4);
  Eigen::MatrixXd logits(D * K, 2);
  for (Eigen::Index r = 0; r < logits.rows(); ++r)
    for (Eigen::Index c = 0; c < 2; ++c) logits(r, c) = standard_normal(rng);
  std::vector<TrajectoryTokens> y(2, TrajectoryTokens(D));
  for (auto& seq : y)
    for (auto& v : seq) v = static_cast<TokenId>(uniform_index(rng, K));
  const auto r = ce_loss(logits, y, D, K);
  for (int b = 0; b < 2; ++b) {
    for (int i = 0; i < D; ++i) {
      Eigen::VectorXd expect = softmax(logits.col(b).segment(i * K, K));
      expect(y[static_cast<std::size_t>(b)][static_cast<std::size_t>(i)]) -= 1.0;
      expect *= 0.5;
      EXPECT_LE((r.dlogits.col(b).segment(i * K, K) - expect).cwiseAbs().maxCoeff(), 1e-15);
    }
  }
}

TEST(Backward, ZeroWeightHeadBiasGradient) {
  const auto d = small_dims();
  PolicyParams theta(d);  // all zeros
  SplitMix64 rng(6);
  for (double& v : theta.block(Block::head_b)) v = standard_normal(rng);
  std::vector<PolicyInput> inputs{random_input(rng, d), random_input(rng, d), random_input(rng, d)};
  std::vector<TrajectoryTokens> y;
  for (std::size_t b = 0; b < inputs.size(); ++b) y.push_back(random_input(rng, d).tokens);
  const auto cache = forward(theta, inputs);
  const auto g = backward(theta, cache, ce_loss(cache.logits, y, d.positions, d.alphabet).dlogits);
  for (int i = 0; i < d.positions; ++i) {
    const Eigen::VectorXd p = softmax(theta.head_b().segment(i * d.alphabet, d.alphabet));
    Eigen::VectorXd expect = Eigen::VectorXd::Zero(d.alphabet);
    for (const auto& seq : y) {
      expect += p;
      expect(seq[static_cast<std::size_t>(i)]) -= 1.0;
    }
    expect /= 3.0;
    EXPECT_LE((g.head_b().segment(i * d.alphabet, d.alphabet) - expect).cwiseAbs().maxCoeff(), 1e-14);
  }
  for (Block b : {Block::w1, Block::w2, Block::head_w, Block::token_embed}) {
    for (double v : g.block(b)) EXPECT_EQ(v, 0.0);
  }
}

TEST(Backward, FiniteDifferenceOnSmallNet) {
  oracle::GradcheckOptions o;
  o.coordinates_per_block = 10;
  const auto rep = oracle::gradcheck(small_dims(), o);
  EXPECT_EQ(rep.blocks_covered, kNumBlocks);
  EXPECT_EQ(rep.entries.size(), 100u);
  EXPECT_LE(rep.max_rel_error, 1e-4);
}

TEST(AdamW, FirstStepMovesByLr) {
  std::vector<double> p{1.0, -2.0, 0.5, 3.0};
  const std::vector<double> g{0.3, -1e-3, 7.0, -2.0};
  AdamWState s(4);
  AdamWHyper hp;
  hp.lr = 1e-3;
  hp.weight_decay = 0.0;
  const auto before = p;
  adamw_step(p, g, s, hp);
  for (std::size_t i = 0; i < p.size(); ++i) {
    EXPECT_NEAR(std::abs(p[i] - before[i]), 1e-3, 1e-3 * 1e-4);
    EXPECT_LT((p[i] - before[i]) * g[i], 0.0);
  }
}

TEST(AdamW, DecoupledDecayWithZeroGradient) {
  std::vector<double> p{1.0, -4.0};
  const std::vector<double> g{0.0, 0.0};
  AdamWState s(2);
  const AdamWHyper hp{1e-3, 0.01};
  adamw_step(p, g, s, hp);
  EXPECT_DOUBLE_EQ(p[0], 1.0 - 1e-5);
  EXPECT_DOUBLE_EQ(p[1], -4.0 * (1.0 - 1e-5));
}

TEST(AdamW, MaskFreezesEntries) {
  std::vector<double> p{1.0, 1.0};
  const std::vector<double> g{1.0, 1.0};
  AdamWState s(2);
  const bool mask[2] = {false, true};
  adamw_step(p, g, s, AdamWHyper{}, std::span<const bool>(mask, 2));
  EXPECT_EQ(p[0], 1.0);
  EXPECT_NE(p[1], 1.0);
  EXPECT_EQ(s.m[0], 0.0);
}

TEST(AdamW, HundredStepsBitIdentical) {
  auto run = [] {
    std::vector<double> p(50, 0.5);
    AdamWState s(p.size());
    SplitMix64 rng(8);
    for (int step = 0; step < 100; ++step) {
      std::vector<double> g(p.size());
      for (double& v : g) v = standard_normal(rng);
      adamw_step(p, g, s, AdamWHyper{});
    }
    return p;
  };
  EXPECT_EQ(run(), run());
}

TEST(Checkpoint, RoundTripReproducesLogits) {
  auto theta = PolicyParams::initialize(small_dims(), 12);
  theta.checkpoint_id = 0xABCDEF;
  const auto path = (std::filesystem::temp_directory_path() / "dflow_unit_policy.net").string();
  save_policy(theta, path);
  const auto loaded = load_policy(path);
  std::filesystem::remove(path);
  EXPECT_TRUE(loaded == theta);
  EXPECT_EQ(loaded.checkpoint_id, 0xABCDEFu);
  SplitMix64 rng(3);
  const auto in = random_input(rng, small_dims());
  const auto a = forward(in.tokens, in.t, in.ctx, theta);
  const auto b = forward(in.tokens, in.t, in.ctx, loaded);
  EXPECT_TRUE((a.array() == b.array()).all());
}

TEST(Checkpoint, RejectsWrongMagic) {
  const auto path = (std::filesystem::temp_directory_path() / "dflow_unit_bad.net").string();
  {
    std::ofstream os(path, std::ios::binary);
    os << "NOTANET1xxxxxxxx";
  }
  EXPECT_THROW(load_policy(path), RuntimeFailure);
  std::filesystem::remove(path);
}

TEST(Trainer, ShortRunLowersLossAndIsDeterministic) {
  const auto spec = CodebookSpec::desk();
  const auto data = make_toy_task(8, 1, spec);
  NetDims d;
  d.hidden = 64;
  const auto space = CoordinateSpace::uniform(spec, 16);
  FlowConfig cfg;
  cfg.steps = 150;
  cfg.batch = 16;
  cfg.lr = 1e-3;
  auto run = [&] { return train_flow(data, PolicyParams::initialize(d, 5), cfg, space, GibbsSchedule{}); };
  const auto a = run();
  const auto b = run();
  ASSERT_EQ(a.trace.size(), 150u);
  for (std::size_t i = 0; i < a.trace.size(); ++i) {
    EXPECT_EQ(a.trace[i].ce, b.trace[i].ce);
    EXPECT_GE(a.trace[i].ce, 0.0);
  }
  EXPECT_TRUE(a.params == b.params);
  double head = 0, tail = 0;
  for (int i = 0; i < 20; ++i) head += a.trace[static_cast<std::size_t>(i)].ce, tail += a.trace[a.trace.size() - 1 - static_cast<std::size_t>(i)].ce;
  EXPECT_LT(tail, head);
}

TEST(Trainer, FrozenEmbeddingsStayFixed) {
  const auto spec = CodebookSpec::desk();
  const auto data = make_toy_task(4, 2, spec);
  NetDims d;
  d.hidden = 32;
  const auto theta0 = PolicyParams::initialize(d, 5);
  FlowConfig cfg;
  cfg.steps = 20;
  cfg.batch = 4;
  const auto r = train_flow(data, theta0, cfg, CoordinateSpace::uniform(spec, 16), GibbsSchedule{});
  const auto a = theta0.block(Block::token_embed);
  const auto b = r.params.block(Block::token_embed);
  EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin()));
  EXPECT_FALSE(theta0 == r.params);
}

}  // namespace
}  // namespace dflow
