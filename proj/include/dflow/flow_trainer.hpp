#pragma once

#include <algorithm>
#include <cmath>
#include <array>
#include <functional>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "dflow/drivesim.hpp"
#include "dflow/optim.hpp"
#include "dflow/posterior_net.hpp"
#include "dflow/prob_path.hpp"

namespace dflow {

// (context, expert tokens) supervision pair.
struct FlowExample {
  ContextEncoding ctx;
  TrajectoryTokens target;
};

struct FlowConfig {
  double lr = 1e-3;
  double weight_decay = 0.01;
  int steps = 10000;
  int batch = 64;
  long warmup = 0;
  bool cosine = true;
  bool freeze_embeddings = true;
  std::uint64_t seed = 1;
  int checkpoint_every = 0;  // 0 disables the checkpoint callback

  void validate() const {
    if (!(lr > 0.0) || steps < 0 || batch < 1 || warmup < 0) throw ValidationError("flow config: invalid lr/steps/batch");
  }
};

struct FlowResult {
  PolicyParams params;
  std::vector<LossReport> trace;
};

using CheckpointFn = std::function<void(long step, const PolicyParams&)>;

/// Supervised flow stage: per example t ~ U[0, 1], corrupt the expert via the
/// Gibbs path, cross-entropy against the clean tokens, AdamW.
inline FlowResult train_flow(std::span<const FlowExample> data, PolicyParams theta, const FlowConfig& cfg,
                             const CoordinateSpace& space, const GibbsSchedule& sched,
                             const CheckpointFn& on_checkpoint = {}) {
  cfg.validate();
  if (data.empty()) throw ValidationError("train_flow: empty dataset");
  const NetDims& dims = theta.dims();
  if (dims.positions != space.dimension() || dims.alphabet != space.alphabet()) {
    throw ValidationError("train_flow: network dims do not match the coordinate space");
  }
  AdamWState state(theta.size());
  const auto mask_vec = trainable_mask(theta, cfg.freeze_embeddings);
  const std::unique_ptr<bool[]> mask(new bool[mask_vec.size()]);
  std::copy(mask_vec.begin(), mask_vec.end(), mask.get());

  FlowResult result;
  result.trace.reserve(static_cast<std::size_t>(cfg.steps));
  std::vector<PolicyInput> inputs(static_cast<std::size_t>(cfg.batch));
  std::vector<TrajectoryTokens> targets(static_cast<std::size_t>(cfg.batch));
  for (long step = 0; step < cfg.steps; ++step) {
    auto rng = substream(cfg.seed, {0xF10E, static_cast<std::uint64_t>(step)});
    for (int b = 0; b < cfg.batch; ++b) {
      const auto& ex = data[uniform_index(rng, data.size())];
      const double t = uniform01(rng);
      auto& in = inputs[static_cast<std::size_t>(b)];
      in.tokens = corrupt(ex.target, t, space, sched, rng());
      in.t = t;
      in.ctx = ex.ctx;
      targets[static_cast<std::size_t>(b)] = ex.target;
    }
    const auto cache = forward(theta, inputs);
    const auto ce = ce_loss(cache.logits, targets, dims.positions, dims.alphabet);
    if (!std::isfinite(ce.loss)) {
      throw RuntimeFailure("train_flow: non-finite loss at step " + std::to_string(step));
    }
    const auto grad = backward(theta, cache, ce.dlogits);
    AdamWHyper hp;
    hp.lr = scheduled_lr(cfg.lr, step, cfg.steps, cfg.warmup, cfg.cosine);
    hp.weight_decay = cfg.weight_decay;
    adamw_step(theta.values(), grad.values(), state, hp, std::span<const bool>(mask.get(), mask_vec.size()));
    result.trace.push_back({ce.loss, grad.norm(), step});
    if (on_checkpoint && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
      on_checkpoint(step + 1, theta);
    }
  }
  result.params = std::move(theta);
  return result;
}

/// Mean CE of the policy over `count` fresh corruptions with t drawn from [t_lo, t_hi].
inline double evaluate_ce(std::span<const FlowExample> data, const PolicyParams& theta, const CoordinateSpace& space,
                          const GibbsSchedule& sched, double t_lo, double t_hi, int count, std::uint64_t seed) {
  auto rng = substream(seed, {0xE7A1});
  std::vector<PolicyInput> inputs;
  std::vector<TrajectoryTokens> targets;
  for (int i = 0; i < count; ++i) {
    const auto& ex = data[uniform_index(rng, data.size())];
    const double t = t_lo + (t_hi - t_lo) * uniform01(rng);
    inputs.push_back({corrupt(ex.target, t, space, sched, rng()), t, ex.ctx});
    targets.push_back(ex.target);
  }
  const auto cache = forward(theta, std::move(inputs));
  return ce_loss(cache.logits, targets, theta.dims().positions, theta.dims().alphabet).loss;
}

inline FlowExample example_from_scene(const sim::Scene& scene, const CodebookSpec& spec) {
  return {sim::context_of(scene, spec), sim::tokenize_waypoints(scene.expert, scene.ego0, spec)};
}

/// Deterministic toy task: `count` distinct contexts, each mapped to the
/// tokenized expert plan the kinematic route-follower produces for it.
inline std::vector<FlowExample> make_toy_task(int count, std::uint64_t seed, const CodebookSpec& spec) {
  if (count < 1) throw ValidationError("make_toy_task: count must be positive");
  SplitMix64 rng(derive_seed(seed, {0x70E}));
  std::vector<FlowExample> out;
  std::set<std::array<int, kNumEgoFields + 1>> seen;
  int guard = 0;
  while (static_cast<int>(out.size()) < count) {
    if (++guard > 100 * count + 1000) throw ValidationError("make_toy_task: not enough distinct contexts");
    const auto ctx = sim::sample_context(rng, spec, 0.6);
    std::array<int, kNumEgoFields + 1> key{};
    key[0] = static_cast<int>(ctx.command);
    for (int j = 0; j < kNumEgoFields; ++j) key[static_cast<std::size_t>(j) + 1] = ctx.ego[static_cast<std::size_t>(j)];
    if (!seen.insert(key).second) continue;
    const auto ego = sim::ego_from_context(ctx, spec);
    out.push_back({ctx, sim::tokenize_waypoints(sim::expert_plan(ctx.command, ego, ego.a), ego, spec)});
  }
  return out;
}

}  // namespace dflow
