#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "dflow/drivesim.hpp"
#include "dflow/jump_sampler.hpp"
#include "dflow/optim.hpp"
#include "dflow/posterior_net.hpp"
#include "dflow/prob_path.hpp"

namespace dflow {

struct GroupSample {
  ContextEncoding context;
  std::vector<TrajectoryTokens> trajectories;
  std::vector<double> rewards;
  std::vector<double> advantages;
  double corruption_time = 0.0;
  std::vector<TrajectoryTokens> corrupted_inputs;

  int size() const { return static_cast<int>(trajectories.size()); }

  void validate() const {
    const auto g = trajectories.size();
    if (g < 2) throw ValidationError("group sample: G must be >= 2");
    if (rewards.size() != g || advantages.size() != g || corrupted_inputs.size() != g) {
      throw ValidationError("group sample: per-member arrays disagree on G");
    }
    if (!(corruption_time >= 0.0 && corruption_time <= 1.0)) throw ValidationError("group sample: t outside [0, 1]");
  }
};

struct GrpoConfig {
  int group_size = 3;
  double clip = 0.2;          // epsilon
  double kl_strength = 0.02;  // beta_KL
  double lr = 2e-4;
  double weight_decay = 0.0;
  int steps = 500;            // outer iterations
  int groups_per_step = 16;
  long warmup = 125;
  int inner_steps = 1;        // gradient steps per outer iteration (theta_old refresh cadence)
  bool freeze_embeddings = true;
  sim::RewardWeights weights{};
  SamplerConfig sampler{};
  std::uint64_t seed = 1;

  void validate() const {
    if (group_size < 2) throw ValidationError("grpo config: group_size must be >= 2 (the group baseline needs G >= 2)");
    if (!(clip > 0.0)) throw ValidationError("grpo config: clip must be > 0");
    if (!(kl_strength >= 0.0)) throw ValidationError("grpo config: kl_strength must be >= 0");
    if (!(lr > 0.0) || steps < 0 || groups_per_step < 1 || warmup < 0 || inner_steps < 1) {
      throw ValidationError("grpo config: invalid lr/steps/groups_per_step/warmup/inner_steps");
    }
    weights.validate();
    sampler.validate();
  }
};

// Ablation presets.
inline GrpoConfig grpo_preset(const std::string& name) {
  GrpoConfig c;
  if (name == "default" || name == "g3") return c;
  if (name == "g2") { c.group_size = 2; return c; }
  if (name == "g4") { c.group_size = 4; return c; }
  if (name == "w5-20-2") { c.weights = {5.0, 20.0, 2.0}; return c; }
  if (name == "w5-5-8") { c.weights = {5.0, 5.0, 8.0}; return c; }
  if (name == "w20-5-2") { c.weights = {20.0, 5.0, 2.0}; return c; }
  throw ValidationError("unknown grpo preset '" + name + "' (expected default, g2, g3, g4, w5-20-2, w5-5-8, w20-5-2)");
}

/// A_i = R_i - mean(R). The mean is taken over the compensated sum so the
/// result sums to zero up to rounding of the subtraction itself.
inline std::vector<double> compute_advantages(std::span<const double> rewards) {
  if (rewards.size() < 2) throw ValidationError("compute_advantages: G must be >= 2");
  long double total = 0.0L;
  for (double r : rewards) total += r;
  const double mean = static_cast<double>(total / static_cast<long double>(rewards.size()));
  std::vector<double> out;
  out.reserve(rewards.size());
  for (double r : rewards) out.push_back(r - mean);
  return out;
}

inline std::vector<PolicyInput> group_inputs(const GroupSample& g) {
  std::vector<PolicyInput> inputs;
  inputs.reserve(g.corrupted_inputs.size());
  for (const auto& x : g.corrupted_inputs) inputs.push_back({x, g.corruption_time, g.context});
  return inputs;
}

/// log p_theta(o_i^k | corrupted input, ctx, t) for every member and token.
inline std::vector<std::vector<double>> token_log_probs(const PolicyParams& theta, const GroupSample& g) {
  g.validate();
  const auto cache = forward(theta, group_inputs(g));
  const int k = theta.dims().alphabet;
  std::vector<std::vector<double>> out(g.trajectories.size());
  for (std::size_t i = 0; i < g.trajectories.size(); ++i) {
    const auto& o = g.trajectories[i];
    for (int pos = 0; pos < theta.dims().positions; ++pos) {
      const Eigen::VectorXd lp =
          log_softmax(cache.logits.col(static_cast<Eigen::Index>(i)).segment(static_cast<Eigen::Index>(pos) * k, k));
      out[i].push_back(lp(o[static_cast<std::size_t>(pos)]));
    }
  }
  return out;
}

struct GrpoLoss {
  double loss = 0.0;          // negated objective, averaged over groups
  double policy_term = 0.0;   // mean clipped surrogate
  double mean_kl = 0.0;       // mean per-token KL(pi_theta || pi_ref)
  double clip_fraction = 0.0; // fraction of tokens whose gradient was cut by the clip
  // Over tokens with A != 0: max |min(rA, clip(r)A)| / ((1 + eps)|A|) and
  // max |clip(r)A| / ((1 + eps)|A|). The first can exceed 1 when A < 0 and
  // r > 1 + eps; the second cannot.
  double max_term_ratio = 0.0;
  double max_clipped_ratio = 0.0;
  PolicyParams grad;
};

/// Clipped per-token surrogate with KL anchoring for a batch of groups.
/// Subgradient convention: tokens where the clipped branch is the strict
/// minimum contribute no policy gradient.
inline GrpoLoss grpo_loss(const PolicyParams& theta, const PolicyParams& theta_old, const PolicyParams& theta_ref,
                          std::span<const GroupSample> groups, const GrpoConfig& cfg) {
  if (groups.empty()) throw ValidationError("grpo_loss: no groups");
  if (!(theta.dims() == theta_old.dims()) || !(theta.dims() == theta_ref.dims())) {
    throw ValidationError("grpo_loss: parameter sets do not share an architecture");
  }
  if (!(cfg.clip > 0.0) || !(cfg.kl_strength >= 0.0)) throw ValidationError("grpo_loss: invalid clip or kl_strength");
  const NetDims& d = theta.dims();
  const int k = d.alphabet;
  const int tokens = d.positions;  // T_i, constant across trajectories

  std::vector<PolicyInput> inputs;
  std::vector<double> advantages;
  std::vector<double> weight;  // 1 / (G * num_groups)
  std::vector<const TrajectoryTokens*> actions;
  for (const auto& g : groups) {
    g.validate();
    for (std::size_t i = 0; i < g.trajectories.size(); ++i) {
      inputs.push_back({g.corrupted_inputs[i], g.corruption_time, g.context});
      advantages.push_back(g.advantages[i]);
      weight.push_back(1.0 / (static_cast<double>(g.size()) * static_cast<double>(groups.size())));
      actions.push_back(&g.trajectories[i]);
    }
  }
  const auto cache = forward(theta, inputs);
  const auto old_logits = forward(theta_old, inputs).logits;
  const auto ref_logits = forward(theta_ref, std::move(inputs)).logits;

  GrpoLoss r;
  Eigen::MatrixXd dlogits = Eigen::MatrixXd::Zero(cache.logits.rows(), cache.logits.cols());
  long clipped = 0;
  long counted = 0;
  const double lo = 1.0 - cfg.clip;
  const double hi = 1.0 + cfg.clip;
  for (Eigen::Index b = 0; b < cache.logits.cols(); ++b) {
    const double a = advantages[static_cast<std::size_t>(b)];
    const double w = weight[static_cast<std::size_t>(b)] / tokens;
    for (int pos = 0; pos < tokens; ++pos) {
      const Eigen::Index off = static_cast<Eigen::Index>(pos) * k;
      const Eigen::VectorXd lp = log_softmax(cache.logits.col(b).segment(off, k));
      const Eigen::VectorXd lp_old = log_softmax(old_logits.col(b).segment(off, k));
      const Eigen::VectorXd lq = log_softmax(ref_logits.col(b).segment(off, k));
      const Eigen::VectorXd p = lp.array().exp().matrix();
      const TokenId o = (*actions[static_cast<std::size_t>(b)])[static_cast<std::size_t>(pos)];

      const double ratio = std::exp(lp(o) - lp_old(o));
      const double unclipped = ratio * a;
      const double clipped_term = std::clamp(ratio, lo, hi) * a;
      const double term = std::min(unclipped, clipped_term);
      const bool cut = clipped_term < unclipped;
      const Eigen::VectorXd diff = lp - lq;
      const double kl = std::max(0.0, p.dot(diff));

      r.policy_term += w * term;
      r.mean_kl += kl;
      r.loss -= w * (term - cfg.kl_strength * kl);
      if (a != 0.0) {
        r.max_term_ratio = std::max(r.max_term_ratio, std::abs(term) / (hi * std::abs(a)));
        r.max_clipped_ratio = std::max(r.max_clipped_ratio, std::abs(clipped_term) / (hi * std::abs(a)));
      }
      ++counted;

      auto g = dlogits.col(b).segment(off, k);
      // d/dlogits of beta * KL: p_j (log p_j - log q_j - KL)
      g = (w * cfg.kl_strength) * (p.array() * (diff.array() - p.dot(diff))).matrix();
      if (cut) {
        ++clipped;
      } else {
        // d/dlogits of -ratio * A: -A * ratio * (onehot - p)
        g += (w * a * ratio) * p;
        g(o) -= w * a * ratio;
      }
    }
  }
  r.mean_kl /= static_cast<double>(counted);
  r.clip_fraction = static_cast<double>(clipped) / static_cast<double>(counted);
  r.grad = backward(theta, cache, dlogits);
  return r;
}

/// Draws a corruption time and re-corrupts each member's tokens with it.
inline void record_corruption(GroupSample& g, const CoordinateSpace& space, const GibbsSchedule& sched,
                              std::uint64_t seed) {
  auto rng = substream(seed, {0xC0BB});
  g.corruption_time = uniform01(rng);
  g.corrupted_inputs.clear();
  for (std::size_t i = 0; i < g.trajectories.size(); ++i) {
    g.corrupted_inputs.push_back(
        corrupt(g.trajectories[i], g.corruption_time, space, sched, derive_seed(seed, {0xC0BB, i})));
  }
}

/// Samples G plans per scene under theta_old, scores them and fills
/// advantages and the shared corruption. Group j uses seed derive(seed, j).
inline std::vector<GroupSample> sample_groups(const PolicyParams& theta_old, std::span<const sim::Scene* const> scenes,
                                              const GrpoConfig& cfg, const CoordinateSpace& space,
                                              std::uint64_t seed) {
  std::vector<ContextEncoding> contexts;
  std::vector<std::uint64_t> seeds;
  for (std::size_t j = 0; j < scenes.size(); ++j) {
    const auto ctx = sim::context_of(*scenes[j], space.codebook);
    for (int m = 0; m < cfg.group_size; ++m) {
      contexts.push_back(ctx);
      seeds.push_back(derive_seed(seed, {0x6A0B, j, static_cast<std::uint64_t>(m)}));
    }
  }
  const auto tokens = sample_batch(model_posterior(theta_old, contexts), seeds, space, cfg.sampler);
  std::vector<GroupSample> groups(scenes.size());
  for (std::size_t j = 0; j < scenes.size(); ++j) {
    auto& g = groups[j];
    g.context = contexts[j * static_cast<std::size_t>(cfg.group_size)];
    for (int m = 0; m < cfg.group_size; ++m) {
      const auto& x = tokens[j * static_cast<std::size_t>(cfg.group_size) + static_cast<std::size_t>(m)];
      const auto plan = sim::decode_waypoints(x, scenes[j]->ego0, space.codebook);
      g.trajectories.push_back(x);
      g.rewards.push_back(sim::score_plan(*scenes[j], plan, cfg.weights).reward);
    }
    g.advantages = compute_advantages(g.rewards);
    record_corruption(g, space, cfg.sampler.schedule, derive_seed(seed, {0xC022, j}));
  }
  return groups;
}

struct GrpoTraceRow {
  long iter = 0;
  double mean_reward = 0.0;
  double mean_kl = 0.0;
  double clip_fraction = 0.0;
};

struct GrpoResult {
  PolicyParams params;
  std::vector<GrpoTraceRow> trace;
};

using GrpoCheckpointFn = std::function<void(long iter, const PolicyParams&)>;

/// Outer loop: theta_old <- theta, sample and score groups, then
/// `inner_steps` AdamW steps on the GRPO loss. theta_ref stays at theta_sft.
inline GrpoResult grpo_finetune(const PolicyParams& theta_sft, std::span<const sim::Scene> scenes,
                                const GrpoConfig& cfg, const CoordinateSpace& space,
                                const GrpoCheckpointFn& on_iter = {}) {
  cfg.validate();
  if (scenes.empty()) throw ValidationError("grpo_finetune: empty scene set");
  const PolicyParams& theta_ref = theta_sft;
  PolicyParams theta = theta_sft;
  AdamWState state(theta.size());
  const auto mask_vec = trainable_mask(theta, cfg.freeze_embeddings);
  const std::unique_ptr<bool[]> mask(new bool[mask_vec.size()]);
  std::copy(mask_vec.begin(), mask_vec.end(), mask.get());
  const std::span<const bool> mask_span(mask.get(), mask_vec.size());

  GrpoResult result;
  long step = 0;
  const long total = static_cast<long>(cfg.steps) * cfg.inner_steps;
  for (long iter = 0; iter < cfg.steps; ++iter) {
    const PolicyParams theta_old = theta;
    auto rng = substream(cfg.seed, {0x6290, static_cast<std::uint64_t>(iter)});
    std::vector<const sim::Scene*> batch;
    for (int j = 0; j < cfg.groups_per_step; ++j) batch.push_back(&scenes[uniform_index(rng, scenes.size())]);
    const auto groups = sample_groups(theta_old, batch, cfg, space, rng());

    GrpoTraceRow row;
    row.iter = iter;
    for (const auto& g : groups) row.mean_reward += std::accumulate(g.rewards.begin(), g.rewards.end(), 0.0);
    row.mean_reward /= static_cast<double>(groups.size()) * cfg.group_size;
    for (int inner = 0; inner < cfg.inner_steps; ++inner, ++step) {
      const auto l = grpo_loss(theta, theta_old, theta_ref, groups, cfg);
      if (!std::isfinite(l.loss)) {
        throw RuntimeFailure("grpo_finetune: non-finite loss at iteration " + std::to_string(iter));
      }
      if (inner == 0) {
        row.mean_kl = l.mean_kl;
        row.clip_fraction = l.clip_fraction;
      }
      AdamWHyper hp;
      hp.lr = scheduled_lr(cfg.lr, step, total, cfg.warmup, false);
      hp.weight_decay = cfg.weight_decay;
      adamw_step(theta.values(), l.grad.values(), state, hp, mask_span);
    }
    result.trace.push_back(row);
    if (on_iter) on_iter(iter + 1, theta);
  }
  result.params = std::move(theta);
  return result;
}

/// Mean per-token KL(pi_theta || pi_ref) over plans sampled from theta on
/// `scenes`, each re-corrupted at a uniform t.
inline double mean_token_kl(const PolicyParams& theta, const PolicyParams& theta_ref,
                            std::span<const sim::Scene> scenes, const GrpoConfig& cfg, const CoordinateSpace& space,
                            std::uint64_t seed) {
  std::vector<const sim::Scene*> ptrs;
  for (const auto& s : scenes) ptrs.push_back(&s);
  auto groups = sample_groups(theta, ptrs, cfg, space, seed);
  GrpoConfig c = cfg;
  c.kl_strength = 0.0;
  return grpo_loss(theta, theta, theta_ref, groups, c).mean_kl;
}

}  // namespace dflow
