#pragma once

#include <Eigen/Dense>

#include <chrono>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "dflow/ctmc.hpp"
#include "dflow/drivesim.hpp"
#include "dflow/posterior_net.hpp"
#include "dflow/random.hpp"

namespace dflow {

// How beta_dot enters the step's exit rate. `instantaneous` evaluates the
// analytic beta_dot(t) at the step start (infinite at t = 0 for exponents
// below 1); `step_integrated` uses (beta(t + h) - beta(t)) / h.
enum class RateClock { instantaneous, step_integrated };

struct SamplerConfig {
  int steps = 10;  // n; step size h = 1 / n
  GibbsSchedule schedule{};
  std::uint64_t seed = 0;
  bool final_snap = true;  // argmax of the posterior at t_max after the last step
  RateClock clock = RateClock::step_integrated;

  void validate() const {
    if (steps < 1) throw ValidationError("sampler: steps must be >= 1");
    schedule.validate();
  }
};

// Posterior probabilities for a batch of states at time t, shaped (D*K) x B
// with rows [i*K, (i+1)*K) holding coordinate i.
using PosteriorFn = std::function<Eigen::MatrixXd(std::span<const TrajectoryTokens> states, double t)>;

/// 1 - exp(-h * lambda), exact for lambda = +inf.
inline double jump_probability(double h, double lambda) {
  if (lambda == 0.0) return 0.0;
  if (std::isinf(lambda)) return 1.0;
  return -std::expm1(-h * lambda);
}

inline double effective_beta_dot(double t, double h, const SamplerConfig& cfg) {
  if (cfg.clock == RateClock::instantaneous) return beta_at(t, cfg.schedule).beta_dot;
  const double t_next = std::min(1.0, t + h);
  return (beta_of(t_next, cfg.schedule) - beta_of(t, cfg.schedule)) / h;
}

enum : std::uint64_t { kStreamInit = 0x1A17ULL, kStreamStep = 0x57E9ULL };

/// One parallel Euler jump step. For every coordinate: draw x1 from its
/// posterior row, compute the exit rate, jump with probability
/// 1 - exp(-h * lambda) to a token drawn proportionally to the rates.
/// Coordinate i of step k uses substream (seed, k, i).
inline TrajectoryTokens denoise_step(const TrajectoryTokens& x, double t, double h,
                                     const Eigen::Ref<const Eigen::VectorXd>& posterior, const CoordinateSpace& space,
                                     const SamplerConfig& cfg, std::uint64_t seed, int step) {
  if (t + h > 1.0 + 1e-12) throw RangeError("denoise_step: t + h exceeds 1");
  const int dims = space.dimension();
  const std::int32_t k = space.alphabet();
  if (static_cast<int>(x.size()) != dims || posterior.size() != static_cast<Eigen::Index>(dims) * k) {
    throw ValidationError("denoise_step: state or posterior shape mismatch");
  }
  const double beta = beta_of(t, cfg.schedule);
  const double beta_dot = effective_beta_dot(t, h, cfg);
  TrajectoryTokens out = x;
  for (int i = 0; i < dims; ++i) {
    auto rng = substream(seed, {kStreamStep, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(i)});
    const std::span<const double> row(posterior.data() + static_cast<Eigen::Index>(i) * k, static_cast<std::size_t>(k));
    const auto target = static_cast<TokenId>(sample_categorical(rng, row));
    const TokenId z = x[static_cast<std::size_t>(i)];
    const double u = uniform01(rng);
    if (target >= k || target == z) continue;
    const auto kernel = jump_kernel_at_beta(z, target, beta, space, i);
    const double lambda = kernel.total > 0.0 ? beta_dot * kernel.total : 0.0;
    if (u < jump_probability(h, lambda)) {
      out[static_cast<std::size_t>(i)] = static_cast<TokenId>(sample_categorical(rng, kernel.weights));
    }
  }
  return out;
}

inline TrajectoryTokens uniform_initial_state(const CoordinateSpace& space, std::uint64_t seed) {
  TrajectoryTokens x(static_cast<std::size_t>(space.dimension()));
  for (int i = 0; i < space.dimension(); ++i) {
    auto rng = substream(seed, {kStreamInit, static_cast<std::uint64_t>(i)});
    x[static_cast<std::size_t>(i)] = static_cast<TokenId>(uniform_index(rng, static_cast<std::uint64_t>(space.alphabet())));
  }
  return x;
}

struct SampleOptions {
  double stop_time = 1.0;  // run steps k with k/n < stop_time
  std::vector<TrajectoryTokens> initial;  // overrides the uniform start when non-empty
};

/// Runs the sampler for a batch of sequences; sequence b uses seeds[b].
inline std::vector<TrajectoryTokens> sample_batch(const PosteriorFn& posterior, std::span<const std::uint64_t> seeds,
                                                  const CoordinateSpace& space, const SamplerConfig& cfg,
                                                  const SampleOptions& opts = {}) {
  cfg.validate();
  std::vector<TrajectoryTokens> states;
  states.reserve(seeds.size());
  if (!opts.initial.empty()) {
    if (opts.initial.size() != seeds.size()) throw ValidationError("sample_batch: initial states != seeds");
    states = opts.initial;
  } else {
    for (auto s : seeds) states.push_back(uniform_initial_state(space, s));
  }
  const double h = 1.0 / cfg.steps;
  for (int step = 0; step < cfg.steps; ++step) {
    const double t = step * h;
    if (!(t < opts.stop_time)) break;
    const Eigen::MatrixXd probs = posterior(states, t);
    for (std::size_t b = 0; b < states.size(); ++b) {
      states[b] = denoise_step(states[b], t, h, probs.col(static_cast<Eigen::Index>(b)), space, cfg, seeds[b], step);
    }
  }
  if (cfg.final_snap && opts.stop_time >= 1.0) {
    const Eigen::MatrixXd probs = posterior(states, cfg.schedule.t_max);
    const std::int32_t k = space.alphabet();
    for (std::size_t b = 0; b < states.size(); ++b) {
      for (int i = 0; i < space.dimension(); ++i) {
        Eigen::Index best = 0;
        probs.col(static_cast<Eigen::Index>(b)).segment(static_cast<Eigen::Index>(i) * k, k).maxCoeff(&best);
        states[b][static_cast<std::size_t>(i)] = static_cast<TokenId>(best);
      }
    }
  }
  return states;
}

// Softmax of the policy's logits for each (state, context) pair.
inline Eigen::MatrixXd policy_probabilities(const PolicyParams& theta, std::span<const TrajectoryTokens> states,
                                            std::span<const ContextEncoding> contexts, double t) {
  std::vector<PolicyInput> inputs;
  inputs.reserve(states.size());
  for (std::size_t b = 0; b < states.size(); ++b) inputs.push_back({states[b], t, contexts[b]});
  Eigen::MatrixXd probs = forward(theta, std::move(inputs)).logits;
  const int k = theta.dims().alphabet;
  for (Eigen::Index b = 0; b < probs.cols(); ++b) {
    for (int i = 0; i < theta.dims().positions; ++i) {
      auto seg = probs.col(b).segment(static_cast<Eigen::Index>(i) * k, k);
      seg = softmax(seg);
    }
  }
  return probs;
}

inline PosteriorFn model_posterior(const PolicyParams& theta, std::vector<ContextEncoding> contexts) {
  return [&theta, contexts = std::move(contexts)](std::span<const TrajectoryTokens> states, double t) {
    return policy_probabilities(theta, states, contexts, t);
  };
}

// Point-mass posterior at fixed targets.
inline PosteriorFn oracle_posterior(std::vector<TrajectoryTokens> targets, std::int32_t alphabet) {
  return [targets = std::move(targets), alphabet](std::span<const TrajectoryTokens> states, double) {
    const auto dims = static_cast<Eigen::Index>(targets.front().size());
    Eigen::MatrixXd p = Eigen::MatrixXd::Zero(dims * alphabet, static_cast<Eigen::Index>(states.size()));
    for (Eigen::Index b = 0; b < p.cols(); ++b) {
      const auto& x1 = targets.size() == 1 ? targets.front() : targets[static_cast<std::size_t>(b)];
      for (Eigen::Index i = 0; i < dims; ++i) p(i * alphabet + x1[static_cast<std::size_t>(i)], b) = 1.0;
    }
    return p;
  };
}

struct PlannedTrajectory {
  TrajectoryTokens tokens;
  sim::Waypoints waypoints;
};

/// Plans one trajectory for a context.
inline PlannedTrajectory sample(const ContextEncoding& ctx, const PolicyParams& theta, const SamplerConfig& cfg,
                                const CoordinateSpace& space) {
  const std::uint64_t seeds[1] = {cfg.seed};
  auto tokens = sample_batch(model_posterior(theta, {ctx}), seeds, space, cfg).front();
  const auto ego = sim::ego_from_context(ctx, space.codebook);
  return {tokens, sim::decode_waypoints(tokens, ego, space.codebook)};
}

struct SceneResult {
  std::int64_t scene_id = 0;
  int n_steps = 0;
  std::uint64_t seed = 0;
  TrajectoryTokens tokens;
  sim::Waypoints waypoints{};
  double l2 = 0.0;
  sim::RewardBreakdown reward;
};

struct StepCountRow {
  int n_steps = 0;
  double mean_l2 = 0.0;
  double se_l2 = 0.0;
  double mean_reward = 0.0;
  double mean_pdms = 0.0;
  double wall_time = 0.0;  // seconds spent sampling the whole scene set
  std::vector<SceneResult> scenes;
};

inline std::uint64_t scene_sampling_seed(std::uint64_t seed, std::int64_t scene_id) {
  return derive_seed(seed, {0x5A3E, static_cast<std::uint64_t>(scene_id)});
}

/// Samples every scene at each step count and scores the plans.
inline std::vector<StepCountRow> coarse_to_fine_eval(std::span<const sim::Scene> scenes, const PolicyParams& theta,
                                                     std::span<const int> steps_list, const SamplerConfig& base,
                                                     const CoordinateSpace& space,
                                                     const sim::RewardWeights& weights = {}) {
  std::vector<ContextEncoding> contexts;
  std::vector<std::uint64_t> seeds;
  for (const auto& s : scenes) {
    contexts.push_back(sim::context_of(s, space.codebook));
    seeds.push_back(scene_sampling_seed(base.seed, s.id));
  }
  const auto posterior = model_posterior(theta, contexts);
  std::vector<StepCountRow> rows;
  for (int n : steps_list) {
    SamplerConfig cfg = base;
    cfg.steps = n;
    const auto t0 = std::chrono::steady_clock::now();
    const auto tokens = sample_batch(posterior, seeds, space, cfg);
    const auto t1 = std::chrono::steady_clock::now();
    StepCountRow row;
    row.n_steps = n;
    row.wall_time = std::chrono::duration<double>(t1 - t0).count();
    std::vector<double> errors;
    for (std::size_t i = 0; i < scenes.size(); ++i) {
      SceneResult r;
      r.scene_id = scenes[i].id;
      r.n_steps = n;
      r.seed = seeds[i];
      r.tokens = tokens[i];
      r.waypoints = sim::decode_waypoints(tokens[i], scenes[i].ego0, space.codebook);
      r.l2 = sim::mean_waypoint_error(r.waypoints, scenes[i].expert);
      r.reward = sim::score_plan(scenes[i], r.waypoints, weights);
      errors.push_back(r.l2);
      row.mean_reward += r.reward.reward;
      row.mean_pdms += r.reward.pdms;
      row.scenes.push_back(std::move(r));
    }
    const double inv = scenes.empty() ? 0.0 : 1.0 / static_cast<double>(scenes.size());
    row.mean_reward *= inv;
    row.mean_pdms *= inv;
    double se = 0.0;
    for (double e : errors) row.mean_l2 += e * inv;
    for (double e : errors) se += (e - row.mean_l2) * (e - row.mean_l2);
    row.se_l2 = errors.size() > 1 ? std::sqrt(se / static_cast<double>(errors.size() - 1) * inv) : 0.0;
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace dflow
