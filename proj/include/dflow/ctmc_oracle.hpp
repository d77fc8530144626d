#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "dflow/jump_sampler.hpp"
#include "dflow/stats.hpp"

namespace dflow {

struct MarginalRequest {
  TokenId target = 0;
  int steps = 200;
  int runs = 100000;
  std::uint64_t seed = 0;
  double stop_time = 1.0;                  // empirical marginal taken after the last step below this time
  std::optional<TokenId> start{};          // fixed start token instead of the uniform prior
  RateClock clock = RateClock::step_integrated;
};

struct MarginalReport {
  double time = 1.0;                  // time reached by the last executed step
  std::vector<double> empirical;      // terminal histogram / runs
  std::vector<double> analytic;       // Gibbs path at `time`
  double tv = 0.0;
  int runs_left_start = 0;            // runs whose state ever differs from `start` (absorption check)
};

/// Monte Carlo marginals of the jump sampler driven by a point-mass posterior
/// at the target, for a one-coordinate space with a small alphabet.
inline MarginalReport simulate_marginals(const CoordinateSpace& space, const GibbsSchedule& sched,
                                         const MarginalRequest& req) {
  if (space.dimension() != 1 || space.alphabet() > 8) {
    throw ValidationError("simulate_marginals: oracle needs D = 1 and K <= 8");
  }
  if (req.runs < 1 || req.steps < 1) throw ValidationError("simulate_marginals: runs and steps must be positive");
  SamplerConfig cfg;
  cfg.steps = req.steps;
  cfg.schedule = sched;
  cfg.seed = req.seed;
  cfg.final_snap = false;
  cfg.clock = req.clock;

  const std::int32_t k = space.alphabet();
  std::vector<std::uint64_t> seeds(static_cast<std::size_t>(req.runs));
  for (int r = 0; r < req.runs; ++r) seeds[static_cast<std::size_t>(r)] = derive_seed(req.seed, {static_cast<std::uint64_t>(r)});

  SampleOptions opts;
  opts.stop_time = req.stop_time;
  if (req.start) opts.initial.assign(seeds.size(), TrajectoryTokens{*req.start});

  const auto posterior = oracle_posterior({TrajectoryTokens{req.target}}, k);
  MarginalReport rep;
  rep.empirical.assign(static_cast<std::size_t>(k), 0.0);

  const double h = 1.0 / req.steps;
  int executed = 0;
  for (int s = 0; s < req.steps; ++s)
    if (s * h < req.stop_time) ++executed;
  rep.time = std::min(1.0, executed * h);

  if (req.start) {
    // Step-by-step so that leaving the start state is observed at any time.
    std::vector<TrajectoryTokens> states = opts.initial;
    std::vector<char> left(states.size(), 0);
    for (int step = 0; step < executed; ++step) {
      const double t = step * h;
      const Eigen::MatrixXd probs = posterior(states, t);
      for (std::size_t b = 0; b < states.size(); ++b) {
        states[b] = denoise_step(states[b], t, h, probs.col(static_cast<Eigen::Index>(b)), space, cfg, seeds[b], step);
        if (states[b][0] != *req.start) left[b] = 1;
      }
    }
    for (std::size_t b = 0; b < states.size(); ++b) {
      rep.empirical[static_cast<std::size_t>(states[b][0])] += 1.0;
      rep.runs_left_start += left[b];
    }
  } else {
    const auto states = sample_batch(posterior, seeds, space, cfg, opts);
    for (const auto& s : states) rep.empirical[static_cast<std::size_t>(s[0])] += 1.0;
  }
  for (double& v : rep.empirical) v /= req.runs;
  rep.analytic = gibbs_conditional(req.target, rep.time, space, 0, sched);
  rep.tv = stats::total_variation(rep.empirical, rep.analytic);
  return rep;
}

// CSV rows {t, x, p_analytic, p_empirical, residual}.
inline void write_marginal_csv(std::ostream& os, const MarginalReport& rep, double residual, bool header = true) {
  if (header) os << "t,x,p_analytic,p_empirical,residual\n";
  for (std::size_t x = 0; x < rep.empirical.size(); ++x) {
    os << rep.time << ',' << x << ',' << rep.analytic[x] << ',' << rep.empirical[x] << ',' << residual << '\n';
  }
}

}  // namespace dflow
