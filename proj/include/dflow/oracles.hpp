#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "dflow/ctmc.hpp"
#include "dflow/ctmc_oracle.hpp"
#include "dflow/drivesim.hpp"
#include "dflow/posterior_net.hpp"

namespace dflow::oracle {

using sim::Vec2;

struct Check {
  std::string name;
  bool pass = false;
  std::string detail;
};

inline bool all_pass(const std::vector<Check>& checks) {
  return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.pass; });
}

inline void print(std::ostream& os, const std::vector<Check>& checks) {
  for (const auto& c : checks) os << (c.pass ? "PASS " : "FAIL ") << c.name << ": " << c.detail << '\n';
}

inline std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// CTMC

// Five tokens 0..4 on a unit grid.
inline CoordinateSpace small_space() { return CoordinateSpace::uniform(CodebookSpec{0.0, 4.0, 1.0}, 1); }

struct CtmcOptions {
  int runs = 100000;
  int terminal_steps = 200;
  int mid_steps = 400;
  double mid_time = 0.5;
  TokenId target = 2;
  std::uint64_t seed = 2024;
};

struct CtmcReports {
  MarginalReport terminal;
  MarginalReport mid;
  MarginalReport absorbing;
};

inline CtmcReports run_ctmc(const CtmcOptions& o, const GibbsSchedule& sched = {}) {
  const auto space = small_space();
  CtmcReports r;
  MarginalRequest req;
  req.target = o.target;
  req.runs = o.runs;
  req.steps = o.terminal_steps;
  req.seed = o.seed;
  r.terminal = simulate_marginals(space, sched, req);
  req.steps = o.mid_steps;
  req.stop_time = o.mid_time;
  req.seed = o.seed + 1;
  r.mid = simulate_marginals(space, sched, req);
  req.steps = o.terminal_steps;
  req.stop_time = 1.0;
  req.start = o.target;
  req.seed = o.seed + 2;
  r.absorbing = simulate_marginals(space, sched, req);
  return r;
}

inline std::vector<Check> ctmc_checks(const CtmcReports& r, TokenId target) {
  std::vector<Check> out;
  const double terminal = r.terminal.empirical[static_cast<std::size_t>(target)];
  out.push_back({"terminal mass at x1 >= 0.99", terminal >= 0.99, "mass " + fmt(terminal)});
  out.push_back({"mid-time TV <= 0.05", r.mid.tv <= 0.05, "t " + fmt(r.mid.time) + " TV " + fmt(r.mid.tv)});
  out.push_back({"x1 is absorbing", r.absorbing.runs_left_start == 0,
                 std::to_string(r.absorbing.runs_left_start) + " runs left x1"});
  return out;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check of the posterior network's CE loss.

struct GradcheckOptions {
  int coordinates_per_block = 12;
  int batch = 3;
  double step = 1e-5;
  double tolerance = 1e-4;
  double floor = 1e-6;  // denominators below this are treated as absolute error
  std::uint64_t seed = 99;
};

struct GradcheckEntry {
  Block block;
  std::size_t index;
  double analytic;
  double numeric;
  double rel_error;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double max_rel_error = 0.0;
  int blocks_covered = 0;
};

inline GradcheckReport gradcheck(const NetDims& dims, const GradcheckOptions& o) {
  SplitMix64 rng(derive_seed(o.seed, {0x6C4E}));
  const auto theta0 = PolicyParams::initialize(dims, o.seed);
  PolicyParams theta = theta0;
  // Small random biases so no block sits at an exactly symmetric point.
  for (Block b : {Block::time_b, Block::b1, Block::b2, Block::head_b}) {
    for (double& v : theta.block(b)) v = 0.1 * standard_normal(rng);
  }
  std::vector<PolicyInput> inputs;
  std::vector<TrajectoryTokens> targets;
  for (int b = 0; b < o.batch; ++b) {
    PolicyInput in;
    for (int i = 0; i < dims.positions; ++i) in.tokens.push_back(static_cast<TokenId>(uniform_index(rng, dims.alphabet)));
    in.t = uniform01(rng);
    in.ctx.command = static_cast<Command>(uniform_index(rng, kNumCommands));
    for (auto& e : in.ctx.ego) e = static_cast<TokenId>(uniform_index(rng, dims.alphabet));
    TrajectoryTokens y;
    for (int i = 0; i < dims.positions; ++i) y.push_back(static_cast<TokenId>(uniform_index(rng, dims.alphabet)));
    inputs.push_back(std::move(in));
    targets.push_back(std::move(y));
  }
  auto loss = [&](const PolicyParams& p) {
    return ce_loss(forward(p, inputs).logits, targets, dims.positions, dims.alphabet).loss;
  };
  const auto cache = forward(theta, inputs);
  const auto ce = ce_loss(cache.logits, targets, dims.positions, dims.alphabet);
  const auto grad = backward(theta, cache, ce.dlogits);

  // Token-embedding rows that actually receive gradient.
  std::vector<TokenId> used;
  for (const auto& in : inputs) {
    used.insert(used.end(), in.tokens.begin(), in.tokens.end());
    used.insert(used.end(), in.ctx.ego.begin(), in.ctx.ego.end());
  }

  GradcheckReport rep;
  for (int bi = 0; bi < kNumBlocks; ++bi) {
    const auto block = static_cast<Block>(bi);
    const std::size_t n = theta.block(block).size();
    for (int c = 0; c < o.coordinates_per_block; ++c) {
      std::size_t idx = uniform_index(rng, n);
      if (block == Block::token_embed) {
        const auto row = used[uniform_index(rng, used.size())];
        idx = static_cast<std::size_t>(row) * static_cast<std::size_t>(dims.d_in) + uniform_index(rng, dims.d_in);
      }
      const std::size_t flat = theta.block_offset(block) + idx;
      PolicyParams plus = theta;
      PolicyParams minus = theta;
      plus.values()[flat] += o.step;
      minus.values()[flat] -= o.step;
      const double numeric = (loss(plus) - loss(minus)) / (2.0 * o.step);
      const double analytic = grad.values()[flat];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), o.floor});
      const double rel = std::abs(analytic - numeric) / denom;
      rep.entries.push_back({block, idx, analytic, numeric, rel});
      rep.max_rel_error = std::max(rep.max_rel_error, rel);
    }
    ++rep.blocks_covered;
  }
  return rep;
}

inline std::vector<Check> gradcheck_checks(const GradcheckReport& r, double tolerance) {
  return {{"gradient coordinates >= 100", r.entries.size() >= 100, std::to_string(r.entries.size()) + " checked"},
          {"all parameter blocks covered", r.blocks_covered == kNumBlocks, std::to_string(r.blocks_covered) + " blocks"},
          {"max relative error <= " + fmt(tolerance), r.max_rel_error <= tolerance, "max " + fmt(r.max_rel_error)}};
}

// ---------------------------------------------------------------------------
// Reward table

inline sim::Scene straight_corridor(double speed) {
  sim::Scene s;
  s.ego0 = {0.0, 0.0, 0.0, speed, 0.0};
  for (double x = -10.0; x <= 40.0 + 1e-9; x += 0.5) s.route.push_back({x, 0.0});
  s.drivable = {{-10.0, -4.0}, {40.0, -4.0}, {40.0, 4.0}, {-10.0, 4.0}};
  for (int i = 0; i < sim::kWaypoints; ++i) s.expert[static_cast<std::size_t>(i)] = {speed * 0.5 * (i + 1), 0.0};
  return s;
}

inline sim::Waypoints constant_speed_plan(double speed) {
  sim::Waypoints w;
  for (int i = 0; i < sim::kWaypoints; ++i) w[static_cast<std::size_t>(i)] = {speed * 0.5 * (i + 1), 0.0};
  return w;
}

/// Disc-approach time from a 1 ms brute-force scan, +inf past `horizon`.
inline double brute_force_ttc(const Vec2& rel_pos, const Vec2& rel_vel, double radius_sum, double horizon = 20.0) {
  for (long k = 0; k * 1e-3 <= horizon; ++k) {
    const double tau = k * 1e-3;
    if ((rel_pos + rel_vel * tau).norm() <= radius_sum) return tau;
  }
  return std::numeric_limits<double>::infinity();
}

// A generated scene whose agents are re-aimed with random headings so that
// encounters actually occur.
inline sim::Scene encounter_scene(std::uint64_t seed) {
  auto s = sim::generate_scene(seed, sim::Difficulty::hard);
  SplitMix64 rng(derive_seed(seed, {0xE1C0}));
  for (auto& a : s.agents) {
    const double ang = 2.0 * sim::kPi * uniform01(rng);
    const double speed = 0.5 + 3.0 * uniform01(rng);
    a.velocity = speed * Vec2(std::cos(ang), std::sin(ang));
  }
  return s;
}

struct TtcComparison {
  int scenes = 0;
  int finite_pairs = 0;
  double max_abs_error = 0.0;
};

inline TtcComparison compare_ttc(int scenes, std::uint64_t seed, double horizon = 20.0) {
  TtcComparison c;
  for (int i = 0; i < scenes; ++i) {
    const auto s = encounter_scene(derive_seed(seed, {static_cast<std::uint64_t>(i)}));
    const auto poses = sim::rollout(s.expert, s.ego0);
    double closed = std::numeric_limits<double>::infinity();
    double brute = std::numeric_limits<double>::infinity();
    for (const auto& pose : poses) {
      for (const auto& a : s.agents) {
        const Vec2 rp = a.position_at(pose.t) - pose.position;
        const Vec2 rv = a.velocity - pose.velocity;
        const double r = sim::kEgoRadius + a.radius;
        closed = std::min(closed, sim::time_to_collision(rp, rv, r));
        brute = std::min(brute, brute_force_ttc(rp, rv, r, horizon));
      }
    }
    if (closed > horizon) closed = std::numeric_limits<double>::infinity();
    ++c.scenes;
    if (std::isinf(closed) != std::isinf(brute)) {
      c.max_abs_error = std::numeric_limits<double>::infinity();
    } else if (!std::isinf(closed)) {
      ++c.finite_pairs;
      c.max_abs_error = std::max(c.max_abs_error, std::abs(closed - brute));
    }
  }
  return c;
}

/// Hand-built scene table with exact expected sub-scores.
inline std::vector<Check> reward_checks(int ttc_scenes = 100, std::uint64_t seed = 5) {
  std::vector<Check> out;
  const double speed = 2.5;
  const auto plan = constant_speed_plan(speed);

  {
    auto s = straight_corridor(speed);
    s.agents.push_back({Vec2(5.0, 0.0), 0.8, Vec2::Zero()});
    const auto r = sim::score_plan(s, plan);
    out.push_back({"agent collision -> NC 0, reward 0", r.nc == 0.0 && r.reward == 0.0 && r.pdms == 0.0,
                   "nc " + fmt(r.nc) + " reward " + fmt(r.reward)});
  }
  {
    auto s = straight_corridor(speed);
    s.obstacles.push_back({Vec2(5.0, 0.0), 0.5});
    const auto r = sim::score_plan(s, plan);
    const double expected = 0.5 * (5.0 * r.ep + 5.0 * r.ttc + 2.0 * r.comfort) / 12.0;
    out.push_back({"static-only contact -> NC 0.5", r.nc == 0.5 && std::abs(r.reward - expected) <= 1e-12,
                   "nc " + fmt(r.nc) + " reward " + fmt(r.reward)});
  }
  {
    // Head-on, 20 m and 5 m centre gaps, 10 m/s closing, radii summing to 1 m.
    const double far = sim::time_to_collision(Vec2(20.0, 0.0), Vec2(-10.0, 0.0), 1.0);
    const double near = sim::time_to_collision(Vec2(5.0, 0.0), Vec2(-10.0, 0.0), 1.0);
    out.push_back({"closed-form TTC 1.9 s / 0.4 s", std::abs(far - 1.9) < 1e-12 && std::abs(near - 0.4) < 1e-12 &&
                                                         sim::ttc_score(far) == 1.0 && sim::ttc_score(near) == 0.0,
                   "ttc " + fmt(far) + " / " + fmt(near)});
  }
  auto ttc_case = [&](double tau) {
    // One pose at the origin moving at 5 m/s; an agent closing head-on at 10 m/s.
    auto s = straight_corridor(5.0);
    const double agent_radius = 0.5;
    const double r_sum = sim::kEgoRadius + agent_radius;
    s.agents.push_back({Vec2(r_sum + 10.0 * tau, 0.0), agent_radius, Vec2(-5.0, 0.0)});
    sim::Pose p;
    p.position = Vec2::Zero();
    p.velocity = Vec2(5.0, 0.0);
    p.speed = 5.0;
    const std::vector<sim::Pose> poses{p};
    return sim::score(s, poses);
  };
  {
    const auto r = ttc_case(1.9);
    out.push_back({"scored TTC 1.9 s -> 1", r.ttc == 1.0 && std::abs(r.min_ttc - 1.9) < 1e-9, "min_ttc " + fmt(r.min_ttc)});
  }
  {
    const auto r = ttc_case(0.4);
    out.push_back({"scored TTC 0.4 s -> 0", r.ttc == 0.0 && std::abs(r.min_ttc - 0.4) < 1e-9, "min_ttc " + fmt(r.min_ttc)});
  }
  {
    sim::Scene ep_scene = straight_corridor(2.0);
    ep_scene.expert = constant_speed_plan(2.5);  // expert reaches 10 m, plan 8 m
    const auto r = sim::score_plan(ep_scene, constant_speed_plan(2.0));
    const bool subs = r.nc == 1.0 && r.dac == 1.0 && r.ttc == 1.0 && r.comfort == 1.0;
    out.push_back({"EP 0.8 composite = 0.9167", subs && std::abs(r.ep - 0.8) <= 1e-12 &&
                                                     std::abs(r.reward - 11.0 / 12.0) <= 1e-12 &&
                                                     std::abs(r.reward - 0.9167) <= 5e-5,
                   "ep " + fmt(r.ep) + " reward " + fmt(r.reward)});
  }
  {
    const auto c = compare_ttc(ttc_scenes, seed);
    out.push_back({"closed-form TTC within 0.05 s of 1 ms brute force", c.max_abs_error <= 0.05,
                   std::to_string(c.scenes) + " scenes, " + std::to_string(c.finite_pairs) +
                       " with finite TTC, max error " + fmt(c.max_abs_error) + " s"});
  }
  return out;
}

}  // namespace dflow::oracle
