#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "dflow/codebook.hpp"
#include "dflow/context.hpp"
#include "dflow/errors.hpp"
#include "dflow/random.hpp"

namespace dflow::sim {

using Vec2 = Eigen::Vector2d;

inline constexpr int kWaypoints = 8;
inline constexpr double kWaypointDt = 0.5;  // s
inline constexpr double kSampleDt = 0.1;    // s
inline constexpr int kSamples = 41;         // t = 0.0 .. 4.0
inline constexpr double kEgoRadius = 1.0;   // m
inline constexpr double kTtcBound = 0.9;    // s
inline constexpr double kMaxAccel = 4.0;    // m/s^2
inline constexpr double kMaxJerk = 8.0;     // m/s^3
inline constexpr double kPi = 3.14159265358979323846;

using Waypoints = std::array<Vec2, kWaypoints>;

struct EgoState {
  double x = 0.0;
  double y = 0.0;
  double heading = 0.0;  // rad
  double v = 0.0;        // m/s
  double a = 0.0;        // m/s^2
};

struct Agent {
  Vec2 center = Vec2::Zero();
  double radius = 1.0;
  Vec2 velocity = Vec2::Zero();

  Vec2 position_at(double t) const { return center + velocity * t; }
};

struct Obstacle {
  Vec2 center = Vec2::Zero();
  double radius = 0.5;
};

enum class Difficulty { easy, medium, hard };

inline std::string to_string(Difficulty d) {
  switch (d) {
    case Difficulty::easy: return "easy";
    case Difficulty::medium: return "medium";
    case Difficulty::hard: return "hard";
  }
  return "easy";
}

inline Difficulty difficulty_from_string(const std::string& s) {
  if (s == "easy") return Difficulty::easy;
  if (s == "medium") return Difficulty::medium;
  if (s == "hard") return Difficulty::hard;
  throw ValidationError("unknown difficulty '" + s + "'");
}

struct Scene {
  EgoState ego0;
  std::vector<Agent> agents;
  std::vector<Obstacle> obstacles;
  std::vector<Vec2> drivable;  // simple polygon
  std::vector<Vec2> route;     // centerline polyline
  Waypoints expert{};
  Command command = Command::straight;
  std::int64_t id = 0;
  std::uint64_t seed = 0;
};

struct RewardWeights {
  double ep = 5.0;
  double ttc = 5.0;
  double comfort = 2.0;

  void validate() const {
    if (!(ep >= 0 && ttc >= 0 && comfort >= 0) || ep + ttc + comfort <= 0.0) {
      throw ValidationError("reward weights must be nonnegative with a positive sum");
    }
  }
};

struct RewardBreakdown {
  double nc = 1.0;
  double dac = 1.0;
  double ttc = 1.0;
  double comfort = 1.0;
  double ep = 1.0;
  double reward = 1.0;
  double pdms = 1.0;
  double min_ttc = std::numeric_limits<double>::infinity();
};

/// Multiplicative safety times the weighted mean of the performance terms.
inline double composite_reward(double nc, double dac, double ep, double ttc, double comfort, const RewardWeights& w) {
  const double safety = nc * dac;
  if (safety == 0.0) return 0.0;
  return safety * (w.ep * ep + w.ttc * ttc + w.comfort * comfort) / (w.ep + w.ttc + w.comfort);
}

inline double pdms_score(double nc, double dac, double ep, double ttc, double comfort) {
  return nc * dac * (5.0 * ttc + 2.0 * comfort + 5.0 * ep) / 12.0;
}

// ---------------------------------------------------------------------------
// Geometry

inline double cross(const Vec2& a, const Vec2& b) { return a.x() * b.y() - a.y() * b.x(); }

inline double point_segment_distance(const Vec2& p, const Vec2& a, const Vec2& b) {
  const Vec2 ab = b - a;
  const double len2 = ab.squaredNorm();
  double s = len2 > 0.0 ? (p - a).dot(ab) / len2 : 0.0;
  s = std::clamp(s, 0.0, 1.0);
  return (p - (a + s * ab)).norm();
}

inline bool segments_intersect(const Vec2& p1, const Vec2& p2, const Vec2& q1, const Vec2& q2) {
  // Orientation with a relative tolerance so nearly collinear edges count as collinear.
  auto orient = [](const Vec2& a, const Vec2& b, const Vec2& c) {
    const double v = cross(b - a, c - a);
    const double tol = 1e-12 * (b - a).norm() * (c - a).norm();
    return std::abs(v) <= tol ? 0 : (v > 0 ? 1 : -1);
  };
  auto on_segment = [](const Vec2& a, const Vec2& b, const Vec2& p) {
    return std::min(a.x(), b.x()) <= p.x() && p.x() <= std::max(a.x(), b.x()) && std::min(a.y(), b.y()) <= p.y() &&
           p.y() <= std::max(a.y(), b.y());
  };
  const int d1 = orient(q1, q2, p1);
  const int d2 = orient(q1, q2, p2);
  const int d3 = orient(p1, p2, q1);
  const int d4 = orient(p1, p2, q2);
  if (d1 * d2 < 0 && d3 * d4 < 0) return true;
  if (d1 == 0 && on_segment(q1, q2, p1)) return true;
  if (d2 == 0 && on_segment(q1, q2, p2)) return true;
  if (d3 == 0 && on_segment(p1, p2, q1)) return true;
  if (d4 == 0 && on_segment(p1, p2, q2)) return true;
  return false;
}

// Raises ValidationError unless `poly` is a simple polygon with >= 3 finite vertices.
inline void validate_polygon(std::span<const Vec2> poly) {
  const std::size_t n = poly.size();
  if (n < 3) throw ValidationError("drivable polygon needs at least 3 vertices");
  for (const auto& v : poly) {
    if (!v.allFinite()) throw ValidationError("drivable polygon has a non-finite vertex");
  }
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2& a1 = poly[i];
    const Vec2& a2 = poly[(i + 1) % n];
    if ((a2 - a1).norm() == 0.0) throw ValidationError("drivable polygon has a zero-length edge");
    for (std::size_t j = i + 1; j < n; ++j) {
      if (j == i + 1 || (i == 0 && j == n - 1)) continue;  // adjacent edges share a vertex
      if (segments_intersect(a1, a2, poly[j], poly[(j + 1) % n])) {
        throw ValidationError("drivable polygon is not simple (edges " + std::to_string(i) + " and " +
                              std::to_string(j) + " intersect)");
      }
    }
  }
}

inline bool point_in_polygon(const Vec2& p, std::span<const Vec2> poly) {
  bool inside = false;
  const std::size_t n = poly.size();
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    const Vec2& a = poly[i];
    const Vec2& b = poly[j];
    if ((a.y() > p.y()) != (b.y() > p.y())) {
      const double x_cross = (b.x() - a.x()) * (p.y() - a.y()) / (b.y() - a.y()) + a.x();
      if (p.x() < x_cross) inside = !inside;
    }
  }
  return inside;
}

inline bool disc_inside_polygon(const Vec2& c, double radius, std::span<const Vec2> poly) {
  if (!point_in_polygon(c, poly)) return false;
  const std::size_t n = poly.size();
  for (std::size_t i = 0; i < n; ++i) {
    if (point_segment_distance(c, poly[i], poly[(i + 1) % n]) < radius) return false;
  }
  return true;
}

// Arc-length coordinate of the projection of p onto the polyline.
inline double project_arc_length(const Vec2& p, std::span<const Vec2> line) {
  if (line.size() < 2) throw ValidationError("route polyline needs at least 2 points");
  double best_dist = std::numeric_limits<double>::infinity();
  double best_s = 0.0;
  double s0 = 0.0;
  for (std::size_t i = 0; i + 1 < line.size(); ++i) {
    const Vec2 ab = line[i + 1] - line[i];
    const double len = ab.norm();
    double u = len > 0.0 ? std::clamp((p - line[i]).dot(ab) / (len * len), 0.0, 1.0) : 0.0;
    const double dist = (p - (line[i] + u * ab)).norm();
    if (dist < best_dist) {
      best_dist = dist;
      best_s = s0 + u * len;
    }
    s0 += len;
  }
  return best_s;
}

/// Smallest tau >= 0 with |rel_pos + rel_vel * tau| <= radius_sum; +inf if the
/// discs never meet, 0 if they already overlap.
inline double time_to_collision(const Vec2& rel_pos, const Vec2& rel_vel, double radius_sum) {
  const double c = rel_pos.squaredNorm() - radius_sum * radius_sum;
  if (c <= 0.0) return 0.0;
  const double a = rel_vel.squaredNorm();
  if (a == 0.0) return std::numeric_limits<double>::infinity();
  const double b = 2.0 * rel_pos.dot(rel_vel);
  const double disc = b * b - 4.0 * a * c;
  if (disc < 0.0) return std::numeric_limits<double>::infinity();
  const double tau = (-b - std::sqrt(disc)) / (2.0 * a);
  return tau >= 0.0 ? tau : std::numeric_limits<double>::infinity();
}

inline double ttc_score(double min_ttc) { return min_ttc > kTtcBound ? 1.0 : 0.0; }

// ---------------------------------------------------------------------------
// Rollout

struct Pose {
  double t = 0.0;
  Vec2 position = Vec2::Zero();
  Vec2 velocity = Vec2::Zero();
  double heading = 0.0;
  double speed = 0.0;
  double accel = 0.0;
  double jerk = 0.0;
};

namespace detail {

// Piecewise-linear path through ego0 and the waypoints, extended backwards at
// the ego's current velocity and forwards at the last segment's velocity.
struct Path {
  std::array<Vec2, kWaypoints + 1> knots;
  Vec2 ego_velocity;

  Vec2 at(double t) const {
    if (t <= 0.0) return knots[0] + ego_velocity * t;
    const double horizon = kWaypointDt * kWaypoints;
    if (t >= horizon) {
      const Vec2 v = (knots[kWaypoints] - knots[kWaypoints - 1]) / kWaypointDt;
      return knots[kWaypoints] + v * (t - horizon);
    }
    const int seg = std::min(static_cast<int>(t / kWaypointDt), kWaypoints - 1);
    const double u = (t - seg * kWaypointDt) / kWaypointDt;
    return knots[static_cast<std::size_t>(seg)] * (1.0 - u) + knots[static_cast<std::size_t>(seg) + 1] * u;
  }

  // Finite differences with a window equal to the waypoint spacing.
  Vec2 velocity(double t) const {
    const double h = 0.5 * kWaypointDt;
    return (at(t + h) - at(t - h)) / kWaypointDt;
  }
  double speed(double t) const { return velocity(t).norm(); }
  double accel(double t) const {
    const double h = 0.5 * kWaypointDt;
    return (speed(t + h) - speed(t - h)) / kWaypointDt;
  }
  double jerk(double t) const {
    const double h = 0.5 * kWaypointDt;
    return (accel(t + h) - accel(t - h)) / kWaypointDt;
  }
};

}  // namespace detail

/// Poses at 10 Hz over [0, 4] s from 8 waypoints at 0.5 s spacing.
inline std::vector<Pose> rollout(const Waypoints& waypoints, const EgoState& ego0) {
  detail::Path path;
  path.knots[0] = Vec2(ego0.x, ego0.y);
  for (int i = 0; i < kWaypoints; ++i) {
    if (!waypoints[static_cast<std::size_t>(i)].allFinite()) throw ValidationError("rollout: non-finite waypoint");
    path.knots[static_cast<std::size_t>(i) + 1] = waypoints[static_cast<std::size_t>(i)];
  }
  path.ego_velocity = ego0.v * Vec2(std::cos(ego0.heading), std::sin(ego0.heading));

  std::vector<Pose> poses(kSamples);
  double heading = ego0.heading;
  for (int k = 0; k < kSamples; ++k) {
    Pose& p = poses[static_cast<std::size_t>(k)];
    p.t = k * kSampleDt;
    p.position = path.at(p.t);
    const int seg = std::min(static_cast<int>((p.t + 1e-9) / kWaypointDt), kWaypoints - 1);
    const Vec2 dir = path.knots[static_cast<std::size_t>(seg) + 1] - path.knots[static_cast<std::size_t>(seg)];
    if (dir.norm() > 1e-9) heading = std::atan2(dir.y(), dir.x());
    p.heading = heading;
    p.velocity = path.velocity(p.t);
    p.speed = p.velocity.norm();
    p.accel = path.accel(p.t);
    p.jerk = path.jerk(p.t);
  }
  return poses;
}

// ---------------------------------------------------------------------------
// Scoring

inline double min_time_to_collision(const Scene& scene, std::span<const Pose> poses) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& pose : poses) {
    for (const auto& agent : scene.agents) {
      const Vec2 rel_pos = agent.position_at(pose.t) - pose.position;
      const Vec2 rel_vel = agent.velocity - pose.velocity;
      best = std::min(best, time_to_collision(rel_pos, rel_vel, kEgoRadius + agent.radius));
    }
  }
  return best;
}

inline double route_progress(const Scene& scene, const Vec2& end) {
  const Vec2 start(scene.ego0.x, scene.ego0.y);
  return project_arc_length(end, scene.route) - project_arc_length(start, scene.route);
}

/// Sub-scores and composite reward of a rolled-out plan.
inline RewardBreakdown score(const Scene& scene, std::span<const Pose> poses, const RewardWeights& weights = {}) {
  validate_polygon(scene.drivable);
  weights.validate();
  if (poses.empty()) throw ValidationError("score: empty rollout");
  RewardBreakdown r;

  bool agent_hit = false;
  bool static_hit = false;
  bool outside = false;
  bool uncomfortable = false;
  for (const auto& pose : poses) {
    for (const auto& agent : scene.agents) {
      if ((agent.position_at(pose.t) - pose.position).norm() < kEgoRadius + agent.radius) agent_hit = true;
    }
    for (const auto& obs : scene.obstacles) {
      if ((obs.center - pose.position).norm() < kEgoRadius + obs.radius) static_hit = true;
    }
    if (!disc_inside_polygon(pose.position, kEgoRadius, scene.drivable)) outside = true;
    if (std::abs(pose.accel) > kMaxAccel || std::abs(pose.jerk) > kMaxJerk) uncomfortable = true;
  }
  r.nc = agent_hit ? 0.0 : (static_hit ? 0.5 : 1.0);
  r.dac = outside ? 0.0 : 1.0;
  r.comfort = uncomfortable ? 0.0 : 1.0;
  r.min_ttc = min_time_to_collision(scene, poses);
  r.ttc = ttc_score(r.min_ttc);

  const double reference = route_progress(scene, scene.expert.back());
  const double progress = route_progress(scene, poses.back().position);
  r.ep = reference > 1e-9 ? std::clamp(progress / reference, 0.0, 1.0) : 1.0;

  r.reward = composite_reward(r.nc, r.dac, r.ep, r.ttc, r.comfort, weights);
  r.pdms = pdms_score(r.nc, r.dac, r.ep, r.ttc, r.comfort);
  return r;
}

inline RewardBreakdown score_plan(const Scene& scene, const Waypoints& plan, const RewardWeights& weights = {}) {
  const auto poses = rollout(plan, scene.ego0);
  return score(scene, poses, weights);
}

// ---------------------------------------------------------------------------
// Expert and generator

// Curvature of the planned arc: sign from the command, magnitude growing with
// the initial heading offset.
inline double route_curvature(Command cmd, double heading) {
  const double mag = 0.04 + 0.1 * std::abs(heading);
  switch (cmd) {
    case Command::left: return mag;
    case Command::right: return -mag;
    case Command::straight: return 0.0;
  }
  return 0.0;
}

inline Vec2 arc_point(double s, double heading, double curvature) {
  if (std::abs(curvature) < 1e-12) return s * Vec2(std::cos(heading), std::sin(heading));
  return Vec2((std::sin(heading + curvature * s) - std::sin(heading)) / curvature,
              (std::cos(heading) - std::cos(heading + curvature * s)) / curvature);
}

// Distance travelled at time t under constant acceleration, stopping at v = 0.
inline double travelled(double v0, double a0, double t) {
  if (a0 < 0.0) {
    const double t_stop = -v0 / a0;
    if (t > t_stop) t = t_stop;
  }
  return v0 * t + 0.5 * a0 * t * t;
}

/// Kinematic route-follower: constant curvature arc at the commanded turn,
/// constant longitudinal acceleration `plan_accel`.
inline Waypoints expert_plan(Command cmd, const EgoState& ego, double plan_accel) {
  const double kappa = route_curvature(cmd, ego.heading);
  Waypoints w;
  for (int i = 0; i < kWaypoints; ++i) {
    const double s = travelled(ego.v, plan_accel, kWaypointDt * (i + 1));
    w[static_cast<std::size_t>(i)] = Vec2(ego.x, ego.y) + arc_point(s, ego.heading, kappa);
  }
  return w;
}

inline EgoState ego_from_context(const ContextEncoding& ctx, const CodebookSpec& spec) {
  return {dequantize(ctx.ego[kEgoX], spec), dequantize(ctx.ego[kEgoY], spec),
          dequantize(ctx.ego[kEgoHeading], spec), dequantize(ctx.ego[kEgoSpeed], spec),
          dequantize(ctx.ego[kEgoAccel], spec)};
}

inline ContextEncoding context_of(const Scene& scene, const CodebookSpec& spec) {
  ContextEncoding c;
  c.command = scene.command;
  c.ego = {quantize(scene.ego0.x, spec), quantize(scene.ego0.y, spec), quantize(scene.ego0.heading, spec),
           quantize(scene.ego0.v, spec), quantize(scene.ego0.a, spec)};
  return c;
}

// Waypoints relative to the ego position, x/y interleaved.
inline TrajectoryTokens tokenize_waypoints(const Waypoints& w, const EgoState& ego, const CodebookSpec& spec) {
  TrajectoryTokens out;
  out.reserve(2 * kWaypoints);
  for (const auto& p : w) {
    out.push_back(quantize(p.x() - ego.x, spec));
    out.push_back(quantize(p.y() - ego.y, spec));
  }
  return out;
}

inline Waypoints decode_waypoints(const TrajectoryTokens& tokens, const EgoState& ego, const CodebookSpec& spec) {
  if (tokens.size() != 2 * kWaypoints) throw ValidationError("decode_waypoints: expected 16 tokens");
  Waypoints w;
  for (int i = 0; i < kWaypoints; ++i) {
    w[static_cast<std::size_t>(i)] = Vec2(ego.x + dequantize(tokens[2 * static_cast<std::size_t>(i)], spec),
                                          ego.y + dequantize(tokens[2 * static_cast<std::size_t>(i) + 1], spec));
  }
  return w;
}

inline double mean_waypoint_error(const Waypoints& a, const Waypoints& b) {
  double s = 0.0;
  for (int i = 0; i < kWaypoints; ++i) s += (a[static_cast<std::size_t>(i)] - b[static_cast<std::size_t>(i)]).norm();
  return s / kWaypoints;
}

// Ranges of the tokenized ego state sampled by the generator.
struct ContextRanges {
  double heading_max = 0.6;  // rad; scaled down for easier scenes
  double speed_min = 0.4;
  double speed_max = 1.2;
  double accel_max = 0.2;
};

// Draws a context on the codebook grid.
inline ContextEncoding sample_context(SplitMix64& rng, const CodebookSpec& spec, double heading_max,
                                      const ContextRanges& ranges = {}) {
  auto pick = [&](double lo, double hi) {
    const TokenId a = quantize(lo, spec);
    const TokenId b = quantize(hi, spec);
    return static_cast<TokenId>(a + static_cast<TokenId>(uniform_index(rng, static_cast<std::uint64_t>(b - a + 1))));
  };
  ContextEncoding c;
  c.command = static_cast<Command>(uniform_index(rng, kNumCommands));
  c.ego[kEgoX] = quantize(0.0, spec);
  c.ego[kEgoY] = quantize(0.0, spec);
  c.ego[kEgoHeading] = pick(-heading_max, heading_max);
  c.ego[kEgoSpeed] = pick(ranges.speed_min, ranges.speed_max);
  c.ego[kEgoAccel] = pick(-ranges.accel_max, ranges.accel_max);
  return c;
}

struct GeneratorConfig {
  CodebookSpec codebook = CodebookSpec::desk();
  // The expert's longitudinal acceleration is a latent intent drawn from
  // [-spread, spread], not observable from the context.
  double plan_accel_spread = 0.3;
  double corridor_half_width = 3.5;  // m
  double route_back = 6.0;           // m of centerline behind the ego
  double route_ahead = 24.0;         // m ahead
  double route_spacing = 0.5;        // m
};

namespace detail {

inline std::vector<Vec2> centerline(const EgoState& ego, double kappa, const GeneratorConfig& cfg) {
  std::vector<Vec2> pts;
  for (double s = -cfg.route_back; s <= cfg.route_ahead + 1e-9; s += cfg.route_spacing) {
    pts.push_back(Vec2(ego.x, ego.y) + arc_point(s, ego.heading, kappa));
  }
  return pts;
}

inline Vec2 left_normal(double heading, double kappa, double s) {
  const double h = heading + kappa * s;
  return Vec2(-std::sin(h), std::cos(h));
}

inline Vec2 tangent(double heading, double kappa, double s) {
  const double h = heading + kappa * s;
  return Vec2(std::cos(h), std::sin(h));
}

}  // namespace detail

/// Deterministic procedural scene. Difficulty scales the heading range (and
/// hence corridor curvature), the agent count and the obstacle count. Agents
/// and obstacles are resampled until the expert plan is collision free.
inline Scene generate_scene(std::uint64_t seed, Difficulty difficulty, const GeneratorConfig& cfg = {}) {
  SplitMix64 rng(derive_seed(seed, {0x5CE7E}));
  const auto& spec = cfg.codebook;
  double heading_max = 0.6;
  int agents_lo = 2, agents_hi = 4, obstacles_lo = 2, obstacles_hi = 4;
  if (difficulty == Difficulty::easy) {
    heading_max = 0.2;
    agents_lo = 0, agents_hi = 1, obstacles_lo = 0, obstacles_hi = 0;
  } else if (difficulty == Difficulty::medium) {
    heading_max = 0.4;
    agents_lo = 1, agents_hi = 2, obstacles_lo = 1, obstacles_hi = 2;
  }

  Scene scene;
  scene.seed = seed;
  scene.id = static_cast<std::int64_t>(seed);
  const ContextEncoding ctx = sample_context(rng, spec, heading_max);
  scene.command = ctx.command;
  scene.ego0 = ego_from_context(ctx, spec);
  const double kappa = route_curvature(scene.command, scene.ego0.heading);
  const double plan_accel = cfg.plan_accel_spread * (2.0 * uniform01(rng) - 1.0);
  scene.expert = expert_plan(scene.command, scene.ego0, plan_accel);
  scene.route = detail::centerline(scene.ego0, kappa, cfg);

  std::vector<Vec2> left;
  std::vector<Vec2> right;
  for (double s = -cfg.route_back; s <= cfg.route_ahead + 1e-9; s += cfg.route_spacing) {
    const Vec2 c = Vec2(scene.ego0.x, scene.ego0.y) + arc_point(s, scene.ego0.heading, kappa);
    const Vec2 n = detail::left_normal(scene.ego0.heading, kappa, s);
    left.push_back(c + cfg.corridor_half_width * n);
    right.push_back(c - cfg.corridor_half_width * n);
  }
  scene.drivable = left;
  scene.drivable.insert(scene.drivable.end(), right.rbegin(), right.rend());

  const auto expert_poses = rollout(scene.expert, scene.ego0);
  auto expert_clear = [&](const Scene& s) {
    for (const auto& pose : expert_poses) {
      for (const auto& a : s.agents)
        if ((a.position_at(pose.t) - pose.position).norm() < kEgoRadius + a.radius + 0.5) return false;
      for (const auto& o : s.obstacles)
        if ((o.center - pose.position).norm() < kEgoRadius + o.radius + 0.3) return false;
    }
    return true;
  };

  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * uniform01(rng); };
  auto count_in = [&](int lo, int hi) { return lo + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(hi - lo + 1))); };

  const int n_agents = count_in(agents_lo, agents_hi);
  const int n_obstacles = count_in(obstacles_lo, obstacles_hi);
  for (int attempt = 0; attempt < 1000; ++attempt) {
    Scene trial = scene;
    for (int i = 0; i < n_agents; ++i) {
      const double s = uniform(-4.0, 18.0);
      const double side = (rng() & 1ULL) ? 1.0 : -1.0;
      const double offset = side * uniform(4.5, 7.0);
      const Vec2 c = Vec2(scene.ego0.x, scene.ego0.y) + arc_point(s, scene.ego0.heading, kappa) +
                     offset * detail::left_normal(scene.ego0.heading, kappa, s);
      const double speed = uniform(0.5, 3.0) * ((rng() & 1ULL) ? 1.0 : -1.0);
      trial.agents.push_back({c, uniform(0.6, 1.0), speed * detail::tangent(scene.ego0.heading, kappa, s)});
    }
    for (int i = 0; i < n_obstacles; ++i) {
      const double s = uniform(1.0, 9.0);
      const double side = (rng() & 1ULL) ? 1.0 : -1.0;
      const double radius = uniform(0.3, 0.6);
      const double offset = side * uniform(2.2, cfg.corridor_half_width - radius);
      const Vec2 c = Vec2(scene.ego0.x, scene.ego0.y) + arc_point(s, scene.ego0.heading, kappa) +
                     offset * detail::left_normal(scene.ego0.heading, kappa, s);
      trial.obstacles.push_back({c, radius});
    }
    if (expert_clear(trial)) return trial;
  }
  throw RuntimeFailure("generate_scene: could not place agents clear of the expert (seed " + std::to_string(seed) + ")");
}

}  // namespace dflow::sim
