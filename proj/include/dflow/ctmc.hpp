#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "dflow/prob_path.hpp"

namespace dflow {

// Single-coordinate transition z -> x steered towards x1.
struct RateQuery {
  TokenId current;
  TokenId candidate;
  TokenId target;
  double t;
  int coordinate;
};

// Rate u_t(x, z | x1) / beta_dot for every candidate x != z, i.e.
// p_t(x | x1) * [d(z, x1) - d(x, x1)]_+, plus its sum. Separating beta_dot
// keeps the kernel finite at t = 0 where beta_dot diverges.
struct JumpKernel {
  std::vector<double> weights;  // zero at x == z
  double total = 0.0;
};

inline JumpKernel jump_kernel_at_beta(TokenId current, TokenId target, double beta, const CoordinateSpace& space,
                                      int coord) {
  std::vector<double> d;
  space.distances_to(coord, target, d);
  const auto p = gibbs_from_distances(d, beta);
  JumpKernel k;
  k.weights.assign(d.size(), 0.0);
  const double dz = d[static_cast<std::size_t>(current)];
  for (std::size_t x = 0; x < d.size(); ++x) {
    if (static_cast<TokenId>(x) == current) continue;
    const double gain = dz - d[x];
    if (gain > 0.0) {
      k.weights[x] = p[x] * gain;
      k.total += k.weights[x];
    }
  }
  return k;
}

inline void check_query(const RateQuery& q, const CoordinateSpace& space) {
  space.check_coordinate(q.coordinate);
  const auto k = space.alphabet();
  if (q.current < 0 || q.current >= k || q.candidate < 0 || q.candidate >= k || q.target < 0 || q.target >= k) {
    throw RangeError("rate query: token out of range");
  }
}

/// Total outgoing rate lambda = sum_{x != z} u_t(x, z | x1) >= 0.
inline double exit_rate(TokenId current, TokenId target, double t, const CoordinateSpace& space, int coord,
                        const GibbsSchedule& sched) {
  check_query({current, current, target, t, coord}, space);
  const auto sv = beta_at(t, sched);
  const auto k = jump_kernel_at_beta(current, target, sv.beta, space, coord);
  if (k.total == 0.0) return 0.0;
  return sv.beta_dot * k.total;
}

/// Off-diagonal: p_t(x|x1) * beta_dot * [d(z,x1) - d(x,x1)]_+.
/// Diagonal (x == z): minus the exit rate, so each column sums to zero.
inline double conditional_rate(const RateQuery& q, const CoordinateSpace& space, const GibbsSchedule& sched) {
  check_query(q, space);
  if (q.candidate == q.current) return -exit_rate(q.current, q.target, q.t, space, q.coordinate, sched);
  const double gain = space.distance(q.coordinate, q.current, q.target) -
                      space.distance(q.coordinate, q.candidate, q.target);
  if (gain <= 0.0) return 0.0;
  const auto sv = beta_at(q.t, sched);
  const auto p = gibbs_conditional_at_beta(q.target, sv.beta, space, q.coordinate);
  return p[static_cast<std::size_t>(q.candidate)] * sv.beta_dot * gain;
}

// Rate function u(x, z, t) and path function p_t(.) used by the forward-equation oracle.
using RateFn = std::function<double(TokenId x, TokenId z, double t)>;
using PathFn = std::function<std::vector<double>(double t)>;

/// max_x | dp_t(x)/dt - sum_z u_t(x, z) p_t(z) |, with the time derivative
/// taken by central differences of the path. The diagonal of u carries the
/// outflow, so the sum is inflow minus outflow (-div j).
inline double forward_residual(const PathFn& path, const RateFn& rate, std::int32_t alphabet, double t, double dt) {
  if (!(dt > 0.0) || t - dt < 0.0 || t + dt > 1.0) throw RangeError("forward_residual: t +/- dt outside [0, 1]");
  const auto p = path(t);
  const auto p_plus = path(t + dt);
  const auto p_minus = path(t - dt);
  double worst = 0.0;
  for (TokenId x = 0; x < alphabet; ++x) {
    const double p_dot = (p_plus[static_cast<std::size_t>(x)] - p_minus[static_cast<std::size_t>(x)]) / (2.0 * dt);
    double net = 0.0;
    for (TokenId z = 0; z < alphabet; ++z) net += rate(x, z, t) * p[static_cast<std::size_t>(z)];
    worst = std::max(worst, std::abs(p_dot - net));
  }
  return worst;
}

/// Residual of the Gibbs path against its conditional rates for a one-coordinate space.
inline double gibbs_forward_residual(const CoordinateSpace& space, TokenId target, double t, double dt,
                                     const GibbsSchedule& sched) {
  if (space.dimension() != 1 || space.alphabet() > 8) {
    throw ValidationError("gibbs_forward_residual: oracle needs D = 1 and K <= 8");
  }
  if (t + dt >= sched.t_max) throw RangeError("gibbs_forward_residual: t + dt must stay below t_max");
  PathFn path = [&](double s) { return gibbs_conditional(target, s, space, 0, sched); };
  RateFn rate = [&](TokenId x, TokenId z, double s) {
    return conditional_rate({z, x, target, s, 0}, space, sched);
  };
  return forward_residual(path, rate, space.alphabet(), t, dt);
}

// Mixture path with kappa(t) = t and its exact velocity
// u(x, z) = kappa_dot / (1 - kappa) * (delta_x1(x) - delta_z(x)).
inline PathFn linear_mixture_path(std::vector<double> prior, TokenId target) {
  return [prior = std::move(prior), target](double t) { return mixture_conditional(prior, target, t); };
}

inline RateFn linear_mixture_velocity(TokenId target) {
  return [target](TokenId x, TokenId z, double t) {
    const double coeff = 1.0 / (1.0 - t);
    return coeff * ((x == target ? 1.0 : 0.0) - (x == z ? 1.0 : 0.0));
  };
}

}  // namespace dflow
