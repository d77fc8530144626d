#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "dflow/codebook.hpp"
#include "dflow/errors.hpp"
#include "dflow/random.hpp"

namespace dflow {

// beta(t) = scale * (t / (1 - t))^exponent, held constant beyond t_max.
struct GibbsSchedule {
  double scale = 3.0;
  double exponent = 0.9;
  double t_max = 0.999;

  void validate() const {
    if (!(scale > 0.0) || !std::isfinite(scale)) throw ValidationError("schedule: scale must be positive");
    if (!(exponent > 0.0) || !std::isfinite(exponent)) throw ValidationError("schedule: exponent must be positive");
    if (!(t_max > 0.0 && t_max < 1.0)) throw ValidationError("schedule: t_max must lie in (0, 1)");
  }
};

struct ScheduleValue {
  double beta;
  double beta_dot;
};

// beta_dot is analytic; at t = 0 it is +inf when exponent < 1, and 0 beyond t_max.
inline ScheduleValue beta_at(double t, const GibbsSchedule& sched) {
  if (!(t >= 0.0 && t <= 1.0)) throw RangeError("beta_at: t outside [0, 1]");
  const double tc = std::min(t, sched.t_max);
  const double ratio = tc / (1.0 - tc);
  const double beta = sched.scale * std::pow(ratio, sched.exponent);
  if (t >= sched.t_max) return {beta, 0.0};
  if (t == 0.0) {
    if (sched.exponent < 1.0) return {0.0, std::numeric_limits<double>::infinity()};
    return {0.0, sched.exponent == 1.0 ? sched.scale : 0.0};
  }
  const double beta_dot =
      sched.scale * sched.exponent * std::pow(ratio, sched.exponent - 1.0) / ((1.0 - tc) * (1.0 - tc));
  return {beta, beta_dot};
}

inline double beta_of(double t, const GibbsSchedule& sched) { return beta_at(t, sched).beta; }

// Per-coordinate alphabet and metric. Every coordinate shares the codebook
// alphabet of size K; metrics may differ.
struct CoordinateSpace {
  CodebookSpec codebook = CodebookSpec::desk();
  std::vector<GroundMetric> metrics = std::vector<GroundMetric>(16);
  const EmbeddingTable* table = nullptr;

  static CoordinateSpace uniform(const CodebookSpec& spec, int coordinates, GroundMetric metric = {}) {
    return CoordinateSpace{spec, std::vector<GroundMetric>(static_cast<std::size_t>(coordinates), metric), nullptr};
  }

  int dimension() const { return static_cast<int>(metrics.size()); }
  std::int32_t alphabet() const { return codebook.size(); }

  void validate() const {
    codebook.validate();
    if (metrics.empty()) throw ValidationError("coordinate space: need at least one coordinate");
    if (alphabet() < 2) throw ValidationError("coordinate space: alphabet must have at least 2 tokens");
    bool any_positive = false;
    for (const auto& m : metrics) {
      m.validate();
      if (m.kind == MetricKind::embedding_l2 && table == nullptr) {
        throw ValidationError("coordinate space: embedding_l2 metric without an embedding table");
      }
      any_positive = any_positive || m.weight > 0.0;
    }
    if (!any_positive) throw ValidationError("coordinate space: at least one metric weight must be positive");
  }

  void check_coordinate(int coord) const {
    if (coord < 0 || coord >= dimension()) throw RangeError("coordinate index out of range");
  }

  // Weighted dissimilarity w_i * d_i(a, b) for coordinate `coord`.
  double distance(int coord, TokenId a, TokenId b) const {
    const auto& m = metrics[static_cast<std::size_t>(coord)];
    return m.weight * ground_distance(a, b, m, codebook, table);
  }

  // Distances d(x, target) for every token x of the alphabet.
  void distances_to(int coord, TokenId target, std::vector<double>& out) const {
    const std::int32_t k = alphabet();
    out.resize(static_cast<std::size_t>(k));
    const auto& m = metrics[static_cast<std::size_t>(coord)];
    if (m.kind == MetricKind::scalar_abs) {
      const double unit = m.weight * codebook.resolution / codebook.range();
      for (TokenId x = 0; x < k; ++x) out[static_cast<std::size_t>(x)] = unit * std::abs(static_cast<double>(x - target));
      return;
    }
    for (TokenId x = 0; x < k; ++x) out[static_cast<std::size_t>(x)] = distance(coord, x, target);
  }
};

// softmax(-beta * d); shift-invariant in d.
inline std::vector<double> gibbs_from_distances(std::span<const double> distances, double beta) {
  std::vector<double> p(distances.size());
  if (distances.empty()) return p;
  const double dmin = *std::min_element(distances.begin(), distances.end());
  double total = 0.0;
  for (std::size_t i = 0; i < distances.size(); ++i) {
    p[i] = std::exp(-beta * (distances[i] - dmin));
    total += p[i];
  }
  for (double& v : p) v /= total;
  return p;
}

inline std::vector<double> gibbs_conditional_at_beta(TokenId target, double beta, const CoordinateSpace& space,
                                                     int coord) {
  space.check_coordinate(coord);
  std::vector<double> d;
  space.distances_to(coord, target, d);
  return gibbs_from_distances(d, beta);
}

/// p_t(. | x1_i) = softmax(-beta(t) * d(., x1_i)) for one coordinate.
inline std::vector<double> gibbs_conditional(TokenId target, double t, const CoordinateSpace& space, int coord,
                                             const GibbsSchedule& sched) {
  if (target < 0 || target >= space.alphabet()) throw RangeError("gibbs_conditional: target token out of range");
  return gibbs_conditional_at_beta(target, beta_of(t, sched), space, coord);
}

/// (1 - kappa) * prior + kappa * delta_target.
inline std::vector<double> mixture_conditional(std::span<const double> prior, TokenId target, double kappa) {
  if (!(kappa >= 0.0 && kappa <= 1.0)) throw RangeError("mixture_conditional: kappa outside [0, 1]");
  if (target < 0 || static_cast<std::size_t>(target) >= prior.size()) {
    throw RangeError("mixture_conditional: target outside the prior's support");
  }
  double total = 0.0;
  for (double v : prior) {
    if (v < 0.0) throw ValidationError("mixture_conditional: negative prior mass");
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ValidationError("mixture_conditional: prior does not sum to 1");
  std::vector<double> p(prior.size());
  for (std::size_t i = 0; i < prior.size(); ++i) p[i] = (1.0 - kappa) * prior[i];
  p[static_cast<std::size_t>(target)] += kappa;
  return p;
}

// Mask-token prior over K numeric tokens plus one reserved mask id K.
inline std::vector<double> mask_prior(std::int32_t alphabet) {
  std::vector<double> p(static_cast<std::size_t>(alphabet) + 1, 0.0);
  p.back() = 1.0;
  return p;
}

/// Samples every coordinate independently from its Gibbs conditional at time t.
/// Coordinate i draws from substream (seed, i).
inline TrajectoryTokens corrupt(const TrajectoryTokens& x1, double t, const CoordinateSpace& space,
                                const GibbsSchedule& sched, std::uint64_t seed) {
  if (static_cast<int>(x1.size()) != space.dimension()) throw ValidationError("corrupt: sequence length != D");
  const double beta = beta_of(t, sched);
  TrajectoryTokens out(x1.size());
  std::vector<double> d;
  for (int i = 0; i < space.dimension(); ++i) {
    const TokenId target = x1[static_cast<std::size_t>(i)];
    if (target < 0 || target >= space.alphabet()) throw RangeError("corrupt: token out of range");
    space.distances_to(i, target, d);
    const auto p = gibbs_from_distances(d, beta);
    auto rng = substream(seed, {static_cast<std::uint64_t>(i)});
    out[static_cast<std::size_t>(i)] = static_cast<TokenId>(sample_categorical(rng, p));
  }
  return out;
}

}  // namespace dflow
