#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "dflow/errors.hpp"
#include "dflow/optim.hpp"
#include "dflow/random.hpp"

namespace dflow {

using TokenId = std::int32_t;
using TrajectoryTokens = std::vector<TokenId>;

// Uniform scalar codebook {min, min + res, ..., max}.
struct CodebookSpec {
  double min_value = -8.0;
  double max_value = 8.0;
  double resolution = 0.1;

  static CodebookSpec paper_scale() { return {-100.0, 100.0, 0.01}; }
  static CodebookSpec desk() { return {-8.0, 8.0, 0.1}; }

  std::int32_t size() const {
    return static_cast<std::int32_t>(std::lround((max_value - min_value) / resolution)) + 1;
  }
  double range() const { return max_value - min_value; }
  double value(TokenId id) const { return min_value + static_cast<double>(id) * resolution; }

  void validate() const {
    if (!std::isfinite(min_value) || !std::isfinite(max_value) || !std::isfinite(resolution)) {
      throw ValidationError("codebook: non-finite field");
    }
    if (!(resolution > 0.0)) throw ValidationError("codebook: resolution must be positive");
    if (!(max_value > min_value)) throw ValidationError("codebook: max must exceed min");
    const double steps = (max_value - min_value) / resolution;
    if (std::abs(steps - std::round(steps)) > 1e-6) {
      throw ValidationError("codebook: range is not a whole number of resolution steps");
    }
  }

  bool operator==(const CodebookSpec&) const = default;
};

// Nearest codebook index. Ties round half-to-even. Out-of-range values clamp
// unless `strict`.
inline TokenId quantize(double value, const CodebookSpec& spec, bool strict = false) {
  if (!std::isfinite(value)) throw RangeError("quantize: non-finite input");
  if (value < spec.min_value || value > spec.max_value) {
    if (strict) {
      throw RangeError("quantize: value " + std::to_string(value) + " outside [" +
                       std::to_string(spec.min_value) + ", " + std::to_string(spec.max_value) +
                       "]");
    }
    value = std::clamp(value, spec.min_value, spec.max_value);
  }
  // nearbyint honours the default FE_TONEAREST mode, i.e. half-to-even.
  const double idx = std::nearbyint((value - spec.min_value) / spec.resolution);
  return static_cast<TokenId>(std::clamp(idx, 0.0, static_cast<double>(spec.size() - 1)));
}

inline double dequantize(TokenId id, const CodebookSpec& spec) {
  if (id < 0 || id >= spec.size()) {
    throw RangeError("dequantize: token id " + std::to_string(id) + " outside codebook");
  }
  return spec.value(id);
}

/// Hinge max(0, d_near - d_far + margin).
inline double triplet_margin_loss(double d_near, double d_far, double margin = 0.05) {
  if (d_near < 0.0 || d_far < 0.0) throw ValidationError("triplet_margin_loss: negative distance");
  if (!(margin > 0.0)) throw ValidationError("triplet_margin_loss: margin must be positive");
  return std::max(0.0, d_near - d_far + margin);
}

// Row-normalized embedding table, one row per codebook token.
class EmbeddingTable {
 public:
  using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  EmbeddingTable() = default;
  EmbeddingTable(CodebookSpec spec, Matrix rows) : spec_(spec), rows_(std::move(rows)) {
    if (rows_.rows() != spec_.size()) throw ValidationError("embedding table: row count != codebook size");
  }

  // Gaussian rows projected onto the unit sphere.
  static EmbeddingTable random(const CodebookSpec& spec, int dimension, std::uint64_t seed) {
    spec.validate();
    if (dimension < 1) throw ValidationError("embedding table: dimension must be >= 1");
    SplitMix64 rng(derive_seed(seed, {0xE3B0}));
    Matrix rows(spec.size(), dimension);
    for (Eigen::Index r = 0; r < rows.rows(); ++r)
      for (Eigen::Index c = 0; c < rows.cols(); ++c) rows(r, c) = standard_normal(rng);
    EmbeddingTable t(spec, std::move(rows));
    t.normalize_rows();
    return t;
  }

  const CodebookSpec& spec() const { return spec_; }
  int dimension() const { return static_cast<int>(rows_.cols()); }
  std::int32_t size() const { return static_cast<std::int32_t>(rows_.rows()); }
  const Matrix& rows() const { return rows_; }
  Matrix& rows() { return rows_; }

  auto row(TokenId id) const { return rows_.row(id); }

  double distance(TokenId a, TokenId b) const { return (rows_.row(a) - rows_.row(b)).norm(); }

  void normalize_rows() {
    for (Eigen::Index r = 0; r < rows_.rows(); ++r) {
      const double n = rows_.row(r).norm();
      if (n > 0.0) rows_.row(r) /= n;
    }
  }

 private:
  CodebookSpec spec_{};
  Matrix rows_;
};

enum class MetricKind { scalar_abs, embedding_l2, circular };

struct GroundMetric {
  MetricKind kind = MetricKind::scalar_abs;
  double period = 2.0 * 3.14159265358979323846;  // circular only
  double weight = 1.0;

  void validate() const {
    if (!(weight >= 0.0) || !std::isfinite(weight)) throw ValidationError("metric: weight must be >= 0");
    if (kind == MetricKind::circular && !(period > 0.0)) {
      throw ValidationError("metric: circular period must be positive");
    }
  }
};

// Unweighted coordinate dissimilarity between two tokens.
inline double ground_distance(TokenId i, TokenId j, const GroundMetric& metric, const CodebookSpec& spec,
                              const EmbeddingTable* table = nullptr) {
  const std::int32_t n = spec.size();
  if (i < 0 || j < 0 || i >= n || j >= n) throw RangeError("ground_distance: token id outside codebook");
  if (i == j) return 0.0;
  switch (metric.kind) {
    case MetricKind::scalar_abs:
      return std::abs(static_cast<double>(i - j)) * spec.resolution / spec.range();
    case MetricKind::embedding_l2:
      if (table == nullptr) throw ValidationError("ground_distance: embedding_l2 requires a table");
      return table->distance(i, j);
    case MetricKind::circular: {
      double diff = std::fmod(std::abs(spec.value(i) - spec.value(j)), metric.period);
      return std::min(diff, metric.period - diff);
    }
  }
  return 0.0;
}

struct Triplet {
  TokenId anchor;
  TokenId near;
  TokenId far;
};

struct TripletSamplerConfig {
  int max_near_offset = 32;  // in resolution steps
  double decay = 0.5;        // P(o) proportional to decay^o
  // Probability of drawing the near offset uniformly from [1, N-2] instead of
  // the geometric law; gives ordering pressure at every scale.
  double global_fraction = 0.08;
};

// Near neighbours at a geometric token offset; far neighbours uniform among
// tokens strictly farther from the anchor than the near one.
inline std::vector<Triplet> sample_triplets(const CodebookSpec& spec, int count, std::uint64_t seed,
                                            const TripletSamplerConfig& cfg = {}) {
  spec.validate();
  if (count <= 0) throw ValidationError("sample_triplets: count must be positive");
  const std::int32_t n = spec.size();
  if (n < 3) throw ValidationError("sample_triplets: codebook needs at least 3 tokens");
  const int max_offset = std::min<int>(cfg.max_near_offset, n - 2);

  std::vector<double> offset_weights(static_cast<std::size_t>(max_offset));
  for (int o = 1; o <= max_offset; ++o) offset_weights[static_cast<std::size_t>(o - 1)] = std::pow(cfg.decay, o);

  SplitMix64 rng(derive_seed(seed, {0x7219}));
  std::vector<Triplet> out;
  out.reserve(static_cast<std::size_t>(count));
  while (static_cast<int>(out.size()) < count) {
    const auto anchor = static_cast<TokenId>(uniform_index(rng, static_cast<std::uint64_t>(n)));
    const bool global = uniform01(rng) < cfg.global_fraction;
    const int offset = global ? static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(n - 2))) + 1
                              : static_cast<int>(sample_categorical(rng, offset_weights)) + 1;
    const bool up_ok = anchor + offset < n;
    const bool down_ok = anchor - offset >= 0;
    if (!up_ok && !down_ok) continue;
    bool up = up_ok;
    if (up_ok && down_ok) up = (rng() & 1ULL) != 0;
    const TokenId near = up ? anchor + offset : anchor - offset;

    // Candidates with |k - anchor| > offset: [0, anchor - offset) U (anchor + offset, n).
    const std::int64_t below = std::max<std::int64_t>(0, anchor - offset);
    const std::int64_t above = std::max<std::int64_t>(0, n - 1 - (anchor + offset));
    if (below + above == 0) continue;
    const auto pick = static_cast<std::int64_t>(uniform_index(rng, static_cast<std::uint64_t>(below + above)));
    const TokenId far = pick < below ? static_cast<TokenId>(pick)
                                     : static_cast<TokenId>(anchor + offset + 1 + (pick - below));
    out.push_back({anchor, near, far});
  }
  return out;
}

struct EmbedConfig {
  int dimension = 32;
  double lr = 5e-4;
  double weight_decay = 0.01;
  double margin = 0.05;
  int steps = 40000;
  int batch = 80;
  std::uint64_t seed = 1;
  int eval_triplets = 10000;
  TripletSamplerConfig sampler{};
};

struct EmbedResult {
  EmbeddingTable table;
  std::vector<double> loss_trace;  // mean batch loss per step
  double initial_eval_loss = 0.0;  // on a fixed held-out triplet set
  double final_eval_loss = 0.0;
};

inline double mean_triplet_loss(const EmbeddingTable& table, const std::vector<Triplet>& triplets, double margin) {
  double total = 0.0;
  for (const auto& tr : triplets) {
    total += triplet_margin_loss(table.distance(tr.anchor, tr.near), table.distance(tr.anchor, tr.far), margin);
  }
  return triplets.empty() ? 0.0 : total / static_cast<double>(triplets.size());
}

// Metric-alignment stage: AdamW on the triplet loss, rows re-projected onto
// the unit sphere after every update.
inline EmbedResult train_embeddings(const CodebookSpec& spec, const EmbedConfig& cfg,
                                    std::optional<EmbeddingTable> init = std::nullopt) {
  spec.validate();
  if (cfg.steps < 0 || cfg.batch <= 0) throw ValidationError("train_embeddings: bad step/batch budget");
  EmbedResult result{init ? std::move(*init) : EmbeddingTable::random(spec, cfg.dimension, cfg.seed), {}, 0, 0};
  EmbeddingTable& table = result.table;
  const auto eval_set = sample_triplets(spec, cfg.eval_triplets, derive_seed(cfg.seed, {0xE7A1}), cfg.sampler);
  result.initial_eval_loss = mean_triplet_loss(table, eval_set, cfg.margin);

  auto& rows = table.rows();
  const auto n_params = static_cast<std::size_t>(rows.size());
  AdamWState state(n_params);
  EmbeddingTable::Matrix grad(rows.rows(), rows.cols());
  const AdamWHyper hp{cfg.lr, cfg.weight_decay};
  result.loss_trace.reserve(static_cast<std::size_t>(cfg.steps));

  for (int step = 0; step < cfg.steps; ++step) {
    const auto batch = sample_triplets(spec, cfg.batch, derive_seed(cfg.seed, {0xBA7C, static_cast<std::uint64_t>(step)}), cfg.sampler);
    grad.setZero();
    double loss = 0.0;
    const double scale = 1.0 / static_cast<double>(batch.size());
    for (const auto& tr : batch) {
      const Eigen::RowVectorXd to_near = rows.row(tr.anchor) - rows.row(tr.near);
      const Eigen::RowVectorXd to_far = rows.row(tr.anchor) - rows.row(tr.far);
      const double dn = to_near.norm();
      const double df = to_far.norm();
      const double l = dn - df + cfg.margin;
      if (l <= 0.0) continue;
      loss += l;
      if (dn > 0.0) {
        grad.row(tr.anchor) += scale * to_near / dn;
        grad.row(tr.near) -= scale * to_near / dn;
      }
      if (df > 0.0) {
        grad.row(tr.anchor) -= scale * to_far / df;
        grad.row(tr.far) += scale * to_far / df;
      }
    }
    result.loss_trace.push_back(loss * scale);
    adamw_step(std::span<double>(rows.data(), n_params), std::span<const double>(grad.data(), n_params), state, hp);
    table.normalize_rows();
  }
  result.final_eval_loss = mean_triplet_loss(table, eval_set, cfg.margin);
  return result;
}

namespace io {

inline void write_u64(std::ostream& os, std::uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(buf), 8);
}

inline std::uint64_t read_u64(std::istream& is) {
  unsigned char buf[8];
  if (!is.read(reinterpret_cast<char*>(buf), 8)) throw RuntimeFailure("checkpoint: truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

inline void write_f64(std::ostream& os, double d) { write_u64(os, std::bit_cast<std::uint64_t>(d)); }
inline double read_f64(std::istream& is) { return std::bit_cast<double>(read_u64(is)); }

inline void write_f64s(std::ostream& os, const double* data, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(double)));
  } else {
    for (std::size_t i = 0; i < n; ++i) write_f64(os, data[i]);
  }
}

inline void read_f64s(std::istream& is, double* data, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    if (!is.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * sizeof(double)))) {
      throw RuntimeFailure("checkpoint: truncated parameter block");
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) data[i] = read_f64(is);
  }
}

inline void expect_magic(std::istream& is, const char (&magic)[9], const std::string& path) {
  char buf[8];
  if (!is.read(buf, 8) || std::memcmp(buf, magic, 8) != 0) {
    throw RuntimeFailure(path + ": bad magic header, expected " + std::string(magic, 8));
  }
}

}  // namespace io

inline constexpr char kEmbeddingMagic[9] = "WAMFEMB1";

// Layout: "WAMFEMB1", min, max, resolution (f64), d (u64), N*d f64 row-major.
inline void save_embeddings(const EmbeddingTable& table, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw RuntimeFailure(path + ": cannot open for writing");
  os.write(kEmbeddingMagic, 8);
  io::write_f64(os, table.spec().min_value);
  io::write_f64(os, table.spec().max_value);
  io::write_f64(os, table.spec().resolution);
  io::write_u64(os, static_cast<std::uint64_t>(table.dimension()));
  io::write_f64s(os, table.rows().data(), static_cast<std::size_t>(table.rows().size()));
  if (!os) throw RuntimeFailure(path + ": write failed");
}

inline EmbeddingTable load_embeddings(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw RuntimeFailure(path + ": cannot open for reading");
  io::expect_magic(is, kEmbeddingMagic, path);
  CodebookSpec spec;
  spec.min_value = io::read_f64(is);
  spec.max_value = io::read_f64(is);
  spec.resolution = io::read_f64(is);
  spec.validate();
  const auto d = io::read_u64(is);
  if (d == 0 || d > (1u << 20)) throw RuntimeFailure(path + ": implausible embedding dimension");
  EmbeddingTable::Matrix rows(spec.size(), static_cast<Eigen::Index>(d));
  io::read_f64s(is, rows.data(), static_cast<std::size_t>(rows.size()));
  return EmbeddingTable(spec, std::move(rows));
}

}  // namespace dflow
