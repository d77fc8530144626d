#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <new>
#include <span>
#include <string>
#include <vector>

#include "dflow/codebook.hpp"
#include "dflow/context.hpp"
#include "dflow/errors.hpp"
#include "dflow/random.hpp"

namespace dflow {

struct NetDims {
  int positions = 16;   // D
  int alphabet = 161;   // K, also the codebook size of the token embeddings
  int d_in = 32;
  int time_features = 16;
  int hidden = 256;

  int input_width() const { return positions * d_in + time_features + kNumCommands + kNumEgoFields * d_in; }

  void validate() const {
    if (positions < 1 || alphabet < 2 || d_in < 1 || hidden < 1 || time_features < 2 || time_features % 2 != 0) {
      throw ValidationError("net dims: invalid architecture dimensions");
    }
  }

  bool operator==(const NetDims&) const = default;
};

enum class Block { token_embed, pos_embed, time_w, time_b, w1, b1, w2, b2, head_w, head_b };
inline constexpr int kNumBlocks = 10;

inline const char* block_name(Block b) {
  static constexpr const char* names[kNumBlocks] = {"token_embed", "pos_embed", "time_w", "time_b", "w1",
                                                    "b1",          "w2",        "b2",     "head_w", "head_b"};
  return names[static_cast<int>(b)];
}

// 64-byte aligned storage for parameter buffers.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

// theta as one flat buffer with named blocks. Gradients use the same type.
class PolicyParams {
 public:
  using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using RowMap = Eigen::Map<RowMatrix>;
  using ConstRowMap = Eigen::Map<const RowMatrix>;
  using MatMap = Eigen::Map<Eigen::MatrixXd>;
  using ConstMatMap = Eigen::Map<const Eigen::MatrixXd>;
  using VecMap = Eigen::Map<Eigen::VectorXd>;
  using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

  PolicyParams() = default;

  explicit PolicyParams(const NetDims& dims) : dims_(dims) {
    dims_.validate();
    const std::array<std::size_t, kNumBlocks> sizes = {
        sz(dims.alphabet) * sz(dims.d_in),
        sz(dims.positions) * sz(dims.d_in),
        sz(dims.time_features) * sz(dims.time_features),
        sz(dims.time_features),
        sz(dims.hidden) * sz(dims.input_width()),
        sz(dims.hidden),
        sz(dims.hidden) * sz(dims.hidden),
        sz(dims.hidden),
        sz(dims.positions) * sz(dims.alphabet) * sz(dims.hidden),
        sz(dims.positions) * sz(dims.alphabet),
    };
    // Blocks start on 64-byte boundaries so Eigen kernels see the same
    // alignment on every run; otherwise summation order, and the low bits of
    // the result, would depend on where the allocator placed the buffer.
    std::size_t off = 0;
    for (int b = 0; b < kNumBlocks; ++b) {
      offsets_[static_cast<std::size_t>(b)] = off;
      sizes_[static_cast<std::size_t>(b)] = sizes[static_cast<std::size_t>(b)];
      off += (sizes[static_cast<std::size_t>(b)] + kPad - 1) / kPad * kPad;
    }
    values_.assign(off, 0.0);
  }

  static PolicyParams zeros_like(const PolicyParams& p) { return PolicyParams(p.dims()); }

  // Scaled Gaussian weights, zero biases; token embeddings copied from `table`
  // when given (the metric-aligned stage-1 output), random unit rows otherwise.
  static PolicyParams initialize(const NetDims& dims, std::uint64_t seed, const EmbeddingTable* table = nullptr) {
    PolicyParams p(dims);
    SplitMix64 rng(derive_seed(seed, {0x1A17}));
    auto fill = [&](Block b, double stddev) {
      for (double& v : p.block(b)) v = stddev * standard_normal(rng);
    };
    if (table != nullptr) {
      if (table->size() != dims.alphabet || table->dimension() != dims.d_in) {
        throw ValidationError("policy init: embedding table shape does not match (alphabet, d_in)");
      }
      std::copy(table->rows().data(), table->rows().data() + table->rows().size(), p.block(Block::token_embed).begin());
    } else {
      auto rand_table = EmbeddingTable::random(CodebookSpec{0.0, static_cast<double>(dims.alphabet - 1), 1.0},
                                               dims.d_in, derive_seed(seed, {0x7AB1}));
      std::copy(rand_table.rows().data(), rand_table.rows().data() + rand_table.rows().size(),
                p.block(Block::token_embed).begin());
    }
    fill(Block::pos_embed, 0.1);
    fill(Block::time_w, 1.0 / std::sqrt(static_cast<double>(dims.time_features)));
    fill(Block::w1, 1.0 / std::sqrt(static_cast<double>(dims.input_width())));
    fill(Block::w2, 1.0 / std::sqrt(static_cast<double>(dims.hidden)));
    fill(Block::head_w, 1.0 / std::sqrt(static_cast<double>(dims.hidden)));
    return p;
  }

  const NetDims& dims() const { return dims_; }
  std::size_t size() const { return values_.size(); }
  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }

  std::span<double> block(Block b) {
    const auto i = static_cast<std::size_t>(b);
    return {values_.data() + offsets_[i], sizes_[i]};
  }
  std::span<const double> block(Block b) const {
    const auto i = static_cast<std::size_t>(b);
    return {values_.data() + offsets_[i], sizes_[i]};
  }
  std::size_t block_offset(Block b) const { return offsets_[static_cast<std::size_t>(b)]; }

  RowMap token_embed() { return {block(Block::token_embed).data(), dims_.alphabet, dims_.d_in}; }
  ConstRowMap token_embed() const { return {block(Block::token_embed).data(), dims_.alphabet, dims_.d_in}; }
  RowMap pos_embed() { return {block(Block::pos_embed).data(), dims_.positions, dims_.d_in}; }
  ConstRowMap pos_embed() const { return {block(Block::pos_embed).data(), dims_.positions, dims_.d_in}; }
  MatMap time_w() { return {block(Block::time_w).data(), dims_.time_features, dims_.time_features}; }
  ConstMatMap time_w() const { return {block(Block::time_w).data(), dims_.time_features, dims_.time_features}; }
  VecMap time_b() { return {block(Block::time_b).data(), dims_.time_features}; }
  ConstVecMap time_b() const { return {block(Block::time_b).data(), dims_.time_features}; }
  MatMap w1() { return {block(Block::w1).data(), dims_.hidden, dims_.input_width()}; }
  ConstMatMap w1() const { return {block(Block::w1).data(), dims_.hidden, dims_.input_width()}; }
  VecMap b1() { return {block(Block::b1).data(), dims_.hidden}; }
  ConstVecMap b1() const { return {block(Block::b1).data(), dims_.hidden}; }
  MatMap w2() { return {block(Block::w2).data(), dims_.hidden, dims_.hidden}; }
  ConstMatMap w2() const { return {block(Block::w2).data(), dims_.hidden, dims_.hidden}; }
  VecMap b2() { return {block(Block::b2).data(), dims_.hidden}; }
  ConstVecMap b2() const { return {block(Block::b2).data(), dims_.hidden}; }
  MatMap head_w() { return {block(Block::head_w).data(), dims_.positions * dims_.alphabet, dims_.hidden}; }
  ConstMatMap head_w() const { return {block(Block::head_w).data(), dims_.positions * dims_.alphabet, dims_.hidden}; }
  VecMap head_b() { return {block(Block::head_b).data(), dims_.positions * dims_.alphabet}; }
  ConstVecMap head_b() const { return {block(Block::head_b).data(), dims_.positions * dims_.alphabet}; }

  bool all_finite() const {
    for (double v : values_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  double norm() const {
    double s = 0.0;
    for (double v : values_) s += v * v;
    return std::sqrt(s);
  }

  std::uint64_t checkpoint_id = 0;

  bool operator==(const PolicyParams& o) const { return dims_ == o.dims_ && values_ == o.values_; }

 private:
  static std::size_t sz(int v) { return static_cast<std::size_t>(v); }

  NetDims dims_{};
  static constexpr std::size_t kPad = 8;
  std::array<std::size_t, kNumBlocks> offsets_{};
  std::array<std::size_t, kNumBlocks> sizes_{};
  std::vector<double, AlignedAllocator<double>> values_;
};

// One denoiser query: corrupted sequence, time and context.
struct PolicyInput {
  TrajectoryTokens tokens;
  double t = 0.0;
  ContextEncoding ctx;
};

// sin/cos pairs at frequencies 2^j, j = 0 .. features/2 - 1.
inline void time_features(double t, std::span<double> out) {
  const std::size_t pairs = out.size() / 2;
  for (std::size_t j = 0; j < pairs; ++j) {
    const double w = std::ldexp(1.0, static_cast<int>(j));
    out[2 * j] = std::sin(w * t);
    out[2 * j + 1] = std::cos(w * t);
  }
}

struct ForwardCache {
  Eigen::MatrixXd features;  // time features, time_features x B
  Eigen::MatrixXd u;         // concatenated input, input_width x B
  Eigen::MatrixXd h1;
  Eigen::MatrixXd h2;
  Eigen::MatrixXd logits;    // (D*K) x B; rows [i*K, (i+1)*K) belong to position i
  std::vector<PolicyInput> inputs;

  Eigen::Index batch() const { return logits.cols(); }
};

inline void check_input(const PolicyInput& in, const NetDims& dims) {
  if (static_cast<int>(in.tokens.size()) != dims.positions) {
    throw ValidationError("policy forward: expected " + std::to_string(dims.positions) + " tokens, got " +
                          std::to_string(in.tokens.size()));
  }
  for (TokenId tok : in.tokens) {
    if (tok < 0 || tok >= dims.alphabet) throw ValidationError("policy forward: token outside alphabet");
  }
  for (TokenId tok : in.ctx.ego) {
    if (tok < 0 || tok >= dims.alphabet) throw ValidationError("policy forward: ego token outside alphabet");
  }
  if (!(in.t >= 0.0 && in.t <= 1.0)) throw ValidationError("policy forward: t outside [0, 1]");
}

/// Batched forward pass. Each position's logits depend on every input token
/// through the shared hidden layers.
inline ForwardCache forward(const PolicyParams& theta, std::vector<PolicyInput> inputs) {
  const NetDims& d = theta.dims();
  const auto batch = static_cast<Eigen::Index>(inputs.size());
  ForwardCache c;
  c.features.resize(d.time_features, batch);
  c.u.resize(d.input_width(), batch);
  const auto tok = theta.token_embed();
  const auto pos = theta.pos_embed();
  for (Eigen::Index b = 0; b < batch; ++b) {
    const auto& in = inputs[static_cast<std::size_t>(b)];
    check_input(in, d);
    auto col = c.u.col(b);
    for (int i = 0; i < d.positions; ++i) {
      col.segment(i * d.d_in, d.d_in) =
          (tok.row(in.tokens[static_cast<std::size_t>(i)]) + pos.row(i)).transpose();
    }
    time_features(in.t, std::span<double>(c.features.col(b).data(), static_cast<std::size_t>(d.time_features)));
    const int t_off = d.positions * d.d_in;
    col.segment(t_off, d.time_features) = theta.time_w() * c.features.col(b) + theta.time_b();
    const int c_off = t_off + d.time_features;
    col.segment(c_off, kNumCommands).setZero();
    col(c_off + static_cast<int>(in.ctx.command)) = 1.0;
    const int e_off = c_off + kNumCommands;
    for (int j = 0; j < kNumEgoFields; ++j) {
      col.segment(e_off + j * d.d_in, d.d_in) = tok.row(in.ctx.ego[static_cast<std::size_t>(j)]).transpose();
    }
  }
  c.h1.noalias() = theta.w1() * c.u;
  c.h1.colwise() += theta.b1();
  c.h1 = c.h1.array().tanh().matrix();
  c.h2.noalias() = theta.w2() * c.h1;
  c.h2.colwise() += theta.b2();
  c.h2 = c.h2.array().tanh().matrix();
  c.logits.noalias() = theta.head_w() * c.h2;
  c.logits.colwise() += theta.head_b();
  c.inputs = std::move(inputs);
  return c;
}

/// Logits for one query as a D x K matrix.
inline Eigen::MatrixXd forward(const TrajectoryTokens& x_t, double t, const ContextEncoding& ctx,
                               const PolicyParams& theta) {
  const auto c = forward(theta, {PolicyInput{x_t, t, ctx}});
  const NetDims& d = theta.dims();
  Eigen::MatrixXd out(d.positions, d.alphabet);
  for (int i = 0; i < d.positions; ++i) out.row(i) = c.logits.col(0).segment(i * d.alphabet, d.alphabet).transpose();
  return out;
}

// Numerically stable log-softmax of a logit segment.
template <class Vec>
Eigen::VectorXd log_softmax(const Vec& logits) {
  const double m = logits.maxCoeff();
  const double lse = m + std::log((logits.array() - m).exp().sum());
  return (logits.array() - lse).matrix();
}

template <class Vec>
Eigen::VectorXd softmax(const Vec& logits) {
  return log_softmax(logits).array().exp().matrix();
}

struct LossReport {
  double ce = 0.0;  // nats
  double grad_norm = 0.0;
  long step = 0;
};

struct CeResult {
  double loss = 0.0;             // summed over positions, averaged over batch
  Eigen::MatrixXd dlogits;       // d loss / d logits, same shape as logits
};

/// -sum_i log softmax(logits_i)[x1_i], averaged over the batch, with its
/// logit gradient softmax - onehot (scaled by 1/B).
inline CeResult ce_loss(const Eigen::MatrixXd& logits, std::span<const TrajectoryTokens> targets, int positions,
                        int alphabet) {
  if (logits.rows() != static_cast<Eigen::Index>(positions) * alphabet ||
      logits.cols() != static_cast<Eigen::Index>(targets.size())) {
    throw ValidationError("ce_loss: logits shape does not match targets");
  }
  CeResult r;
  r.dlogits.resize(logits.rows(), logits.cols());
  const double inv_b = 1.0 / static_cast<double>(targets.size());
  for (Eigen::Index b = 0; b < logits.cols(); ++b) {
    const auto& x1 = targets[static_cast<std::size_t>(b)];
    if (static_cast<int>(x1.size()) != positions) throw ValidationError("ce_loss: target length != D");
    for (int i = 0; i < positions; ++i) {
      const auto seg = logits.col(b).segment(i * alphabet, alphabet);
      const Eigen::VectorXd lp = log_softmax(seg);
      const TokenId y = x1[static_cast<std::size_t>(i)];
      r.loss -= lp(y) * inv_b;
      auto g = r.dlogits.col(b).segment(i * alphabet, alphabet);
      g = lp.array().exp().matrix() * inv_b;
      g(y) -= inv_b;
    }
  }
  return r;
}

/// Exact gradient of a scalar objective with respect to theta, given
/// d objective / d logits for the cached batch.
inline PolicyParams backward(const PolicyParams& theta, const ForwardCache& c, const Eigen::MatrixXd& dlogits) {
  const NetDims& d = theta.dims();
  if (dlogits.rows() != c.logits.rows() || dlogits.cols() != c.logits.cols()) {
    throw ValidationError("backward: dlogits shape mismatch");
  }
  PolicyParams g = PolicyParams::zeros_like(theta);
  g.head_w().noalias() = dlogits * c.h2.transpose();
  g.head_b() = dlogits.rowwise().sum();
  Eigen::MatrixXd da2 = theta.head_w().transpose() * dlogits;
  da2.array() *= 1.0 - c.h2.array().square();
  g.w2().noalias() = da2 * c.h1.transpose();
  g.b2() = da2.rowwise().sum();
  Eigen::MatrixXd da1 = theta.w2().transpose() * da2;
  da1.array() *= 1.0 - c.h1.array().square();
  g.w1().noalias() = da1 * c.u.transpose();
  g.b1() = da1.rowwise().sum();
  const Eigen::MatrixXd du = theta.w1().transpose() * da1;

  auto gtok = g.token_embed();
  auto gpos = g.pos_embed();
  const int t_off = d.positions * d.d_in;
  const int e_off = t_off + d.time_features + kNumCommands;
  for (Eigen::Index b = 0; b < c.batch(); ++b) {
    const auto& in = c.inputs[static_cast<std::size_t>(b)];
    const auto col = du.col(b);
    for (int i = 0; i < d.positions; ++i) {
      const auto seg = col.segment(i * d.d_in, d.d_in).transpose();
      gtok.row(in.tokens[static_cast<std::size_t>(i)]) += seg;
      gpos.row(i) += seg;
    }
    const auto dt = col.segment(t_off, d.time_features);
    g.time_w().noalias() += dt * c.features.col(b).transpose();
    g.time_b() += dt;
    for (int j = 0; j < kNumEgoFields; ++j) {
      gtok.row(in.ctx.ego[static_cast<std::size_t>(j)]) += col.segment(e_off + j * d.d_in, d.d_in).transpose();
    }
  }
  return g;
}

// Optimizer mask: false for frozen entries (token embeddings when frozen).
inline std::vector<bool> trainable_mask(const PolicyParams& theta, bool freeze_embeddings) {
  std::vector<bool> mask(theta.size(), true);
  if (freeze_embeddings) {
    const auto off = theta.block_offset(Block::token_embed);
    const auto n = theta.block(Block::token_embed).size();
    std::fill(mask.begin() + static_cast<std::ptrdiff_t>(off), mask.begin() + static_cast<std::ptrdiff_t>(off + n),
              false);
  }
  return mask;
}

inline constexpr char kPolicyMagic[9] = "WAMFNET1";

// Layout: "WAMFNET1"; u64 positions, alphabet, d_in, time_features, hidden;
// u64 checkpoint id; then every parameter block in declaration order as
// little-endian f64.
inline void save_policy(const PolicyParams& theta, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw RuntimeFailure(path + ": cannot open for writing");
  os.write(kPolicyMagic, 8);
  const NetDims& d = theta.dims();
  for (int v : {d.positions, d.alphabet, d.d_in, d.time_features, d.hidden}) io::write_u64(os, static_cast<std::uint64_t>(v));
  io::write_u64(os, theta.checkpoint_id);
  io::write_f64s(os, theta.values().data(), theta.size());
  if (!os) throw RuntimeFailure(path + ": write failed");
}

inline PolicyParams load_policy(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw RuntimeFailure(path + ": cannot open for reading");
  io::expect_magic(is, kPolicyMagic, path);
  NetDims d;
  for (int* field : {&d.positions, &d.alphabet, &d.d_in, &d.time_features, &d.hidden}) {
    const auto v = io::read_u64(is);
    if (v == 0 || v > (1u << 20)) throw RuntimeFailure(path + ": implausible architecture dimension");
    *field = static_cast<int>(v);
  }
  PolicyParams p(d);
  p.checkpoint_id = io::read_u64(is);
  io::read_f64s(is, p.values().data(), p.size());
  return p;
}

}  // namespace dflow
