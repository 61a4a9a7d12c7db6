#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "aov/bytes.hpp"
#include "aov/error.hpp"
#include "aov/feature_io.hpp"
#include "aov/rng.hpp"
#include "aov/tensor.hpp"

// Trainable state of the anomaly expert and its .aovc checkpoint format.

namespace aov {

struct UnknownTensorError : DataError {
  explicit UnknownTensorError(const std::string& name)
      : DataError("checkpoint: unknown tensor '" + name + "'") {}
};

struct MissingTensorError : DataError {
  explicit MissingTensorError(const std::string& name)
      : DataError("checkpoint: missing tensor '" + name + "'") {}
};

/// Model hyperparameters. tau is the matching temperature; it stays frozen
/// unless train_tau is set. s_low/s_high are the adverb thresholds.
struct ExpertConfig {
  std::size_t g = 8;
  std::size_t d_enc = 64;
  std::size_t d = 32;
  std::size_t n_heads = 4;
  std::size_t pool_h = 2;
  std::size_t pool_w = 2;
  double tau = 0.07;
  double s_low = 0.3;
  double s_high = 0.7;
  bool lookback_bias = true;
  bool residual = true;
  bool train_tau = false;

  std::size_t tokens() const { return g * g; }
  std::size_t pool_cells_count() const { return pool_h * pool_w; }

  void validate() const {
    if (g == 0 || d_enc == 0 || d == 0 || n_heads == 0 || pool_h == 0 || pool_w == 0)
      throw UsageError("config: dimensions must be positive");
    if (d_enc % n_heads != 0) throw UsageError("config: d_enc must be divisible by n_heads");
    if (!(tau > 0.0)) throw UsageError("config: tau must be positive");
    if (!(s_low >= 0.0 && s_low < s_high && s_high <= 1.0))
      throw UsageError("config: thresholds must satisfy 0 <= s_low < s_high <= 1");
    if (pool_h * pool_w > g * g) throw UsageError("config: pool cells exceed token count");
  }

  bool operator==(const ExpertConfig&) const = default;
};

/// Two-layer ReLU MLP: y = relu(x W1 + b1) W2 + b2.
template <typename Real>
struct Mlp2 {
  TensorPtr<Real> w1, b1, w2, b2;

  TensorPtr<Real> forward(Tape<Real>& tape, const TensorPtr<Real>& x) const {
    auto h = relu(tape, linear(tape, x, w1, b1));
    return linear(tape, h, w2, b2);
  }
};

/// All trainable tensors of the expert head, keyed by checkpoint name.
/// Levels are named 1..4. The final scoring layer starts at zero so an
/// untrained model emits exactly 0.5 for every image.
template <typename Real>
struct ExpertParams {
  ExpertConfig cfg;
  std::array<TensorPtr<Real>, kNumLevels> adapter_w, adapter_b;
  std::array<TensorPtr<Real>, kNumLevels> lookback_w, lookback_b;
  TensorPtr<Real> e_plus, e_minus;
  std::array<Mlp2<Real>, kNumLevels> mlp_plus, mlp_minus;
  TensorPtr<Real> wq, wk, wv, wo;
  Mlp2<Real> score_mlp;
  TensorPtr<Real> tau;  // [1]; mirrors cfg.tau, trainable only with cfg.train_tau

  static ExpertParams init(const ExpertConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ExpertParams p;
    p.cfg = cfg;
    // Parameter streams live in their own fork namespace so that a shared
    // seed never aliases them onto data-generator streams.
    Rng root = Rng(seed).fork(0x504152414d53ull);
    std::size_t stream = 0;
    auto fanin = [&](Shape shape, std::size_t fan_in, std::string name) {
      Rng r = root.fork(stream++);
      return rand_fanin<Real>(r, std::move(shape), fan_in, true, std::move(name));
    };

    const std::size_t g2 = cfg.tokens(), de = cfg.d_enc, d = cfg.d;
    for (std::size_t i = 0; i < kNumLevels; ++i) {
      std::string lvl = std::to_string(i + 1);
      p.adapter_w[i] = fanin({de, d}, de, "adapter." + lvl + ".weight");
      p.adapter_b[i] = fanin({d}, de, "adapter." + lvl + ".bias");
      p.lookback_w[i] = fanin({g2}, g2, "lookback." + lvl + ".weight");
      p.lookback_b[i] = fanin({d}, g2, "lookback." + lvl + ".bias");
    }
    {
      Rng r = root.fork(stream++);
      p.e_plus = randn<Real>(r, {d}, 1.0 / std::sqrt(static_cast<double>(d)), true, "e_plus");
    }
    {
      Rng r = root.fork(stream++);
      p.e_minus = randn<Real>(r, {d}, 1.0 / std::sqrt(static_cast<double>(d)), true, "e_minus");
    }
    if (p.e_plus->data == p.e_minus->data)
      throw NumericError("init: e_plus and e_minus collided");
    auto init_mlp2 = [&](std::size_t in, std::size_t hidden, std::size_t out,
                         const std::string& base) {
      Mlp2<Real> m;
      m.w1 = fanin({in, hidden}, in, base + ".fc1.weight");
      m.b1 = fanin({hidden}, in, base + ".fc1.bias");
      m.w2 = fanin({hidden, out}, hidden, base + ".fc2.weight");
      m.b2 = fanin({out}, hidden, base + ".fc2.bias");
      return m;
    };
    for (std::size_t i = 0; i < kNumLevels; ++i) {
      std::string lvl = std::to_string(i + 1);
      p.mlp_plus[i] = init_mlp2(2 * d, d, d, "mlp_plus." + lvl);
      p.mlp_minus[i] = init_mlp2(2 * d, d, d, "mlp_minus." + lvl);
    }
    p.wq = fanin({de, de}, de, "qformer.wq");
    p.wk = fanin({de, de}, de, "qformer.wk");
    p.wv = fanin({de, de}, de, "qformer.wv");
    p.wo = fanin({de, de}, de, "qformer.wo");
    p.score_mlp.w1 = fanin({de, d}, de, "score_mlp.fc1.weight");
    p.score_mlp.b1 = fanin({d}, de, "score_mlp.fc1.bias");
    // Zero final layer: the untrained score is exactly sigmoid(0) = 0.5, so
    // initialization noise never leaks into rankings, and the first steps
    // learn a clean readout instead of unlearning a random one.
    p.score_mlp.w2 = zeros<Real>({d, 1}, true, "score_mlp.fc2.weight");
    p.score_mlp.b2 = zeros<Real>({1}, true, "score_mlp.fc2.bias");
    p.tau = tensor<Real>({1}, {static_cast<Real>(cfg.tau)}, cfg.train_tau, "tau");
    return p;
  }

  /// Checkpoint name set, in canonical order. The set depends on config:
  /// lookback biases exist only when enabled. tau is persisted via the
  /// config chunk, not as a named tensor.
  std::vector<std::pair<std::string, TensorPtr<Real>>> named() const {
    std::vector<std::pair<std::string, TensorPtr<Real>>> out;
    for (std::size_t i = 0; i < kNumLevels; ++i) {
      std::string lvl = std::to_string(i + 1);
      out.emplace_back("adapter." + lvl + ".weight", adapter_w[i]);
      out.emplace_back("adapter." + lvl + ".bias", adapter_b[i]);
      out.emplace_back("lookback." + lvl + ".weight", lookback_w[i]);
      if (cfg.lookback_bias) out.emplace_back("lookback." + lvl + ".bias", lookback_b[i]);
    }
    out.emplace_back("e_plus", e_plus);
    out.emplace_back("e_minus", e_minus);
    auto add_mlp = [&](const Mlp2<Real>& m, const std::string& base) {
      out.emplace_back(base + ".fc1.weight", m.w1);
      out.emplace_back(base + ".fc1.bias", m.b1);
      out.emplace_back(base + ".fc2.weight", m.w2);
      out.emplace_back(base + ".fc2.bias", m.b2);
    };
    for (std::size_t i = 0; i < kNumLevels; ++i)
      add_mlp(mlp_plus[i], "mlp_plus." + std::to_string(i + 1));
    for (std::size_t i = 0; i < kNumLevels; ++i)
      add_mlp(mlp_minus[i], "mlp_minus." + std::to_string(i + 1));
    out.emplace_back("qformer.wq", wq);
    out.emplace_back("qformer.wk", wk);
    out.emplace_back("qformer.wv", wv);
    out.emplace_back("qformer.wo", wo);
    add_mlp(score_mlp, "score_mlp");
    return out;
  }

  /// Tensors the optimizer updates: every named tensor, plus tau when the
  /// unfreeze flag is set.
  std::vector<TensorPtr<Real>> trainable() const {
    std::vector<TensorPtr<Real>> out;
    for (auto& [name, t] : named()) out.push_back(t);
    if (cfg.train_tau) out.push_back(tau);
    return out;
  }

  std::vector<std::pair<std::string, TensorPtr<Real>>> trainable_named() const {
    auto out = named();
    if (cfg.train_tau) out.emplace_back("tau", tau);
    return out;
  }

  void zero_grad() const {
    for (auto& t : trainable()) t->zero_grad();
  }
};

/// First/second-moment accumulators keyed by tensor name, persisted alongside
/// the parameters so a resumed run reproduces the same updates.
template <typename Real>
struct AdamWState {
  std::uint64_t step = 0;
  std::map<std::string, std::pair<std::vector<Real>, std::vector<Real>>> moments;  // name -> (m, v)
};

// .aovc layout: magic "AOVC", u32 version=1, u32 dtype (4=f32, 8=f64),
// u32 flags (bit0: optimizer state present), config chunk, u32 tensor count,
// then per tensor: name, u32 rank, u32 extents, values in the file dtype.
// Optimizer state repeats the tensor encoding under names "opt.m.*"/"opt.v.*"
// after a u64 step counter.
inline constexpr char kCheckpointMagic[4] = {'A', 'O', 'V', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void write_config(std::ostream& os, const ExpertConfig& c) {
  bytes::write_u32(os, static_cast<std::uint32_t>(c.g));
  bytes::write_u32(os, static_cast<std::uint32_t>(c.d_enc));
  bytes::write_u32(os, static_cast<std::uint32_t>(c.d));
  bytes::write_u32(os, static_cast<std::uint32_t>(c.n_heads));
  bytes::write_u32(os, static_cast<std::uint32_t>(c.pool_h));
  bytes::write_u32(os, static_cast<std::uint32_t>(c.pool_w));
  bytes::write_u32(os, c.lookback_bias ? 1 : 0);
  bytes::write_u32(os, c.residual ? 1 : 0);
  bytes::write_u32(os, c.train_tau ? 1 : 0);
  bytes::write_f64(os, c.tau);
  bytes::write_f64(os, c.s_low);
  bytes::write_f64(os, c.s_high);
}

inline ExpertConfig read_config(std::istream& is) {
  ExpertConfig c;
  c.g = bytes::read_u32(is, "checkpoint config");
  c.d_enc = bytes::read_u32(is, "checkpoint config");
  c.d = bytes::read_u32(is, "checkpoint config");
  c.n_heads = bytes::read_u32(is, "checkpoint config");
  c.pool_h = bytes::read_u32(is, "checkpoint config");
  c.pool_w = bytes::read_u32(is, "checkpoint config");
  c.lookback_bias = bytes::read_u32(is, "checkpoint config") != 0;
  c.residual = bytes::read_u32(is, "checkpoint config") != 0;
  c.train_tau = bytes::read_u32(is, "checkpoint config") != 0;
  c.tau = bytes::read_f64(is, "checkpoint config");
  c.s_low = bytes::read_f64(is, "checkpoint config");
  c.s_high = bytes::read_f64(is, "checkpoint config");
  c.validate();
  return c;
}

template <typename Real>
void write_values(std::ostream& os, const std::vector<Real>& v) {
  if constexpr (sizeof(Real) == 4) {
    for (Real x : v) bytes::write_f32(os, static_cast<float>(x));
  } else {
    for (Real x : v) bytes::write_f64(os, static_cast<double>(x));
  }
}

template <typename Real>
void write_named_tensor(std::ostream& os, const std::string& name, const Shape& shape,
                        const std::vector<Real>& values) {
  bytes::write_str(os, name);
  bytes::write_u32(os, static_cast<std::uint32_t>(shape.size()));
  for (std::size_t e : shape) bytes::write_u32(os, static_cast<std::uint32_t>(e));
  write_values(os, values);
}

struct RawTensor {
  Shape shape;
  std::vector<double> values;
};

inline RawTensor read_raw_tensor(std::istream& is, std::uint32_t dtype, std::string* name_out) {
  *name_out = bytes::read_str(is, "checkpoint tensor");
  std::uint32_t rank = bytes::read_u32(is, "checkpoint tensor");
  if (rank > 4) throw DimOverflowError("checkpoint tensor rank");
  RawTensor t;
  std::size_t n = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    std::uint32_t e = bytes::read_u32(is, "checkpoint tensor");
    if (e == 0 || e > (1u << 24)) throw DimOverflowError("checkpoint tensor extent");
    t.shape.push_back(e);
    n *= e;
  }
  if (n > (1ull << 28)) throw DimOverflowError("checkpoint tensor size");
  t.values.resize(n);
  for (auto& v : t.values)
    v = dtype == 4 ? static_cast<double>(bytes::read_f32(is, "checkpoint values"))
                   : bytes::read_f64(is, "checkpoint values");
  return t;
}

}  // namespace detail

template <typename Real>
void save_checkpoint(const ExpertParams<Real>& params, const std::string& path,
                     const AdamWState<Real>* opt = nullptr) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("save_checkpoint: cannot open '" + path + "' for writing");
  os.write(kCheckpointMagic, 4);
  bytes::write_u32(os, kCheckpointVersion);
  bytes::write_u32(os, sizeof(Real) == 4 ? 4 : 8);
  bytes::write_u32(os, opt ? 1 : 0);
  // tau may have been trained away from its configured value; the config
  // chunk is the single persisted copy.
  ExpertConfig snap = params.cfg;
  snap.tau = static_cast<double>(params.tau->data[0]);
  detail::write_config(os, snap);
  auto named = params.named();
  bytes::write_u32(os, static_cast<std::uint32_t>(named.size()));
  for (auto& [name, t] : named) detail::write_named_tensor(os, name, t->shape, t->data);
  if (opt) {
    bytes::write_u64(os, opt->step);
    bytes::write_u32(os, static_cast<std::uint32_t>(opt->moments.size()));
    for (auto& [name, mv] : opt->moments) {
      detail::write_named_tensor(os, "opt.m." + name, {mv.first.size()}, mv.first);
      detail::write_named_tensor(os, "opt.v." + name, {mv.second.size()}, mv.second);
    }
  }
  if (!os) throw DataError("save_checkpoint: write failed for '" + path + "'");
}

template <typename Real>
struct Checkpoint {
  ExpertParams<Real> params;
  std::optional<AdamWState<Real>> opt;
};

template <typename Real>
Checkpoint<Real> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("load_checkpoint: cannot open '" + path + "'");
  char magic[4];
  if (!is.read(magic, 4)) throw TruncatedError("checkpoint header");
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw BadMagicError("not a checkpoint file");
  std::uint32_t version = bytes::read_u32(is, "checkpoint header");
  if (version != kCheckpointVersion)
    throw DataError("load_checkpoint: unsupported version " + std::to_string(version));
  std::uint32_t dtype = bytes::read_u32(is, "checkpoint header");
  if (dtype != 4 && dtype != 8) throw DataError("load_checkpoint: unknown dtype tag");
  std::uint32_t flags = bytes::read_u32(is, "checkpoint header");
  ExpertConfig cfg = detail::read_config(is);

  std::uint32_t count = bytes::read_u32(is, "checkpoint header");
  std::map<std::string, detail::RawTensor> raw;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name;
    detail::RawTensor t = detail::read_raw_tensor(is, dtype, &name);
    if (!raw.emplace(name, std::move(t)).second)
      throw DataError("load_checkpoint: duplicate tensor '" + name + "'");
  }

  Checkpoint<Real> out{ExpertParams<Real>::init(cfg, 0), std::nullopt};
  auto named = out.params.named();
  for (auto& [name, t] : named) {
    auto it = raw.find(name);
    if (it == raw.end()) throw MissingTensorError(name);
    if (it->second.shape != t->shape)
      throw DataError("load_checkpoint: shape mismatch for '" + name + "'");
    for (std::size_t i = 0; i < t->data.size(); ++i)
      t->data[i] = static_cast<Real>(it->second.values[i]);
    raw.erase(it);
  }
  if (!raw.empty()) throw UnknownTensorError(raw.begin()->first);
  out.params.tau->data[0] = static_cast<Real>(cfg.tau);

  if (flags & 1u) {
    AdamWState<Real> opt;
    opt.step = bytes::read_u64(is, "checkpoint opt state");
    std::uint32_t n_opt = bytes::read_u32(is, "checkpoint opt state");
    std::map<std::string, std::vector<Real>> m_half, v_half;
    for (std::uint32_t i = 0; i < 2 * n_opt; ++i) {
      std::string name;
      detail::RawTensor t = detail::read_raw_tensor(is, dtype, &name);
      std::vector<Real> vals(t.values.size());
      for (std::size_t k = 0; k < vals.size(); ++k) vals[k] = static_cast<Real>(t.values[k]);
      if (name.rfind("opt.m.", 0) == 0)
        m_half[name.substr(6)] = std::move(vals);
      else if (name.rfind("opt.v.", 0) == 0)
        v_half[name.substr(6)] = std::move(vals);
      else
        throw UnknownTensorError(name);
    }
    for (auto& [name, m] : m_half) {
      auto it = v_half.find(name);
      if (it == v_half.end()) throw MissingTensorError("opt.v." + name);
      opt.moments[name] = {std::move(m), std::move(it->second)};
    }
    out.opt = std::move(opt);
  }
  return out;
}

}  // namespace aov
