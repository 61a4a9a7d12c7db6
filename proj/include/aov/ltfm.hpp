#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "aov/error.hpp"
#include "aov/feature_io.hpp"
#include "aov/params.hpp"
#include "aov/tensor.hpp"

// Look-twice feature matching: the whole-image crop conditions a pair of
// positive/negative description vectors per level, and every patch token is
// scored against them to produce per-token significance weights.

namespace aov {

/// Lift a crop matrix from the bundle's f32 storage into working precision.
template <typename Real>
TensorPtr<Real> crop_tensor(const std::vector<float>& m, std::size_t tokens, std::size_t d_enc) {
  return from_floats<Real>(m.data(), m.size(), {tokens, d_enc});
}

/// Per-level channel compression: [g^2 x d_enc] -> [g^2 x d]. level is 1..4.
template <typename Real>
TensorPtr<Real> adapt(Tape<Real>& tape, const TensorPtr<Real>& v_level, std::size_t level,
                      const ExpertParams<Real>& params) {
  if (level < 1 || level > kNumLevels) throw UsageError("adapt: level must be 1..4");
  return linear(tape, v_level, params.adapter_w[level - 1], params.adapter_b[level - 1]);
}

/// Linear map along the token axis of crop 0's adapted level features:
/// out[d] = sum_t w[t] v[t,d] (+ b[d] unless the bias is disabled).
template <typename Real>
TensorPtr<Real> lookback_fuse(Tape<Real>& tape, const TensorPtr<Real>& v0_level, std::size_t level,
                              const ExpertParams<Real>& params) {
  if (level < 1 || level > kNumLevels) throw UsageError("lookback_fuse: level must be 1..4");
  const auto& w = params.lookback_w[level - 1];
  if (v0_level->shape.size() != 2 || v0_level->shape[0] != w->shape[0])
    throw ShapeError("lookback_fuse: token count does not match lookback weights");
  auto w_row = reshape(tape, w, {1, w->shape[0]});
  auto fused = matmul(tape, w_row, v0_level);  // [1 x d]
  if (params.cfg.lookback_bias)
    fused = add_rowvec(tape, fused, params.lookback_b[level - 1]);
  return reshape(tape, fused, {v0_level->shape[1]});
}

/// Class-aware descriptions: d+ = MLP+(concat(e+, fused)),
/// d- = MLP-(concat(e-, fused)). Concat order is (embedding, fused).
template <typename Real>
std::pair<TensorPtr<Real>, TensorPtr<Real>> describe(Tape<Real>& tape,
                                                     const TensorPtr<Real>& fused,
                                                     std::size_t level,
                                                     const ExpertParams<Real>& params) {
  if (level < 1 || level > kNumLevels) throw UsageError("describe: level must be 1..4");
  auto run = [&](const TensorPtr<Real>& emb, const Mlp2<Real>& mlp) {
    auto x = concat(tape, emb, fused);
    auto row = reshape(tape, x, {1, x->shape[0]});
    auto y = mlp.forward(tape, row);
    return reshape(tape, y, {y->shape[1]});
  };
  return {run(params.e_plus, params.mlp_plus[level - 1]),
          run(params.e_minus, params.mlp_minus[level - 1])};
}

/// Per-token weight in (0,1): softmax over the pair of cosine matches
/// (token vs d+, token vs d-) at temperature tau.
template <typename Real>
TensorPtr<Real> significance_level(Tape<Real>& tape, const TensorPtr<Real>& v_adapted,
                                   const TensorPtr<Real>& d_plus, const TensorPtr<Real>& d_minus,
                                   Real tau) {
  auto cos_plus = cosine_rows(tape, v_adapted, d_plus);
  auto cos_minus = cosine_rows(tape, v_adapted, d_minus);
  return softmax_pair(tape, cos_plus, cos_minus, tau);
}

/// Trainable-temperature variant: sigmoid((cos+ - cos-) / tau) with tau a
/// graph scalar, algebraically identical to the pair softmax.
template <typename Real>
TensorPtr<Real> significance_level_t(Tape<Real>& tape, const TensorPtr<Real>& v_adapted,
                                     const TensorPtr<Real>& d_plus, const TensorPtr<Real>& d_minus,
                                     const TensorPtr<Real>& tau) {
  if (!(tau->data[0] > Real(0))) throw NumericError("significance: tau must be positive");
  auto diff = sub(tape, cosine_rows(tape, v_adapted, d_plus),
                  cosine_rows(tape, v_adapted, d_minus));
  auto scaled = mul_scalar(tape, diff, recip(tape, tau));
  return sigmoid(tape, scaled);
}

/// Per-level and level-averaged token weights for every crop of one image.
template <typename Real>
struct SignificanceMap {
  std::array<std::vector<TensorPtr<Real>>, kNumLevels> per_level;  // [level][crop] -> [g^2]
  std::vector<TensorPtr<Real>> averaged;                           // [crop] -> [g^2]
  Real tau = Real(0);
};

/// Full matching pass over one bundle. The look-back descriptions are
/// computed once from crop 0 and reused for every crop; each level
/// contributes one map per crop and the four levels are averaged entrywise.
template <typename Real>
SignificanceMap<Real> significance_image(Tape<Real>& tape, const FeatureBundle& bundle,
                                         const ExpertParams<Real>& params) {
  const auto& cfg = params.cfg;
  if (bundle.d_enc != cfg.d_enc) throw ShapeError("significance_image: d_enc mismatch");
  if (bundle.layout.g != cfg.g) throw ShapeError("significance_image: grid mismatch");
  const std::size_t tokens = cfg.tokens();
  const std::size_t n_crops = bundle.layout.n_crops;
  const Real tau = params.tau->data[0];

  SignificanceMap<Real> sig;
  sig.tau = tau;
  for (auto& level : sig.per_level) level.resize(n_crops);
  sig.averaged.resize(n_crops);

  // Adapted level features, crop 0 first so descriptions exist before the
  // per-crop sweep reuses them.
  std::array<std::pair<TensorPtr<Real>, TensorPtr<Real>>, kNumLevels> desc;
  std::array<TensorPtr<Real>, kNumLevels> adapted0;
  for (std::size_t i = 0; i < kNumLevels; ++i) {
    auto v0 = crop_tensor<Real>(bundle.v_levels[i][0], tokens, cfg.d_enc);
    adapted0[i] = adapt(tape, v0, i + 1, params);
    auto fused = lookback_fuse(tape, adapted0[i], i + 1, params);
    desc[i] = describe(tape, fused, i + 1, params);
  }

  for (std::size_t j = 0; j < n_crops; ++j) {
    TensorPtr<Real> sum;
    for (std::size_t i = 0; i < kNumLevels; ++i) {
      TensorPtr<Real> a =
          j == 0 ? adapted0[i]
                 : adapt(tape, crop_tensor<Real>(bundle.v_levels[i][j], tokens, cfg.d_enc),
                         i + 1, params);
      TensorPtr<Real> m =
          cfg.train_tau
              ? significance_level_t(tape, a, desc[i].first, desc[i].second, params.tau)
              : significance_level(tape, a, desc[i].first, desc[i].second, tau);
      sig.per_level[i][j] = m;
      sum = i == 0 ? m : add(tape, sum, m);
    }
    sig.averaged[j] = scale(tape, sum, Real(1) / Real(kNumLevels));
  }
  return sig;
}

}  // namespace aov
