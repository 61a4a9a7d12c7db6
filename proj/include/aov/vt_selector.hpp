#pragma once

#include <cstddef>
#include <vector>

#include "aov/error.hpp"
#include "aov/feature_io.hpp"
#include "aov/ltfm.hpp"
#include "aov/params.hpp"
#include "aov/tensor.hpp"

// Suspicious-token selection: weight a crop's final tokens by significance,
// pool them into a few query tokens, and let one cross-attention block pull
// in correlated tokens from the full crop.

namespace aov {

/// Ceiling partition of a g x g grid into pool_h x pool_w cells: leading
/// cells take the extra rows/columns when g does not divide evenly
/// (27 into 2 -> 14 + 13). Returns token-index lists per cell, row-major.
inline std::vector<std::vector<std::size_t>> pool_cells(std::size_t g, std::size_t pool_h,
                                                        std::size_t pool_w) {
  if (pool_h == 0 || pool_w == 0 || pool_h > g || pool_w > g)
    throw UsageError("pool_cells: cell grid must fit the token grid");
  auto splits = [](std::size_t n, std::size_t parts) {
    std::vector<std::size_t> bounds{0};
    std::size_t base = n / parts, rem = n % parts;
    for (std::size_t i = 0; i < parts; ++i) bounds.push_back(bounds.back() + base + (i < rem ? 1 : 0));
    return bounds;
  };
  auto rows = splits(g, pool_h), cols = splits(g, pool_w);
  std::vector<std::vector<std::size_t>> cells;
  cells.reserve(pool_h * pool_w);
  for (std::size_t cr = 0; cr < pool_h; ++cr)
    for (std::size_t cc = 0; cc < pool_w; ++cc) {
      std::vector<std::size_t> cell;
      for (std::size_t r = rows[cr]; r < rows[cr + 1]; ++r)
        for (std::size_t c = cols[cc]; c < cols[cc + 1]; ++c) cell.push_back(r * g + c);
      cells.push_back(std::move(cell));
    }
  return cells;
}

/// Mean of m over each cell. A cell whose entries are all bitwise equal
/// pools to exactly that value (a constant map must pool to the constant;
/// the correction is within 1 ulp and the gradient is the plain cell mean).
template <typename Real>
TensorPtr<Real> cell_mean(Tape<Real>& tape, const TensorPtr<Real>& m,
                          const std::vector<std::vector<std::size_t>>& cells) {
  if (m->shape.size() != 1) throw ShapeError("cell_mean: rank-1 input required");
  auto out = zeros<Real>({cells.size()});
  for (std::size_t c = 0; c < cells.size(); ++c) {
    detail::ExactSum<Real> acc;
    bool constant = true;
    for (std::size_t t : cells[c]) {
      acc.add(m->data[t]);
      constant = constant && m->data[t] == m->data[cells[c][0]];
    }
    out->data[c] = constant ? m->data[cells[c][0]]
                            : acc.round() / static_cast<Real>(cells[c].size());
  }
  detail::check_finite(*out, "cell_mean");
  if (tape.track(m)) {
    tape.record(out, [m, out, cells]() {
      m->ensure_grad();
      for (std::size_t c = 0; c < cells.size(); ++c) {
        Real inv = Real(1) / static_cast<Real>(cells[c].size());
        for (std::size_t t : cells[c]) m->grad[t] += out->grad[c] * inv;
      }
    });
  }
  return out;
}

/// Emphasized pooled queries for one crop: q = cell-average of (v with each
/// token row scaled by its significance), pooled_m = cell-average of m.
template <typename Real>
struct PooledQueries {
  TensorPtr<Real> q;         // [pool_h*pool_w x d_enc]
  TensorPtr<Real> pooled_m;  // [pool_h*pool_w]
};

template <typename Real>
PooledQueries<Real> emphasize_pool(Tape<Real>& tape, const TensorPtr<Real>& v_final,
                                   const TensorPtr<Real>& m, std::size_t pool_h,
                                   std::size_t pool_w) {
  if (v_final->shape.size() != 2 || m->shape.size() != 1 ||
      v_final->shape[0] != m->shape[0])
    throw ShapeError("emphasize_pool: token count mismatch");
  const std::size_t tokens = v_final->shape[0], d_enc = v_final->shape[1];
  if (pool_h * pool_w > tokens) throw UsageError("emphasize_pool: more cells than tokens");
  std::size_t g = 0;
  while (g * g < tokens) ++g;
  if (g * g != tokens) throw ShapeError("emphasize_pool: token count is not a square grid");
  auto cells = pool_cells(g, pool_h, pool_w);

  // Constant per-cell averaging matrix; gradients flow through v and m only.
  auto pmat = zeros<Real>({cells.size(), tokens});
  for (std::size_t c = 0; c < cells.size(); ++c) {
    Real inv = Real(1) / static_cast<Real>(cells[c].size());
    for (std::size_t t : cells[c]) pmat->data[c * tokens + t] = inv;
  }
  PooledQueries<Real> out;
  out.q = matmul(tape, pmat, row_scale(tape, v_final, m));
  out.pooled_m = cell_mean(tape, m, cells);
  (void)d_enc;
  return out;
}

/// One multi-head cross-attention block: queries attend over the crop's
/// final tokens (keys and values), heads are concatenated, projected, and a
/// residual from the queries is added unless disabled.
template <typename Real>
TensorPtr<Real> qformer_attend(Tape<Real>& tape, const TensorPtr<Real>& q,
                               const TensorPtr<Real>& v_final, const ExpertParams<Real>& params) {
  const auto& cfg = params.cfg;
  if (q->shape.size() != 2 || v_final->shape.size() != 2 ||
      q->shape[1] != cfg.d_enc || v_final->shape[1] != cfg.d_enc)
    throw ShapeError("qformer_attend: expected [* x d_enc] inputs");
  const std::size_t dh = cfg.d_enc / cfg.n_heads;
  const Real att_scale = Real(1) / static_cast<Real>(std::sqrt(static_cast<double>(dh)));

  auto qp = matmul(tape, q, params.wq);
  auto kp = matmul(tape, v_final, params.wk);
  auto vp = matmul(tape, v_final, params.wv);

  std::vector<TensorPtr<Real>> heads;
  heads.reserve(cfg.n_heads);
  for (std::size_t h = 0; h < cfg.n_heads; ++h) {
    auto qh = slice_cols(tape, qp, h * dh, (h + 1) * dh);
    auto kh = slice_cols(tape, kp, h * dh, (h + 1) * dh);
    auto vh = slice_cols(tape, vp, h * dh, (h + 1) * dh);
    auto logits = scale(tape, matmul_nt(tape, qh, kh), att_scale);
    auto attn = softmax_rows(tape, logits);
    heads.push_back(matmul(tape, attn, vh));
  }
  auto merged = heads.size() == 1 ? heads[0] : concat_cols(tape, heads);
  auto projected = matmul(tape, merged, params.wo);
  return cfg.residual ? add(tape, q, projected) : projected;
}

/// Selector output for a whole image.
template <typename Real>
struct SelectedTokens {
  std::vector<TensorPtr<Real>> v_s;       // per crop: [cells x d_enc]
  std::vector<TensorPtr<Real>> pooled_m;  // per crop: [cells]
};

/// Pool-then-attend for every crop, the resized original included.
template <typename Real>
SelectedTokens<Real> select_tokens(Tape<Real>& tape, const FeatureBundle& bundle,
                                   const SignificanceMap<Real>& sig,
                                   const ExpertParams<Real>& params) {
  const auto& cfg = params.cfg;
  if (sig.averaged.size() != bundle.layout.n_crops)
    throw ShapeError("select_tokens: significance map does not match bundle crops");
  SelectedTokens<Real> out;
  out.v_s.reserve(bundle.layout.n_crops);
  out.pooled_m.reserve(bundle.layout.n_crops);
  for (std::size_t j = 0; j < bundle.layout.n_crops; ++j) {
    auto v = crop_tensor<Real>(bundle.v_final[j], cfg.tokens(), cfg.d_enc);
    auto pooled = emphasize_pool(tape, v, sig.averaged[j], cfg.pool_h, cfg.pool_w);
    out.v_s.push_back(qformer_attend(tape, pooled.q, v, params));
    out.pooled_m.push_back(pooled.pooled_m);
  }
  return out;
}

}  // namespace aov
