#pragma once

#include "aov/feature_io.hpp"
#include "aov/ltfm.hpp"
#include "aov/params.hpp"
#include "aov/scoring.hpp"
#include "aov/tensor.hpp"
#include "aov/vt_selector.hpp"

namespace aov {

// Full expert pass: significance maps, token selection, global aggregation, score.
template <typename Real>
SelectionResult<Real> expert_forward(Tape<Real>& tape, const FeatureBundle& bundle,
                                     const ExpertParams<Real>& params) {
  auto sig = significance_image(tape, bundle, params);
  auto sel = select_tokens(tape, bundle, sig, params);
  SelectionResult<Real> out;
  out.v_s = sel.v_s;
  out.pooled_m = sel.pooled_m;
  out.r = aggregate_global(tape, out.v_s, out.pooled_m);
  out.score = score_from_r(tape, out.r, params);
  return out;
}

// Inference-only score; nothing is recorded on a tape.
template <typename Real>
Real score_bundle(const FeatureBundle& bundle, const ExpertParams<Real>& params) {
  Tape<Real> tape;
  NoGrad<Real> guard(tape);
  return expert_forward(tape, bundle, params).score->data[0];
}

}  // namespace aov
