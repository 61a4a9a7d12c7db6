#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <json.hpp>

#include "aov/error.hpp"
#include "aov/feature_io.hpp"
#include "aov/params.hpp"
#include "aov/tensor.hpp"
#include "aov/vt_selector.hpp"

namespace aov {

struct DegenerateWeightsError : NumericError {
  using NumericError::NumericError;
};

// r = sum_jk v_s[j][k] * pooled_m[j][k] / sum_jk pooled_m[j][k].
// Exact-summation accumulators make r independent of (crop, cell) order.
template <typename Real>
TensorPtr<Real> aggregate_global(Tape<Real>& tape, const std::vector<TensorPtr<Real>>& v_s,
                                 const std::vector<TensorPtr<Real>>& pooled_m) {
  if (v_s.empty() || v_s.size() != pooled_m.size())
    throw ShapeError("aggregate_global: selected tokens and pooled maps must pair up per crop");
  double total = 0.0;
  for (const auto& m : pooled_m)
    for (Real w : m->data) total += static_cast<double>(w);
  if (!(total > 0.0))
    throw DegenerateWeightsError("aggregate_global: pooled significance weights sum to " +
                                 std::to_string(total) + ", expected a positive total");
  auto tokens = concat_rows(tape, v_s);
  auto weights = concat_many(tape, pooled_m);
  return weighted_mean_rows(tape, tokens, weights);
}

// sigmoid of a 2-layer ReLU MLP logit over the global anomaly vector.
template <typename Real>
TensorPtr<Real> score_from_r(Tape<Real>& tape, const TensorPtr<Real>& r,
                             const ExpertParams<Real>& params) {
  if (r->shape.size() != 1 || r->shape[0] != params.cfg.d_enc)
    throw ShapeError("score_from_r: r must be a length-" + std::to_string(params.cfg.d_enc) +
                     " vector");
  auto row = reshape(tape, r, {1, r->shape[0]});
  auto logit = params.score_mlp.forward(tape, row);
  return reshape(tape, sigmoid(tape, logit), {1});
}

inline void validate_thresholds(double s_low, double s_high) {
  if (!(0.0 <= s_low && s_low < s_high && s_high <= 1.0))
    throw UsageError("adverb thresholds must satisfy 0 <= s_low < s_high <= 1, got s_low=" +
                     std::to_string(s_low) + " s_high=" + std::to_string(s_high));
}

// Boundary convention: >= at either threshold maps to the stronger adverb.
inline std::string select_adverb(double score, double s_low, double s_high) {
  validate_thresholds(s_low, s_high);
  if (score >= s_high) return "highly";
  if (score >= s_low) return "moderately";
  return "slightly";
}

inline std::string indication_text(const std::string& adverb) {
  return "with " + adverb + " suspicious feature:";
}

template <typename Real>
struct SelectionResult {
  TensorPtr<Real> r;
  TensorPtr<Real> score;
  std::vector<TensorPtr<Real>> v_s;
  std::vector<TensorPtr<Real>> pooled_m;
};

template <typename Real>
struct PromptLayout {
  std::vector<std::vector<Real>> original_tokens;
  std::string indication_text;
  std::string adverb;
  std::vector<Real> r;
  std::vector<std::vector<Real>> selected_tokens;
  Real score = Real(0);
  double s_low = 0.0;
  double s_high = 0.0;
};

// Segment order: every original token in crop order, the indication text,
// then r followed by the selected tokens in crop order.
template <typename Real>
PromptLayout<Real> assemble_prompt(const FeatureBundle& bundle,
                                   const SelectionResult<Real>& selection, double s_low,
                                   double s_high) {
  validate_thresholds(s_low, s_high);
  PromptLayout<Real> layout;
  const std::size_t d = bundle.d_enc;
  const std::size_t tokens = bundle.layout.g * bundle.layout.g;
  layout.original_tokens.reserve(bundle.layout.total_tokens());
  for (const auto& crop : bundle.v_final)
    for (std::size_t t = 0; t < tokens; ++t) {
      std::vector<Real> tok(d);
      for (std::size_t k = 0; k < d; ++k) tok[k] = static_cast<Real>(crop[t * d + k]);
      layout.original_tokens.push_back(std::move(tok));
    }
  layout.score = selection.score->data[0];
  layout.s_low = s_low;
  layout.s_high = s_high;
  layout.adverb = select_adverb(static_cast<double>(layout.score), s_low, s_high);
  layout.indication_text = aov::indication_text(layout.adverb);
  layout.r = selection.r->data;
  for (const auto& crop : selection.v_s) {
    const std::size_t rows = crop->rows();
    for (std::size_t t = 0; t < rows; ++t) {
      std::vector<Real> tok(d);
      for (std::size_t k = 0; k < d; ++k) tok[k] = crop->data[t * d + k];
      layout.selected_tokens.push_back(std::move(tok));
    }
  }
  return layout;
}

template <typename Real>
nlohmann::json prompt_to_json(const PromptLayout<Real>& layout) {
  return nlohmann::json{{"adverb", layout.adverb},
                        {"text", layout.indication_text},
                        {"n_original", layout.original_tokens.size()},
                        {"n_selected", layout.selected_tokens.size()},
                        {"score", static_cast<double>(layout.score)}};
}

}  // namespace aov
