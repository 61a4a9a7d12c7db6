#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "aov/error.hpp"
#include "aov/eval.hpp"
#include "aov/expert.hpp"
#include "aov/feature_io.hpp"
#include "aov/params.hpp"
#include "aov/rng.hpp"
#include "aov/tensor.hpp"

namespace aov {

struct TrainConfig {
  double lr0 = 1e-4;
  std::size_t batch_size = 32;
  std::size_t epochs = 2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::uint64_t seed = 1;
  double eta_min = 0.0;
  double val_fraction = 0.25;

  void validate() const {
    if (!(lr0 > 0.0)) throw UsageError("lr0 must be positive");
    if (batch_size == 0) throw UsageError("batch_size must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
      throw UsageError("adam betas must lie in [0,1)");
    if (!(eps > 0.0)) throw UsageError("adam eps must be positive");
    if (!(weight_decay >= 0.0)) throw UsageError("weight_decay must be non-negative");
    if (!(val_fraction >= 0.0 && val_fraction < 1.0))
      throw UsageError("val_fraction must lie in [0,1)");
  }
};

template <typename Real>
struct BceResult {
  TensorPtr<Real> loss;
  bool single_class = false;
};

// Per-batch class rebalancing: w_pos = n/(2 n_pos), w_neg = n/(2 n_neg), so a
// balanced batch reduces to the plain unweighted mean exactly. Probabilities
// are clamped to [1e-7, 1-1e-7] before the logs.
template <typename Real>
BceResult<Real> balanced_bce(Tape<Real>& tape, const TensorPtr<Real>& scores,
                             const std::vector<int>& labels) {
  const std::size_t n = labels.size();
  if (n == 0 || scores->shape.size() != 1 || scores->shape[0] != n)
    throw ShapeError("balanced_bce: scores must be a vector matching the label count");
  std::size_t n_pos = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw DataError("balanced_bce: labels must be 0 or 1");
    n_pos += static_cast<std::size_t>(y);
  }
  const std::size_t n_neg = n - n_pos;
  BceResult<Real> out;
  double w_pos = 1.0, w_neg = 1.0;
  if (n_pos == 0 || n_neg == 0) {
    out.single_class = true;
  } else {
    w_pos = static_cast<double>(n) / (2.0 * static_cast<double>(n_pos));
    w_neg = static_cast<double>(n) / (2.0 * static_cast<double>(n_neg));
  }
  auto a = zeros<Real>({n});
  auto b = zeros<Real>({n});
  for (std::size_t i = 0; i < n; ++i) {
    a->data[i] = labels[i] == 1 ? static_cast<Real>(w_pos) : Real(0);
    b->data[i] = labels[i] == 1 ? Real(0) : static_cast<Real>(w_neg);
  }
  auto s = clamp(tape, scores, Real(1e-7), Real(1.0 - 1e-7));
  auto one_minus = add_const(tape, scale(tape, s, Real(-1)), Real(1));
  auto terms = add(tape, mul(tape, a, vlog(tape, s)), mul(tape, b, vlog(tape, one_minus)));
  out.loss = scale(tape, sum_all(tape, terms), Real(-1.0 / static_cast<double>(n)));
  return out;
}

// Cosine annealing with warm restarts: period T, floor eta_min.
inline double lr_schedule(std::uint64_t step, std::uint64_t restart_period, double lr0,
                          double eta_min = 0.0) {
  if (restart_period == 0) throw UsageError("restart_period must be positive");
  const double t = static_cast<double>(step % restart_period);
  const double phase =
      (1.0 + std::cos(M_PI * t / static_cast<double>(restart_period))) / 2.0;
  return eta_min + (lr0 - eta_min) * phase;
}

// Decoupled weight decay is applied before the adaptive update.
template <typename Real>
void adamw_step(ExpertParams<Real>& params, AdamWState<Real>& state, double lr,
                const TrainConfig& cfg) {
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto& [name, p] : params.trainable_named()) {
    if (p->grad.size() != p->data.size())
      throw NumericError("adamw_step: tensor " + name + " has no gradient buffer");
    auto& [m, v] = state.moments[name];
    if (m.size() != p->data.size()) m.assign(p->data.size(), Real(0));
    if (v.size() != p->data.size()) v.assign(p->data.size(), Real(0));
    for (std::size_t i = 0; i < p->data.size(); ++i) {
      const double g = static_cast<double>(p->grad[i]);
      if (!std::isfinite(g))
        throw NumericError("adamw_step: non-finite gradient in tensor " + name);
      p->data[i] = static_cast<Real>(static_cast<double>(p->data[i]) *
                                     (1.0 - lr * cfg.weight_decay));
      const double mi = cfg.beta1 * static_cast<double>(m[i]) + (1.0 - cfg.beta1) * g;
      const double vi = cfg.beta2 * static_cast<double>(v[i]) + (1.0 - cfg.beta2) * g * g;
      m[i] = static_cast<Real>(mi);
      v[i] = static_cast<Real>(vi);
      const double update = (mi / bc1) / (std::sqrt(vi / bc2) + cfg.eps);
      p->data[i] = static_cast<Real>(static_cast<double>(p->data[i]) - lr * update);
    }
  }
}

struct EpochStats {
  double mean_loss = 0.0;
  double train_auroc = 0.0;
  double val_auroc = 0.0;
  bool val_auroc_defined = false;
};

struct TrainReport {
  std::vector<double> step_losses;
  std::vector<EpochStats> epochs;
  std::size_t steps_per_epoch = 0;
  std::uint64_t restart_period = 0;
  std::size_t single_class_batches = 0;
  std::size_t n_train = 0;
  std::size_t n_val = 0;
  double wall_time_s = 0.0;
};

template <typename Real>
struct TrainResult {
  ExpertParams<Real> params;
  AdamWState<Real> state;
  TrainReport report;
};

// Deterministic stratified split: within each (class, label) group, in dataset
// order, the tail llround(val_fraction * size) items go to validation.
inline void split_train_val(const std::vector<FeatureBundle>& dataset, double val_fraction,
                            std::vector<std::size_t>& train_idx,
                            std::vector<std::size_t>& val_idx) {
  std::map<std::pair<std::uint32_t, std::uint32_t>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < dataset.size(); ++i)
    groups[{dataset[i].class_id, dataset[i].label}].push_back(i);
  std::vector<std::size_t> marks(dataset.size(), 0);
  for (auto& [key, idxs] : groups) {
    auto n_val = static_cast<std::size_t>(
        std::llround(val_fraction * static_cast<double>(idxs.size())));
    if (n_val >= idxs.size()) n_val = idxs.size() - 1;
    for (std::size_t k = idxs.size() - n_val; k < idxs.size(); ++k) marks[idxs[k]] = 1;
  }
  train_idx.clear();
  val_idx.clear();
  for (std::size_t i = 0; i < dataset.size(); ++i)
    (marks[i] ? val_idx : train_idx).push_back(i);
}

template <typename Real>
TrainResult<Real> train_stage1(const std::vector<FeatureBundle>& dataset,
                               const ExpertConfig& expert_cfg, const TrainConfig& cfg,
                               const Checkpoint<Real>* resume = nullptr) {
  cfg.validate();
  if (dataset.empty()) throw DataError("train_stage1: empty dataset");
  std::size_t n_pos = 0;
  for (const auto& b : dataset) n_pos += b.label;
  if (n_pos == 0 || n_pos == dataset.size())
    throw DataError("train_stage1: need both labels in the dataset, got " +
                    std::to_string(n_pos) + " positives out of " +
                    std::to_string(dataset.size()));

  const auto t0 = std::chrono::steady_clock::now();
  TrainResult<Real> result{resume ? resume->params
                                  : ExpertParams<Real>::init(expert_cfg, cfg.seed),
                           AdamWState<Real>{}, TrainReport{}};
  if (resume && resume->opt) result.state = *resume->opt;
  auto& params = result.params;
  auto& report = result.report;

  std::vector<std::size_t> train_idx, val_idx;
  split_train_val(dataset, cfg.val_fraction, train_idx, val_idx);
  report.n_train = train_idx.size();
  report.n_val = val_idx.size();
  report.steps_per_epoch =
      (train_idx.size() + cfg.batch_size - 1) / cfg.batch_size;
  report.restart_period = (report.steps_per_epoch + 1) / 2;
  if (report.restart_period == 0) report.restart_period = 1;

  Rng root(cfg.seed);
  // A resumed run replays the same per-epoch shuffles; the step counter in the
  // optimizer state tells us which epoch comes next.
  std::size_t start_epoch = 0;
  if (resume && resume->opt && report.steps_per_epoch > 0)
    start_epoch = static_cast<std::size_t>(result.state.step / report.steps_per_epoch);

  for (std::size_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    auto order = train_idx;
    auto erng = root.fork(1000 + epoch);
    erng.shuffle(order.begin(), order.end());

    std::vector<double> epoch_scores(order.size(), 0.0);
    std::vector<int> epoch_labels(order.size(), 0);
    double loss_sum = 0.0;
    std::size_t batches = 0;

    for (std::size_t off = 0; off < order.size(); off += cfg.batch_size) {
      const std::size_t take = std::min(cfg.batch_size, order.size() - off);
      Tape<Real> tape;
      std::vector<TensorPtr<Real>> scores;
      std::vector<int> labels(take);
      params.zero_grad();
      for (std::size_t k = 0; k < take; ++k) {
        const auto& bundle = dataset[order[off + k]];
        auto sel = expert_forward(tape, bundle, params);
        scores.push_back(sel.score);
        labels[k] = static_cast<int>(bundle.label);
        epoch_scores[off + k] = static_cast<double>(sel.score->data[0]);
        epoch_labels[off + k] = labels[k];
      }
      auto stacked = concat_many(tape, scores);
      auto bce = balanced_bce(tape, stacked, labels);
      if (bce.single_class) report.single_class_batches++;
      const double loss = static_cast<double>(bce.loss->data[0]);
      if (!std::isfinite(loss)) throw NumericError("train_stage1: non-finite loss");
      report.step_losses.push_back(loss);
      loss_sum += loss;
      batches++;
      tape.backward(bce.loss);
      const double lr =
          lr_schedule(result.state.step, report.restart_period, cfg.lr0, cfg.eta_min);
      adamw_step(params, result.state, lr, cfg);
    }

    EpochStats stats;
    stats.mean_loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
    stats.train_auroc = auroc(epoch_scores, epoch_labels);
    if (!val_idx.empty()) {
      std::vector<double> vs(val_idx.size());
      std::vector<int> vl(val_idx.size());
      bool has_pos = false, has_neg = false;
      for (std::size_t k = 0; k < val_idx.size(); ++k) {
        vs[k] = static_cast<double>(score_bundle(dataset[val_idx[k]], params));
        vl[k] = static_cast<int>(dataset[val_idx[k]].label);
        (vl[k] ? has_pos : has_neg) = true;
      }
      if (has_pos && has_neg) {
        stats.val_auroc = auroc(vs, vl);
        stats.val_auroc_defined = true;
      }
    }
    report.epochs.push_back(stats);
  }

  report.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

}  // namespace aov
