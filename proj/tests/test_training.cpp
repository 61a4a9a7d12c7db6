#include "aov/training.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>

namespace {

using D = double;
using aov::Tape;
using aov::TensorPtr;

// ---------------------------------------------------------------------------
// balanced_bce
// ---------------------------------------------------------------------------

TEST(BalancedBce, OnePosOneNegAtHalfIsLn2) {
  Tape<D> tape;
  auto s = aov::tensor<D>({2}, {0.5, 0.5});
  auto r = aov::balanced_bce(tape, s, {1, 0});
  EXPECT_FALSE(r.single_class);
  EXPECT_NEAR(r.loss->data[0], std::log(2.0), 1e-9);
}

TEST(BalancedBce, PerfectScoresClampToTinyLoss) {
  Tape<D> tape;
  auto s = aov::tensor<D>({2}, {1.0, 0.0});
  auto r = aov::balanced_bce(tape, s, {1, 0});
  // both terms clamp to 1-1e-7, so the loss is -ln(1-1e-7)
  EXPECT_LT(r.loss->data[0], 1e-6);
  EXPECT_GT(r.loss->data[0], 0.0);
  EXPECT_NEAR(r.loss->data[0], -std::log1p(-1e-7), 1e-12);
}

TEST(BalancedBce, EqualCountsMatchUnweightedMeanExactly) {
  Tape<D> tape;
  aov::Rng rng(1);
  const std::size_t n = 8;
  auto raw = aov::randn<D>(rng, {n}, 1.0);
  auto s = aov::sigmoid(tape, raw);
  std::vector<int> labels = {1, 0, 1, 0, 1, 0, 1, 0};
  auto r = aov::balanced_bce(tape, s, labels);
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double p = std::min(1.0 - 1e-7, std::max(1e-7, s->data[i]));
    acc += labels[i] == 1 ? 1.0 * std::log(p) + 0.0 * std::log(1.0 - p)
                          : 0.0 * std::log(p) + 1.0 * std::log(1.0 - p);
  }
  const double unweighted = acc * (-1.0 / static_cast<double>(n));
  EXPECT_EQ(r.loss->data[0], unweighted);
}

TEST(BalancedBce, ImbalancedWeightsRebalance) {
  Tape<D> tape;
  // 3 positives, 1 negative, all scored 0.5: weights 4/6 and 4/2
  auto s = aov::tensor<D>({4}, {0.5, 0.5, 0.5, 0.5});
  auto r = aov::balanced_bce(tape, s, {1, 1, 1, 0});
  const double expected = 0.25 * (3.0 * (4.0 / 6.0) + 1.0 * 2.0) * std::log(2.0);
  EXPECT_NEAR(r.loss->data[0], expected, 1e-12);
  EXPECT_NEAR(r.loss->data[0], std::log(2.0), 1e-12);  // rebalancing restores ln 2
}

TEST(BalancedBce, SingleClassFallsBackUnweighted) {
  Tape<D> tape;
  auto s = aov::tensor<D>({3}, {0.9, 0.8, 0.7});
  auto r = aov::balanced_bce(tape, s, {1, 1, 1});
  EXPECT_TRUE(r.single_class);
  const double expected = -(std::log(0.9) + std::log(0.8) + std::log(0.7)) / 3.0;
  EXPECT_NEAR(r.loss->data[0], expected, 1e-12);
}

TEST(BalancedBce, NonNegativeAndFinite) {
  Tape<D> tape;
  aov::Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.index(12);
    auto s = aov::zeros<D>({n});
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      s->data[i] = rng.uniform();
      labels[i] = rng.uniform() < 0.5 ? 1 : 0;
    }
    auto r = aov::balanced_bce(tape, s, labels);
    EXPECT_TRUE(std::isfinite(r.loss->data[0]));
    EXPECT_GE(r.loss->data[0], 0.0);
  }
}

TEST(BalancedBce, GradMatchesFiniteDifferences) {
  aov::Rng rng(3);
  auto raw = aov::randn<D>(rng, {6}, 1.0);
  std::vector<int> labels = {1, 0, 0, 1, 1, 0};
  double err = aov::grad_check(
      [&](Tape<D>& t, const std::vector<TensorPtr<D>>& in) {
        auto s = aov::sigmoid(t, in[0]);
        return aov::balanced_bce(t, s, labels).loss;
      },
      {raw});
  EXPECT_LT(err, 1e-4);
}

TEST(BalancedBce, ShapeAndLabelValidation) {
  Tape<D> tape;
  auto s = aov::tensor<D>({2}, {0.5, 0.5});
  EXPECT_THROW(aov::balanced_bce(tape, s, {1}), aov::ShapeError);
  EXPECT_THROW(aov::balanced_bce(tape, s, {1, 2}), aov::DataError);
  EXPECT_THROW(aov::balanced_bce(tape, s, {}), aov::ShapeError);
}

// ---------------------------------------------------------------------------
// lr_schedule
// ---------------------------------------------------------------------------

TEST(LrSchedule, PinnedValues) {
  const std::uint64_t T = 10;
  EXPECT_NEAR(aov::lr_schedule(0, T, 1e-4), 1e-4, 1e-12);
  EXPECT_NEAR(aov::lr_schedule(T / 2, T, 1e-4), 5e-5, 1e-12);
  EXPECT_NEAR(aov::lr_schedule(T, T, 1e-4), 1e-4, 1e-12);
}

TEST(LrSchedule, PeriodicityExact) {
  const std::uint64_t T = 7;
  for (std::uint64_t s = 0; s < 40; ++s)
    EXPECT_EQ(aov::lr_schedule(s + T, T, 1e-4), aov::lr_schedule(s, T, 1e-4));
}

TEST(LrSchedule, FloorRespected) {
  const std::uint64_t T = 8;
  for (std::uint64_t s = 0; s < 2 * T; ++s) {
    const double lr = aov::lr_schedule(s, T, 1e-4, 1e-6);
    EXPECT_GE(lr, 1e-6);
    EXPECT_LE(lr, 1e-4 + 1e-18);
  }
  EXPECT_THROW(aov::lr_schedule(0, 0, 1e-4), aov::UsageError);
}

TEST(LrSchedule, MonotoneDecreaseWithinPeriod) {
  const std::uint64_t T = 16;
  double prev = aov::lr_schedule(0, T, 1e-4);
  for (std::uint64_t s = 1; s < T; ++s) {
    const double lr = aov::lr_schedule(s, T, 1e-4);
    EXPECT_LT(lr, prev);
    prev = lr;
  }
}

// ---------------------------------------------------------------------------
// adamw_step
// ---------------------------------------------------------------------------

aov::ExpertConfig small_cfg() {
  aov::ExpertConfig cfg;
  cfg.g = 4;
  cfg.d_enc = 8;
  cfg.d = 4;
  cfg.n_heads = 2;
  return cfg;
}

TEST(AdamW, ZeroGradNoDecayIsNoOp) {
  auto p = aov::ExpertParams<D>::init(small_cfg(), 10);
  auto before = p.named();
  std::vector<std::vector<double>> snapshot;
  for (auto& [name, t] : before) snapshot.push_back(t->data);
  p.zero_grad();
  aov::AdamWState<D> state;
  aov::TrainConfig cfg;
  cfg.weight_decay = 0.0;
  aov::adamw_step(p, state, 1e-3, cfg);
  auto after = p.named();
  for (std::size_t i = 0; i < after.size(); ++i) EXPECT_EQ(after[i].second->data, snapshot[i]);
  EXPECT_EQ(state.step, 1u);
}

TEST(AdamW, FirstStepMovesByLrTimesSign) {
  auto p = aov::ExpertParams<D>::init(small_cfg(), 11);
  p.zero_grad();
  aov::Rng rng(12);
  std::vector<std::vector<double>> before;
  for (auto& [name, t] : p.named()) {
    before.push_back(t->data);
    for (auto& g : t->grad) {
      g = rng.normal();
      if (std::abs(g) < 0.1) g = g < 0 ? -0.1 : 0.1;  // keep eps negligible
    }
  }
  aov::AdamWState<D> state;
  aov::TrainConfig cfg;
  cfg.weight_decay = 0.0;
  const double lr = 1e-3;
  aov::adamw_step(p, state, lr, cfg);
  std::size_t i = 0;
  for (auto& [name, t] : p.named()) {
    for (std::size_t k = 0; k < t->data.size(); ++k) {
      const double delta = t->data[k] - before[i][k];
      const double sign = t->grad[k] > 0 ? 1.0 : -1.0;
      EXPECT_NEAR(delta, -lr * sign, lr * 1e-4) << name;
    }
    ++i;
  }
}

TEST(AdamW, DecayOnlyShrinksByExactFactor) {
  auto p = aov::ExpertParams<D>::init(small_cfg(), 13);
  p.zero_grad();
  std::vector<std::vector<double>> before;
  for (auto& [name, t] : p.named()) before.push_back(t->data);
  aov::AdamWState<D> state;
  aov::TrainConfig cfg;
  cfg.weight_decay = 0.01;
  const double lr = 0.1;
  aov::adamw_step(p, state, lr, cfg);
  const double factor = 1.0 - lr * cfg.weight_decay;
  std::size_t i = 0;
  for (auto& [name, t] : p.named()) {
    for (std::size_t k = 0; k < t->data.size(); ++k)
      EXPECT_EQ(t->data[k], before[i][k] * factor) << name;
    ++i;
  }
}

TEST(AdamW, NaNGradientNamesTheTensor) {
  auto p = aov::ExpertParams<D>::init(small_cfg(), 14);
  p.zero_grad();
  p.e_plus->grad[0] = std::nan("");
  aov::AdamWState<D> state;
  aov::TrainConfig cfg;
  try {
    aov::adamw_step(p, state, 1e-3, cfg);
    FAIL() << "expected NumericError";
  } catch (const aov::NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("e_plus"), std::string::npos);
  }
}

TEST(AdamW, MissingGradBufferRejected) {
  auto p = aov::ExpertParams<D>::init(small_cfg(), 15);
  aov::AdamWState<D> state;
  aov::TrainConfig cfg;
  EXPECT_THROW(aov::adamw_step(p, state, 1e-3, cfg), aov::NumericError);
}

// ---------------------------------------------------------------------------
// train_stage1
// ---------------------------------------------------------------------------

std::vector<aov::FeatureBundle> train_dataset(std::uint64_t seed, std::size_t images_per_class,
                                              double shift = 6.0) {
  aov::SynthConfig s;
  s.n_classes = 2;
  s.images_per_class = images_per_class;
  s.anomaly_fraction = 0.5;
  s.g = 4;
  s.d_enc = 8;
  s.d = 4;
  s.n_crops = 2;
  s.patch_size = 2;
  s.anomaly_shift_norm = shift;
  s.seed = seed;
  return aov::synth_generate(s);
}

aov::TrainConfig desk_cfg(std::size_t epochs = 2) {
  aov::TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.epochs = epochs;
  cfg.seed = 5;
  return cfg;
}

TEST(SplitTrainVal, StratifiedTailSplit) {
  auto data = train_dataset(20, 8);
  std::vector<std::size_t> train_idx, val_idx;
  aov::split_train_val(data, 0.25, train_idx, val_idx);
  EXPECT_EQ(train_idx.size(), 12u);
  EXPECT_EQ(val_idx.size(), 4u);
  // one held-out image per (class, label) group
  std::map<std::pair<std::uint32_t, std::uint32_t>, int> counts;
  for (auto i : val_idx) counts[{data[i].class_id, data[i].label}]++;
  EXPECT_EQ(counts.size(), 4u);
  for (auto& [key, c] : counts) EXPECT_EQ(c, 1);
  // split is deterministic
  std::vector<std::size_t> t2, v2;
  aov::split_train_val(data, 0.25, t2, v2);
  EXPECT_EQ(train_idx, t2);
  EXPECT_EQ(val_idx, v2);
}

TEST(TrainStage1, SameSeedBitwiseIdentical) {
  auto data = train_dataset(21, 6);
  auto cfg = desk_cfg(1);
  auto a = aov::train_stage1<D>(data, small_cfg(), cfg);
  auto b = aov::train_stage1<D>(data, small_cfg(), cfg);
  auto na = a.params.named();
  auto nb = b.params.named();
  ASSERT_EQ(na.size(), nb.size());
  for (std::size_t i = 0; i < na.size(); ++i) {
    EXPECT_EQ(na[i].first, nb[i].first);
    EXPECT_EQ(na[i].second->data, nb[i].second->data) << na[i].first;
  }
  EXPECT_EQ(a.report.step_losses, b.report.step_losses);
  EXPECT_EQ(a.state.step, b.state.step);
}

TEST(TrainStage1, LossDecreasesAndStaysFinite) {
  auto data = train_dataset(22, 16);
  auto result = aov::train_stage1<D>(data, small_cfg(), desk_cfg(2));
  const auto& losses = result.report.step_losses;
  ASSERT_GE(losses.size(), 4u);
  for (double l : losses) EXPECT_TRUE(std::isfinite(l));
  const std::size_t q = losses.size() / 4;
  double head = 0.0, tail = 0.0;
  for (std::size_t i = 0; i < q; ++i) head += losses[i];
  for (std::size_t i = losses.size() - q; i < losses.size(); ++i) tail += losses[i];
  EXPECT_LT(tail, head);
}

TEST(TrainStage1, HeldOutAurocReachesTarget) {
  auto data = train_dataset(25, 24);
  auto cfg = desk_cfg(2);
  cfg.seed = 7;
  auto result = aov::train_stage1<D>(data, small_cfg(), cfg);
  ASSERT_EQ(result.report.epochs.size(), 2u);
  const auto& last = result.report.epochs.back();
  ASSERT_TRUE(last.val_auroc_defined);
  EXPECT_GE(last.val_auroc, 0.95);
  EXPECT_GE(last.train_auroc, 0.95);
}

TEST(TrainStage1, RestartPeriodIsHalfEpoch) {
  auto data = train_dataset(24, 16);  // 24 train images, batch 8 -> 3 steps/epoch
  auto result = aov::train_stage1<D>(data, small_cfg(), desk_cfg(1));
  EXPECT_EQ(result.report.steps_per_epoch, 3u);
  EXPECT_EQ(result.report.restart_period, 2u);
}

TEST(TrainStage1, ResumeFromCheckpointIsBitwise) {
  auto data = train_dataset(25, 8);
  auto full = aov::train_stage1<D>(data, small_cfg(), desk_cfg(2));

  auto half = aov::train_stage1<D>(data, small_cfg(), desk_cfg(1));
  const std::string path = testing::TempDir() + "resume.aovc";
  aov::save_checkpoint(half.params, path, &half.state);
  auto loaded = aov::load_checkpoint<D>(path);
  ASSERT_TRUE(loaded.opt.has_value());
  auto resumed = aov::train_stage1<D>(data, small_cfg(), desk_cfg(2), &loaded);

  auto nf = full.params.named();
  auto nr = resumed.params.named();
  ASSERT_EQ(nf.size(), nr.size());
  for (std::size_t i = 0; i < nf.size(); ++i)
    EXPECT_EQ(nf[i].second->data, nr[i].second->data) << nf[i].first;
  EXPECT_EQ(full.state.step, resumed.state.step);
  for (auto& [name, mv] : full.state.moments) {
    auto it = resumed.state.moments.find(name);
    ASSERT_NE(it, resumed.state.moments.end()) << name;
    EXPECT_EQ(mv.first, it->second.first) << name;
    EXPECT_EQ(mv.second, it->second.second) << name;
  }
}

TEST(TrainStage1, RequiresBothLabels) {
  auto data = train_dataset(26, 6);
  std::vector<aov::FeatureBundle> normals;
  for (auto& b : data)
    if (b.label == 0) normals.push_back(b);
  EXPECT_THROW(aov::train_stage1<D>(normals, small_cfg(), desk_cfg(1)), aov::DataError);
  EXPECT_THROW(aov::train_stage1<D>({}, small_cfg(), desk_cfg(1)), aov::DataError);
}

TEST(TrainStage1, ZeroEpochsLeavesInitUntouched) {
  auto data = train_dataset(27, 6);
  auto cfg = desk_cfg(0);
  auto result = aov::train_stage1<D>(data, small_cfg(), cfg);
  auto fresh = aov::ExpertParams<D>::init(small_cfg(), cfg.seed);
  auto nr = result.params.named();
  auto nf = fresh.named();
  for (std::size_t i = 0; i < nr.size(); ++i)
    EXPECT_EQ(nr[i].second->data, nf[i].second->data);
  EXPECT_TRUE(result.report.epochs.empty());
  EXPECT_EQ(result.state.step, 0u);
}

TEST(TrainStage1, UnfrozenTauTrains) {
  auto data = train_dataset(28, 8);
  auto cfg = small_cfg();
  cfg.train_tau = true;
  auto result = aov::train_stage1<D>(data, cfg, desk_cfg(1));
  EXPECT_NE(result.params.tau->data[0], 0.07);
  EXPECT_TRUE(result.state.moments.count("tau"));
}

TEST(TrainStage1, InvalidConfigRejected) {
  auto data = train_dataset(29, 6);
  auto cfg = desk_cfg(1);
  cfg.lr0 = 0.0;
  EXPECT_THROW(aov::train_stage1<D>(data, small_cfg(), cfg), aov::UsageError);
  cfg = desk_cfg(1);
  cfg.val_fraction = 1.0;
  EXPECT_THROW(aov::train_stage1<D>(data, small_cfg(), cfg), aov::UsageError);
}

}  // namespace
