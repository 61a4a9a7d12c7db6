#include "aov/vt_selector.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "aov/ltfm.hpp"

namespace {

using D = double;
using aov::Tape;
using aov::TensorPtr;

aov::ExpertConfig tiny_cfg(std::size_t g = 4, std::size_t d_enc = 8, std::size_t heads = 2) {
  aov::ExpertConfig cfg;
  cfg.g = g;
  cfg.d_enc = d_enc;
  cfg.d = 4;
  cfg.n_heads = heads;
  return cfg;
}

TensorPtr<D> identity(std::size_t n) {
  auto t = aov::zeros<D>({n, n});
  for (std::size_t i = 0; i < n; ++i) t->data[i * n + i] = 1.0;
  return t;
}

// ---------------------------------------------------------------------------
// pool_cells
// ---------------------------------------------------------------------------

TEST(PoolCells, EvenPartition) {
  auto cells = aov::pool_cells(8, 2, 2);
  ASSERT_EQ(cells.size(), 4u);
  for (auto& c : cells) EXPECT_EQ(c.size(), 16u);
  // top-left cell covers rows 0..3, cols 0..3
  EXPECT_TRUE(std::find(cells[0].begin(), cells[0].end(), 0u) != cells[0].end());
  EXPECT_TRUE(std::find(cells[0].begin(), cells[0].end(), 3 * 8 + 3) != cells[0].end());
  EXPECT_TRUE(std::find(cells[3].begin(), cells[3].end(), 7 * 8 + 7) != cells[3].end());
}

TEST(PoolCells, RaggedPartitionFirstCellsLarger) {
  auto cells = aov::pool_cells(27, 2, 2);
  ASSERT_EQ(cells.size(), 4u);
  EXPECT_EQ(cells[0].size(), 14u * 14u);
  EXPECT_EQ(cells[1].size(), 14u * 13u);
  EXPECT_EQ(cells[2].size(), 13u * 14u);
  EXPECT_EQ(cells[3].size(), 13u * 13u);

  auto small = aov::pool_cells(3, 2, 2);
  EXPECT_EQ(small[0].size(), 4u);
  EXPECT_EQ(small[1].size(), 2u);
  EXPECT_EQ(small[2].size(), 2u);
  EXPECT_EQ(small[3].size(), 1u);
}

TEST(PoolCells, CellsPartitionTheGrid) {
  auto cells = aov::pool_cells(5, 2, 3);
  std::vector<int> seen(25, 0);
  for (auto& c : cells)
    for (auto t : c) seen[t]++;
  for (int s : seen) EXPECT_EQ(s, 1);
}

TEST(PoolCells, OversizedGridRejected) {
  EXPECT_THROW(aov::pool_cells(2, 3, 1), aov::UsageError);
}

// ---------------------------------------------------------------------------
// emphasize_pool
// ---------------------------------------------------------------------------

TEST(EmphasizePool, NeutralMaskIsPlainAveragePooling) {
  Tape<D> tape;
  aov::Rng rng(1);
  auto v = aov::randn<D>(rng, {16, 6}, 1.0);
  auto m = aov::full<D>({16}, 1.0);
  auto out = aov::emphasize_pool(tape, v, m, 2, 2);
  auto cells = aov::pool_cells(4, 2, 2);
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t k = 0; k < 6; ++k) {
      double mean = 0.0;
      for (auto t : cells[c]) mean += v->data[t * 6 + k];
      mean /= static_cast<double>(cells[c].size());
      EXPECT_NEAR(out.q->data[c * 6 + k], mean, 1e-12);
    }
}

TEST(EmphasizePool, ZeroMaskZeroesQueries) {
  Tape<D> tape;
  aov::Rng rng(2);
  auto v = aov::randn<D>(rng, {16, 6}, 1.0);
  auto m = aov::zeros<D>({16});
  auto out = aov::emphasize_pool(tape, v, m, 2, 2);
  for (double x : out.q->data) EXPECT_EQ(x, 0.0);
  for (double x : out.pooled_m->data) EXPECT_EQ(x, 0.0);
}

TEST(EmphasizePool, HandWeightedAverage) {
  Tape<D> tape;
  auto v = aov::tensor<D>({4, 2}, {1, 0, 0, 1, 1, 1, 0, 0});
  auto m = aov::tensor<D>({4}, {1, 0, 0, 1});
  auto out = aov::emphasize_pool(tape, v, m, 1, 1);
  ASSERT_EQ(out.q->shape, (aov::Shape{1, 2}));
  // Mask-then-pool: rows 1 and 2 are zeroed, so the cell average of the
  // scaled rows is ([1,0] + [0,0]) / 4. Pooling v and m separately would
  // give [0.25,0.25]; the two orders agree only for constant masks.
  EXPECT_NEAR(out.q->data[0], 0.25, 1e-12);
  EXPECT_NEAR(out.q->data[1], 0.0, 1e-12);
  EXPECT_NEAR(out.pooled_m->data[0], 0.5, 1e-12);
}

TEST(EmphasizePool, ConstantMaskPoolsToConstantExactly) {
  Tape<D> tape;
  aov::Rng rng(3);
  for (std::size_t g : {3u, 4u, 5u, 9u}) {
    auto v = aov::randn<D>(rng, {g * g, 4}, 1.0);
    for (double c : {0.1, 1.0 / 3.0, 0.7310585786300049}) {
      auto m = aov::full<D>({g * g}, c);
      auto out = aov::emphasize_pool(tape, v, m, 2, 2);
      for (double x : out.pooled_m->data) EXPECT_EQ(x, c) << "g=" << g << " c=" << c;
    }
  }
}

TEST(EmphasizePool, SuperpositionInVAndM) {
  Tape<D> tape;
  aov::Rng rng(4);
  auto v1 = aov::randn<D>(rng, {16, 5}, 1.0);
  auto v2 = aov::randn<D>(rng, {16, 5}, 1.0);
  auto m1raw = aov::randn<D>(rng, {16}, 1.0);
  auto m2raw = aov::randn<D>(rng, {16}, 1.0);
  auto m1 = aov::sigmoid(tape, m1raw);
  auto m2 = aov::sigmoid(tape, m2raw);

  // Linear in v for fixed m.
  auto qa = aov::emphasize_pool(tape, aov::add(tape, v1, v2), m1, 2, 2);
  auto q1 = aov::emphasize_pool(tape, v1, m1, 2, 2);
  auto q2 = aov::emphasize_pool(tape, v2, m1, 2, 2);
  for (std::size_t i = 0; i < qa.q->numel(); ++i)
    EXPECT_NEAR(qa.q->data[i], q1.q->data[i] + q2.q->data[i], 1e-6);

  // Linear in m for fixed v.
  auto qb = aov::emphasize_pool(tape, v1, aov::add(tape, m1, m2), 2, 2);
  auto q3 = aov::emphasize_pool(tape, v1, m2, 2, 2);
  for (std::size_t i = 0; i < qb.q->numel(); ++i)
    EXPECT_NEAR(qb.q->data[i], q1.q->data[i] + q3.q->data[i], 1e-6);
  for (std::size_t i = 0; i < qb.pooled_m->numel(); ++i)
    EXPECT_NEAR(qb.pooled_m->data[i], q1.pooled_m->data[i] + q3.pooled_m->data[i], 1e-6);
}

TEST(EmphasizePool, GradCheck) {
  aov::Rng rng(5);
  auto v = aov::randn<D>(rng, {9, 4}, 1.0);
  auto m = aov::randn<D>(rng, {9}, 1.0);
  double err = aov::grad_check(
      [](Tape<D>& t, const std::vector<TensorPtr<D>>& in) {
        auto mm = aov::sigmoid(t, in[1]);
        auto out = aov::emphasize_pool(t, in[0], mm, 2, 2);
        return aov::add(t, aov::sum_all(t, aov::mul(t, out.q, out.q)),
                        aov::sum_all(t, out.pooled_m));
      },
      {v, m});
  EXPECT_LT(err, 1e-6);
}

// ---------------------------------------------------------------------------
// qformer_attend
// ---------------------------------------------------------------------------

TEST(QformerAttend, IdenticalValuesPassThrough) {
  auto cfg = tiny_cfg(4, 6, 2);
  cfg.residual = false;
  auto p = aov::ExpertParams<D>::init(cfg, 10);
  p.wo = identity(6);
  Tape<D> tape;
  aov::Rng rng(11);
  // Every token row equal: keys differ from nothing, values all map to u.
  std::vector<double> row(6);
  for (auto& x : row) x = rng.normal();
  auto v = aov::zeros<D>({16, 6});
  for (std::size_t t = 0; t < 16; ++t)
    for (std::size_t k = 0; k < 6; ++k) v->data[t * 6 + k] = row[k];
  auto q = aov::randn<D>(rng, {4, 6}, 1.0);
  auto out = aov::qformer_attend(tape, q, v, p);

  std::vector<double> u(6, 0.0);
  for (std::size_t k = 0; k < 6; ++k)
    for (std::size_t j = 0; j < 6; ++j) u[k] += row[j] * p.wv->data[j * 6 + k];
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t k = 0; k < 6; ++k) EXPECT_NEAR(out->data[r * 6 + k], u[k], 1e-9);
}

TEST(QformerAttend, ZeroQueryWeightsGiveUniformAttention) {
  auto cfg = tiny_cfg(4, 6, 3);
  cfg.residual = false;
  auto p = aov::ExpertParams<D>::init(cfg, 12);
  p.wq = aov::zeros<D>({6, 6}, true);
  p.wo = identity(6);
  Tape<D> tape;
  aov::Rng rng(13);
  auto v = aov::randn<D>(rng, {16, 6}, 1.0);
  auto q = aov::randn<D>(rng, {4, 6}, 1.0);
  auto out = aov::qformer_attend(tape, q, v, p);
  // uniform attention averages the projected values
  std::vector<double> vmean(6, 0.0);
  for (std::size_t t = 0; t < 16; ++t)
    for (std::size_t k = 0; k < 6; ++k) {
      double proj = 0.0;
      for (std::size_t j = 0; j < 6; ++j) proj += v->data[t * 6 + j] * p.wv->data[j * 6 + k];
      vmean[k] += proj / 16.0;
    }
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t k = 0; k < 6; ++k) EXPECT_NEAR(out->data[r * 6 + k], vmean[k], 1e-9);
}

TEST(QformerAttend, HandSoftmaxWeights) {
  aov::ExpertConfig cfg;
  cfg.g = 4;
  cfg.d_enc = 1;
  cfg.d = 1;
  cfg.n_heads = 1;
  cfg.residual = false;
  auto p = aov::ExpertParams<D>::init(cfg, 14);
  p.wq = aov::tensor<D>({1, 1}, {1.0}, true);
  p.wk = aov::tensor<D>({1, 1}, {1.0}, true);
  p.wv = aov::tensor<D>({1, 1}, {1.0}, true);
  p.wo = aov::tensor<D>({1, 1}, {1.0}, true);
  Tape<D> tape;
  const double ln2 = std::log(2.0);
  auto q = aov::tensor<D>({1, 1}, {1.0});
  auto v = aov::tensor<D>({2, 1}, {ln2, 0.0});  // logits (ln 2, 0), scale 1
  auto out = aov::qformer_attend(tape, q, v, p);
  EXPECT_NEAR(out->data[0], (2.0 * ln2 + 1.0 * 0.0) / 3.0, 1e-12);
}

TEST(QformerAttend, RowsStayInValueHull) {
  auto cfg = tiny_cfg(4, 8, 4);
  cfg.residual = false;
  auto p = aov::ExpertParams<D>::init(cfg, 15);
  p.wo = identity(8);
  Tape<D> tape;
  aov::Rng rng(16);
  auto v = aov::randn<D>(rng, {16, 8}, 1.0);
  auto q = aov::randn<D>(rng, {4, 8}, 1.0);
  auto out = aov::qformer_attend(tape, q, v, p);
  // With identity output projection, channel k of each output row is a convex
  // combination of channel k of the projected values.
  for (std::size_t k = 0; k < 8; ++k) {
    double lo = 1e300, hi = -1e300;
    for (std::size_t t = 0; t < 16; ++t) {
      double proj = 0.0;
      for (std::size_t j = 0; j < 8; ++j) proj += v->data[t * 8 + j] * p.wv->data[j * 8 + k];
      lo = std::min(lo, proj);
      hi = std::max(hi, proj);
    }
    for (std::size_t r = 0; r < 4; ++r) {
      EXPECT_GE(out->data[r * 8 + k], lo - 1e-9);
      EXPECT_LE(out->data[r * 8 + k], hi + 1e-9);
    }
  }
}

TEST(QformerAttend, ResidualAddsQueries) {
  auto cfg = tiny_cfg(4, 6, 2);
  auto p = aov::ExpertParams<D>::init(cfg, 17);
  auto cfg_off = cfg;
  cfg_off.residual = false;
  auto p_off = p;
  p_off.cfg = cfg_off;
  Tape<D> tape;
  aov::Rng rng(18);
  auto v = aov::randn<D>(rng, {16, 6}, 1.0);
  auto q = aov::randn<D>(rng, {4, 6}, 1.0);
  auto with = aov::qformer_attend(tape, q, v, p);
  auto without = aov::qformer_attend(tape, q, v, p_off);
  for (std::size_t i = 0; i < with->numel(); ++i)
    EXPECT_NEAR(with->data[i], without->data[i] + q->data[i], 1e-12);
}

TEST(QformerAttend, GradCheck) {
  auto cfg = tiny_cfg(3, 4, 2);
  auto p = aov::ExpertParams<D>::init(cfg, 19);
  aov::Rng rng(20);
  auto v = aov::randn<D>(rng, {9, 4}, 1.0);
  auto q = aov::randn<D>(rng, {4, 4}, 1.0);
  double err = aov::grad_check(
      [&](Tape<D>& t, const std::vector<TensorPtr<D>>& in) {
        auto out = aov::qformer_attend(t, in[0], in[1], p);
        return aov::sum_all(t, aov::sigmoid(t, out));
      },
      {q, v, p.wq, p.wk, p.wv, p.wo});
  EXPECT_LT(err, 1e-6);
}

// ---------------------------------------------------------------------------
// select_tokens
// ---------------------------------------------------------------------------

aov::FeatureBundle selector_bundle(std::uint64_t seed, std::size_t n_crops) {
  aov::SynthConfig s;
  s.n_classes = 1;
  s.images_per_class = 2;
  s.anomaly_fraction = 0.5;
  s.g = 4;
  s.d_enc = 8;
  s.n_crops = n_crops;
  s.patch_size = 2;
  s.seed = seed;
  return aov::synth_generate(s)[0];
}

TEST(SelectTokens, OutputShapes) {
  auto cfg = tiny_cfg();
  auto p = aov::ExpertParams<D>::init(cfg, 30);
  auto b = selector_bundle(31, 3);
  Tape<D> tape;
  auto sig = aov::significance_image(tape, b, p);
  auto sel = aov::select_tokens(tape, b, sig, p);
  ASSERT_EQ(sel.v_s.size(), 3u);
  ASSERT_EQ(sel.pooled_m.size(), 3u);
  for (auto& t : sel.v_s) EXPECT_EQ(t->shape, (aov::Shape{4, 8}));
  for (auto& m : sel.pooled_m) EXPECT_EQ(m->shape, (aov::Shape{4}));
}

TEST(SelectTokens, IdenticalCropsGiveIdenticalSelections) {
  auto cfg = tiny_cfg();
  auto p = aov::ExpertParams<D>::init(cfg, 32);
  auto b = selector_bundle(33, 2);
  b.v_final[1] = b.v_final[0];
  for (auto& level : b.v_levels) level[1] = level[0];
  Tape<D> tape;
  auto sig = aov::significance_image(tape, b, p);
  auto sel = aov::select_tokens(tape, b, sig, p);
  EXPECT_EQ(sel.v_s[0]->data, sel.v_s[1]->data);
  EXPECT_EQ(sel.pooled_m[0]->data, sel.pooled_m[1]->data);
}

TEST(SelectTokens, CropPermutationPermutesOutputs) {
  auto cfg = tiny_cfg();
  auto p = aov::ExpertParams<D>::init(cfg, 34);
  auto b = selector_bundle(35, 3);
  auto swapped = b;
  std::swap(swapped.v_final[1], swapped.v_final[2]);
  // Crop 0 feeds the descriptions, so swapping crops 1 and 2 in the final
  // matrices (maps come from levels, swap those too) swaps the outputs.
  for (auto& level : swapped.v_levels) std::swap(level[1], level[2]);
  Tape<D> tape;
  auto sig_a = aov::significance_image(tape, b, p);
  auto sel_a = aov::select_tokens(tape, b, sig_a, p);
  auto sig_b = aov::significance_image(tape, swapped, p);
  auto sel_b = aov::select_tokens(tape, swapped, sig_b, p);
  EXPECT_EQ(sel_a.v_s[1]->data, sel_b.v_s[2]->data);
  EXPECT_EQ(sel_a.v_s[2]->data, sel_b.v_s[1]->data);
  EXPECT_EQ(sel_a.v_s[0]->data, sel_b.v_s[0]->data);
}

}  // namespace
