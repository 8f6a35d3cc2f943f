#include <algorithm>
#include <random>

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include "dcov/select.hpp"
#include "test_util.hpp"

using namespace dcov;
using dcov::testing::random_coords;
using dcov::testing::random_field;

namespace {

Eigen::MatrixXd entrywise_cov(const std::vector<NormalizedCoord>& xs, const KernelField& field,
                              const GPHyperparams& hyper) {
  const auto n = static_cast<Eigen::Index>(xs.size());
  Eigen::MatrixXd k(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      k(i, j) = nonstationary_cov(xs[i], decode_kernel_matrix(sample_field(field, xs[i])), xs[j],
                                  decode_kernel_matrix(sample_field(field, xs[j])), hyper);
  return k;
}

// Conditional variances of every candidate given noisy observations at `chosen`,
// recomputed from scratch with an LU solve.
Eigen::VectorXd dense_conditional_var(const Eigen::MatrixXd& k, const std::vector<std::size_t>& chosen,
                                      double noise) {
  const auto n = k.rows();
  const auto s = static_cast<Eigen::Index>(chosen.size());
  if (s == 0) return k.diagonal();
  Eigen::MatrixXd kss(s, s), ksf(s, n);
  for (Eigen::Index a = 0; a < s; ++a) {
    for (Eigen::Index b = 0; b < s; ++b) kss(a, b) = k(chosen[a], chosen[b]);
    ksf.row(a) = k.row(chosen[a]);
  }
  kss.diagonal().array() += noise;
  const Eigen::MatrixXd sol = Eigen::FullPivLU<Eigen::MatrixXd>(kss).solve(ksf);
  return k.diagonal() - (ksf.cwiseProduct(sol)).colwise().sum().transpose();
}

}  // namespace

TEST(Select, AppendToEmptyGivesScalarFactor) {
  std::mt19937_64 rng(3);
  const KernelField field = random_field(rng, 5, 4);
  const GPHyperparams hyper{1.7, 0.03};
  const auto xs = random_coords(rng, 6);
  const SelectionContext ctx(xs, field, hyper);
  SelectionState st = SelectionState::initial(ctx);
  chol_append(st, ctx, 2);
  ASSERT_EQ(st.chol_rows.size(), 1u);
  EXPECT_DOUBLE_EQ(st.chol_rows[0](0), std::sqrt(1.7 / 2 + 0.03));
}

TEST(Select, FirstPickIsLowestIndexAmongEqualPriorVariance) {
  // Prior variance is constant, so the first pick must be index 0.
  std::mt19937_64 rng(5);
  const KernelField field = random_field(rng, 4, 4);
  const auto xs = random_coords(rng, 30);
  const auto res = greedy_select(field, GPHyperparams{}, xs, SelectionStop::after(1));
  ASSERT_EQ(res.order.size(), 1u);
  EXPECT_EQ(res.order[0], 0u);
  EXPECT_DOUBLE_EQ(res.variance_before[0], 0.5);
}

TEST(Select, ThresholdAtMaxPriorSelectsNothing) {
  std::mt19937_64 rng(6);
  const KernelField field = random_field(rng, 4, 4);
  const auto xs = random_coords(rng, 30);
  const GPHyperparams hyper{2.0, 0.01};
  EXPECT_TRUE(greedy_select(field, hyper, xs, SelectionStop::below(1.0)).order.empty());
  EXPECT_TRUE(greedy_select(field, hyper, xs, SelectionStop::below(5.0)).order.empty());
  EXPECT_FALSE(greedy_select(field, hyper, xs, SelectionStop::below(0.99)).order.empty());
}

TEST(Select, ThresholdStopLeavesAllVariancesAtOrBelow) {
  std::mt19937_64 rng(7);
  const KernelField field = random_field(rng, 6, 6);
  const auto xs = random_coords(rng, 80);
  const auto res = greedy_select(field, GPHyperparams{}, xs, SelectionStop::below(0.1));
  ASSERT_FALSE(res.order.empty());
  std::vector<bool> chosen(xs.size(), false);
  for (auto i : res.order) chosen[i] = true;
  for (std::size_t j = 0; j < xs.size(); ++j)
    if (!chosen[j]) EXPECT_LE(res.final_variance(static_cast<Eigen::Index>(j)), 0.1);
  for (double v : res.variance_before) EXPECT_GT(v, 0.1);
}

TEST(Select, CountZeroAndBounds) {
  std::mt19937_64 rng(8);
  const KernelField field = random_field(rng, 3, 3);
  const auto xs = random_coords(rng, 5);
  EXPECT_TRUE(greedy_select(field, GPHyperparams{}, xs, SelectionStop::after(0)).order.empty());
  EXPECT_EQ(greedy_select(field, GPHyperparams{}, xs, SelectionStop::after(5)).order.size(), 5u);
  EXPECT_THROW(greedy_select(field, GPHyperparams{}, xs, SelectionStop::after(6)), DomainError);
  EXPECT_THROW(greedy_select(field, GPHyperparams{}, {}, SelectionStop::after(0)), DomainError);
}

TEST(Select, AppendRejectsDuplicateAndOutOfRange) {
  std::mt19937_64 rng(9);
  const KernelField field = random_field(rng, 3, 3);
  const SelectionContext ctx(random_coords(rng, 4), field, GPHyperparams{});
  SelectionState st = SelectionState::initial(ctx);
  chol_append(st, ctx, 1);
  EXPECT_THROW(chol_append(st, ctx, 1), DomainError);
  EXPECT_THROW(chol_append(st, ctx, 4), DomainError);
}

TEST(Select, PerStepVariancesMatchDenseRecompute) {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    std::mt19937_64 rng(100 + seed);
    const KernelField field = random_field(rng, 8, 6);
    const GPHyperparams hyper{1.3, 0.02, Smoothness::ThreeHalves};
    const auto xs = random_coords(rng, 120);
    const Eigen::MatrixXd k = entrywise_cov(xs, field, hyper);
    const SelectionContext ctx(xs, field, hyper);
    SelectionState st = SelectionState::initial(ctx);
    for (int step = 0; step < 30; ++step) {
      const auto best = argmax_variance(st);
      ASSERT_TRUE(best);
      chol_append(st, ctx, *best);
      const Eigen::VectorXd oracle = dense_conditional_var(k, st.chosen, hyper.sigma_n_sq);
      ASSERT_LE((st.var - oracle).cwiseAbs().maxCoeff(), 1e-8) << "seed " << seed << " step " << step;
    }
  }
}

TEST(Select, FactorMatchesDenseCholesky) {
  std::mt19937_64 rng(11);
  const KernelField field = random_field(rng, 5, 5);
  const GPHyperparams hyper{1.0, 0.05};
  const auto xs = random_coords(rng, 40);
  const auto res = greedy_select(field, hyper, xs, SelectionStop::after(12));
  const SelectionContext ctx(xs, field, hyper);
  SelectionState st = SelectionState::initial(ctx);
  for (auto i : res.order) chol_append(st, ctx, i);
  const Eigen::MatrixXd l = st.chol_matrix();
  const Eigen::MatrixXd k = entrywise_cov(xs, field, hyper);
  Eigen::MatrixXd kss(12, 12);
  for (int a = 0; a < 12; ++a)
    for (int b = 0; b < 12; ++b) kss(a, b) = k(res.order[a], res.order[b]);
  kss.diagonal().array() += hyper.sigma_n_sq;
  EXPECT_LE((l * l.transpose() - kss).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_TRUE((l.diagonal().array() > 0).all());
  EXPECT_DOUBLE_EQ(l(0, 1), 0.0);
}

TEST(Select, AppendOrderIsAPermutation) {
  std::mt19937_64 rng(12);
  const KernelField field = random_field(rng, 4, 4);
  const GPHyperparams hyper{0.8, 0.01};
  const SelectionContext ctx(random_coords(rng, 10), field, hyper);
  SelectionState ab = SelectionState::initial(ctx);
  chol_append(ab, ctx, 3);
  chol_append(ab, ctx, 7);
  SelectionState ba = SelectionState::initial(ctx);
  chol_append(ba, ctx, 7);
  chol_append(ba, ctx, 3);
  const Eigen::MatrixXd lab = ab.chol_matrix(), lba = ba.chol_matrix();
  Eigen::Matrix2d perm;
  perm << 0, 1, 1, 0;
  const Eigen::MatrixXd kab = lab * lab.transpose();
  const Eigen::MatrixXd kba = perm * (lba * lba.transpose()) * perm.transpose();
  EXPECT_LE((kab - kba).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_LE((ab.var - ba.var).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Select, SelfConditioningBound) {
  std::mt19937_64 rng(13);
  const KernelField field = random_field(rng, 4, 4);
  const GPHyperparams hyper{3.0, 0.004};
  const SelectionContext ctx(random_coords(rng, 25), field, hyper);
  SelectionState st = SelectionState::initial(ctx);
  for (std::size_t i : {4u, 0u, 19u, 7u, 11u}) {
    chol_append(st, ctx, i);
    EXPECT_LE(st.var(static_cast<Eigen::Index>(i)), hyper.sigma_n_sq + 1e-8);
  }
}

TEST(Select, VariancesMonotoneNonIncreasing) {
  std::mt19937_64 rng(14);
  const KernelField field = random_field(rng, 6, 6);
  const SelectionContext ctx(random_coords(rng, 200), field, GPHyperparams{});
  SelectionState st = SelectionState::initial(ctx);
  Eigen::VectorXd prev = st.var;
  double prev_max = prev.maxCoeff();
  for (int step = 0; step < 50; ++step) {
    const auto best = argmax_variance(st);
    const double picked = st.var(static_cast<Eigen::Index>(*best));
    EXPECT_LE(picked, prev_max + 1e-10);
    prev_max = picked;
    chol_append(st, ctx, *best);
    EXPECT_TRUE(((st.var - prev).array() <= 1e-10).all());
    EXPECT_TRUE((st.var.array() >= 0).all());
    prev = st.var;
  }
}

TEST(Select, DuplicateCandidatesStayFactorizable) {
  std::mt19937_64 rng(15);
  const KernelField field = random_field(rng, 3, 3);
  std::vector<NormalizedCoord> xs(6, NormalizedCoord{0.1, -0.2});
  const auto res = greedy_select(field, GPHyperparams{1.0, 1e-9}, xs, SelectionStop::after(6));
  EXPECT_EQ(res.order.size(), 6u);
}

TEST(Select, DeterministicAcrossThreadCounts) {
  std::mt19937_64 rng(16);
  const KernelField field = random_field(rng, 7, 5);
  const auto xs = grid_coords(7, 5, 1);
  const int saved = num_threads();
  set_num_threads(1);
  const auto a = greedy_select(field, GPHyperparams{}, xs, SelectionStop::after(20));
  set_num_threads(4);
  const auto b = greedy_select(field, GPHyperparams{}, xs, SelectionStop::after(20));
  set_num_threads(saved);
  EXPECT_EQ(a.order, b.order);
  EXPECT_EQ(a.variance_before, b.variance_before);
  EXPECT_TRUE((a.final_variance.array() == b.final_variance.array()).all());
}
