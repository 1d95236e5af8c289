#include "oracles/oracles.hpp"
#include "upcsc/numerics.hpp"
#include "upcsc/random.hpp"

#include <gtest/gtest.h>

using namespace upcsc;

namespace {

Matrix mat(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.begin()->size()));
  Eigen::Index i = 0;
  for (const auto& r : rows) {
    Eigen::Index j = 0;
    for (double v : r) m(i, j++) = v;
    ++i;
  }
  return m;
}

Matrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng, double sigma = 1.0) {
  std::normal_distribution<double> n(0.0, sigma);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

// Single-matrix parameter set for optimizer and finite-difference checks.
struct Scalars {
  Matrix theta;
  Matrix phi;

  std::vector<ParameterRef<double>> parameters() {
    return {{ParamGroup::Backbone, &theta}, {ParamGroup::Projector, &phi}};
  }
  std::vector<ConstParameterRef<double>> parameters() const {
    return {{ParamGroup::Backbone, &theta}, {ParamGroup::Projector, &phi}};
  }
};

}  // namespace

TEST(Matmul, IdentityLeavesOperandUnchanged) {
  EXPECT_EQ(matmul(mat({{1, 0}, {0, 1}}), mat({{3, 4}, {5, 6}})), mat({{3, 4}, {5, 6}}));
}

TEST(Matmul, RowTimesColumn) { EXPECT_EQ(matmul(mat({{1, 2}}), mat({{3}, {4}})), mat({{11}})); }

TEST(Matmul, MatchesTripleLoopOracle) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix a = random_matrix(5, 7, rng);
    const Matrix b = random_matrix(7, 3, rng);
    EXPECT_LT((matmul(a, b) - oracle::naive_matmul(a, b)).cwiseAbs().maxCoeff(), 1e-13);
  }
}

TEST(Matmul, DimensionMismatchThrows) { EXPECT_THROW(matmul(Matrix(2, 3), Matrix(2, 3)), ShapeError); }

TEST(Softmax, SymmetricRowIsHalfHalf) {
  const Matrix s = softmax_rows(mat({{0, 0}}));
  EXPECT_DOUBLE_EQ(s(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(s(0, 1), 0.5);
}

TEST(Softmax, LargeLogitDoesNotOverflow) {
  const Matrix s = softmax_rows(mat({{1000, 0}}));
  EXPECT_TRUE(all_finite(s));
  EXPECT_NEAR(s(0, 0), 1.0, 1e-15);
  EXPECT_NEAR(s(0, 1), 0.0, 1e-15);
}

TEST(Softmax, MatchesExtendedPrecisionValues) {
  const Matrix s = softmax_rows(mat({{1, 2, 3}}));
  EXPECT_NEAR(s(0, 0), 0.090030573170380457998, 1e-12);
  EXPECT_NEAR(s(0, 1), 0.24472847105479765247, 1e-12);
  EXPECT_NEAR(s(0, 2), 0.66524095577482188953, 1e-12);
}

TEST(Softmax, EmptyMatrixThrows) { EXPECT_THROW(softmax_rows(Matrix(0, 3)), ShapeError); }

TEST(Softmax, RowsAreProbabilityVectorsOnRandomMatrices) {
  Rng rng(5);
  std::uniform_int_distribution<int> dim(1, 12);
  for (int trial = 0; trial < 1000; ++trial) {
    const Matrix s = softmax_rows(random_matrix(dim(rng), dim(rng) + 1, rng, 4.0));
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
      ASSERT_NEAR(s.row(i).sum(), 1.0, 1e-12);
      ASSERT_GT(s.row(i).minCoeff(), 0.0);
      ASSERT_LT(s.row(i).maxCoeff(), 1.0);
    }
  }
}

TEST(Softmax, LogSoftmaxAgreesWithLogOfSoftmax) {
  Rng rng(6);
  const Matrix m = random_matrix(6, 5, rng);
  EXPECT_LT((log_softmax_rows(m) - softmax_rows(m).array().log().matrix()).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(Normalize, ThreeFourFive) {
  const Matrix y = l2_normalize_rows(mat({{3, 4}}));
  EXPECT_NEAR(y(0, 0), 0.6, 1e-15);
  EXPECT_NEAR(y(0, 1), 0.8, 1e-15);
}

TEST(Normalize, UnitRowUnchanged) { EXPECT_EQ(l2_normalize_rows(mat({{0, 1, 0}})), mat({{0, 1, 0}})); }

TEST(Normalize, ZeroRowIsDegenerate) { EXPECT_THROW(l2_normalize_rows(mat({{1, 1}, {0, 0}})), DegenerateInputError); }

TEST(Normalize, IdempotentAndUnitNorm) {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const Matrix once = l2_normalize_rows(random_matrix(4, 6, rng, 3.0));
    const Matrix twice = l2_normalize_rows(once);
    ASSERT_LT((once - twice).cwiseAbs().maxCoeff(), 1e-12);
    for (Eigen::Index i = 0; i < once.rows(); ++i) ASSERT_NEAR(once.row(i).norm(), 1.0, 1e-12);
  }
}

TEST(Normalize, BackwardMatchesFiniteDifferences) {
  Rng rng(8);
  const Matrix u = random_matrix(3, 4, rng);
  const Matrix g = random_matrix(3, 4, rng);
  const Matrix du = l2_normalize_rows_backward(u, l2_normalize_rows(u), g);
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < u.size(); ++i) {
    Matrix up = u, down = u;
    up.data()[i] += h;
    down.data()[i] -= h;
    const double numeric = (l2_normalize_rows(up).cwiseProduct(g).sum() - l2_normalize_rows(down).cwiseProduct(g).sum()) / (2 * h);
    EXPECT_NEAR(du.data()[i], numeric, 1e-8);
  }
}

TEST(CosineLr, Endpoints) {
  const LrSchedule s{0.003, 1000};
  EXPECT_DOUBLE_EQ(cosine_lr(s, 0), 0.003);
  EXPECT_NEAR(cosine_lr(s, 500), 0.0015, 1e-15);
  EXPECT_NEAR(cosine_lr(s, 1000), 0.0, 1e-18);
}

TEST(CosineLr, MonotoneNonIncreasing) {
  const LrSchedule s{0.01, 777};
  for (std::size_t t = 1; t <= s.total_steps; ++t) ASSERT_LE(cosine_lr(s, t), cosine_lr(s, t - 1));
}

TEST(CosineLr, RejectsInvalidArguments) {
  EXPECT_THROW(cosine_lr({0.003, 10}, 11), std::out_of_range);
  EXPECT_THROW(cosine_lr({0.0, 10}, 0), std::invalid_argument);
  EXPECT_THROW(cosine_lr({0.003, 0}, 0), std::invalid_argument);
}

TEST(Sgd, ZeroGradientLeavesParamsUnchanged) {
  Rng rng(9);
  Scalars p{random_matrix(2, 3, rng), random_matrix(1, 4, rng)};
  const Scalars q = sgd_step(p, zeros_like(p), {0.1, 0.1, 0.1});
  EXPECT_EQ(q.theta, p.theta);
  EXPECT_EQ(q.phi, p.phi);
}

TEST(Sgd, ScalarUpdate) {
  Scalars p{mat({{1.0}}), mat({{1.0}})};
  const Scalars g{mat({{2.0}}), mat({{2.0}})};
  const Scalars q = sgd_step(p, g, {0.1, 0.5, 0.25});
  EXPECT_DOUBLE_EQ(q.theta(0, 0), 0.8);  // backbone group
  EXPECT_DOUBLE_EQ(q.phi(0, 0), 0.5);    // projector group
}

TEST(Sgd, ZeroRateLeavesParamsUnchanged) {
  Rng rng(10);
  Scalars p{random_matrix(2, 2, rng), random_matrix(2, 2, rng)};
  const Scalars g{random_matrix(2, 2, rng), random_matrix(2, 2, rng)};
  const Scalars q = sgd_step(p, g, {0.0, 0.0, 0.0});
  EXPECT_EQ(q.theta, p.theta);
  EXPECT_EQ(q.phi, p.phi);
}

TEST(Sgd, ShapeMismatchThrows) {
  Scalars p{Matrix::Zero(2, 2), Matrix::Zero(1, 1)};
  const Scalars g{Matrix::Zero(2, 3), Matrix::Zero(1, 1)};
  EXPECT_THROW(sgd_step(p, g, {0.1, 0.1, 0.1}), ShapeError);
}

TEST(FiniteDiff, Quadratic) {
  EXPECT_NEAR(finite_diff_derivative([](double t) { return t * t; }, 3.0, 1e-5), 6.0, 1e-6);
  const Scalars p{mat({{3.0}}), mat({{-1.0}})};
  const Scalars g = finite_diff_gradient(
      [](const Scalars& s) { return s.theta(0, 0) * s.theta(0, 0) + 5.0 * s.phi(0, 0); }, p, 1e-5);
  EXPECT_NEAR(g.theta(0, 0), 6.0, 1e-6);
  EXPECT_NEAR(g.phi(0, 0), 5.0, 1e-6);
}

TEST(FiniteDiff, ConstantGivesZeroGradient) {
  Rng rng(12);
  const Scalars p{random_matrix(3, 3, rng), random_matrix(2, 2, rng)};
  const Scalars g = finite_diff_gradient([](const Scalars&) { return 4.2; }, p, 1e-5);
  EXPECT_EQ(g.theta.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(g.phi.cwiseAbs().maxCoeff(), 0.0);
}

TEST(FiniteDiff, RelativeErrorUsesFloor) {
  const Scalars a{mat({{1e-10}}), mat({{1.0}})};
  const Scalars b{mat({{2e-10}}), mat({{1.0}})};
  EXPECT_NEAR(max_relative_error(a, b), 1e-10 / 1e-8, 1e-15);
}

TEST(Seeds, DerivedSeedsArePureAndDistinct) {
  EXPECT_EQ(derive_seed({1, 2, 3}), derive_seed({1, 2, 3}));
  EXPECT_NE(derive_seed({1, 2, 3}), derive_seed({1, 3, 2}));
  EXPECT_NE(derive_seed({0}), derive_seed({0, 0}));
}
