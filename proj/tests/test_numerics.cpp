#include <gtest/gtest.h>

#include <random>

#include "moralmech/error.hpp"
#include "moralmech/numerics.hpp"
#include "moralmech/stats.hpp"

using namespace moralmech;
using namespace moralmech::stats;

namespace {

Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, scale);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = nd(rng);
  return m;
}

void expect_gradients_match(const TapeFunction& f, const std::vector<Matrix>& params, double tol = 1e-6) {
  const GradCheckResult r = finite_difference_check(f, params);
  EXPECT_LT(r.max_relative_error, tol) << "param " << r.worst_param << " index " << r.worst_index << " analytic "
                                       << r.analytic << " numeric " << r.numeric;
}

}  // namespace

TEST(Kernels, SoftmaxRowsSumToOneAndIgnoreShift) {
  Matrix x = random_matrix(4, 7, 1, 3.0);
  const Matrix p = softmax_rows(x);
  for (Eigen::Index r = 0; r < p.rows(); ++r) EXPECT_NEAR(p.row(r).sum(), 1.0, 1e-14);
  Matrix shifted = x.array() + 1000.0;
  EXPECT_LT((softmax_rows(shifted) - p).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Kernels, LayerNormRowsHaveZeroMeanUnitVariance) {
  const Matrix x = random_matrix(5, 16, 2, 4.0);
  const RowVector gain = RowVector::Ones(16), bias = RowVector::Zero(16);
  const Matrix y = layer_norm(x, gain, bias);
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    EXPECT_NEAR(y.row(r).mean(), 0.0, 1e-12);
    EXPECT_NEAR(variance(y.row(r)), 1.0, 1e-4);
  }
}

TEST(Kernels, SigmoidIsStableAtExtremes) {
  EXPECT_EQ(sigmoid(-800.0), 0.0);
  EXPECT_EQ(sigmoid(800.0), 1.0);
  EXPECT_DOUBLE_EQ(sigmoid(0.0), 0.5);
  EXPECT_NEAR(sigmoid(2.0) + sigmoid(-2.0), 1.0, 4e-16);
}

TEST(Kernels, GeluDerivativeMatchesDifferences) {
  for (double x : {-3.0, -0.7, 0.0, 0.4, 2.5}) {
    const double h = 1e-6;
    EXPECT_NEAR(gelu_derivative(x), (gelu(x + h) - gelu(x - h)) / (2 * h), 1e-8);
  }
}

TEST(Tape, GradOfUnusedVariableIsZero) {
  Tape t;
  Var a = t.variable(Matrix::Ones(2, 2));
  Var b = t.variable(Matrix::Ones(3, 1));
  Var s = sum(a);
  t.backward(s);
  EXPECT_TRUE(t.grad(a).isOnes());
  EXPECT_TRUE(t.grad(b).isZero());
}

TEST(Tape, ForeignVarIsRejected) {
  Tape t1, t2;
  Var a = t1.variable(Matrix::Ones(1, 1));
  EXPECT_THROW(t2.grad(a), std::invalid_argument);
}

TEST(Tape, BackwardTwiceDiscardsOldGradients) {
  Tape t;
  Var a = t.variable(Matrix::Constant(1, 1, 3.0));
  Var y = hadamard(a, a);
  t.backward(y);
  t.backward(y);
  EXPECT_DOUBLE_EQ(t.grad(a)(0, 0), 6.0);
}

TEST(GradCheck, MatmulFamily) {
  const std::vector<Matrix> p = {random_matrix(3, 4, 1), random_matrix(4, 2, 2), random_matrix(5, 4, 3)};
  expect_gradients_match(
      [](Tape& t, std::span<const Var> v) {
        Var ab = matmul(v[0], v[1]);
        Var abt = matmul_bt(v[0], v[2], 0.7);
        return add(sum(hadamard(ab, ab)), sum(abt));
      },
      p);
}

TEST(GradCheck, ElementwiseAndRowOps) {
  const std::vector<Matrix> p = {random_matrix(4, 3, 4), random_matrix(1, 3, 5), random_matrix(4, 3, 6)};
  expect_gradients_match(
      [](Tape& t, std::span<const Var> v) {
        Var x = add_row(v[0], v[1]);
        Var y = mul_row(gelu(x), v[1], 2);
        Var z = sub(sigmoid(y), scale(v[2], 0.3));
        return mean(hadamard(z, z));
      },
      p);
}

TEST(GradCheck, SoftmaxAndLayerNorm) {
  const std::vector<Matrix> p = {random_matrix(3, 5, 7), random_matrix(1, 5, 8), random_matrix(1, 5, 9),
                                 random_matrix(3, 5, 10)};
  expect_gradients_match(
      [](Tape& t, std::span<const Var> v) {
        Var n = layer_norm(v[0], v[1], v[2]);
        Var s = softmax_rows(n);
        return sum(hadamard(s, v[3]));
      },
      p);
}

TEST(GradCheck, StructuralOps) {
  const std::vector<Matrix> p = {random_matrix(6, 4, 11), random_matrix(6, 2, 12), random_matrix(5, 3, 13)};
  expect_gradients_match(
      [](Tape& t, std::span<const Var> v) {
        const std::vector<Var> parts = {v[0], v[1]};
        Var h = hcat(parts);
        Var b = block(h, 1, 2, 3, 3);
        Var r = strided_rows(h, 0, 2, 3);
        const std::vector<Var> rows = {b, block(r, 0, 0, 3, 3)};
        Var stacked = vcat(rows);
        const std::vector<int> idx = {4, 0, 0, 2};
        Var g = gather_rows(v[2], idx);
        return add(sum(hadamard(stacked, stacked)), sum(hadamard(g, g)));
      },
      p);
}

TEST(GradCheck, BinaryCrossEntropy) {
  const std::vector<Matrix> p = {random_matrix(6, 1, 14, 2.0)};
  const std::vector<double> targets = {1, 0, 0, 1, 1, 0};
  expect_gradients_match([&](Tape& t, std::span<const Var> v) { return bce_with_logits(v[0], targets); }, p);
}

TEST(GradCheck, RejectsBadStepAndNonFiniteFunctions) {
  const std::vector<Matrix> p = {Matrix::Ones(1, 1)};
  auto f = [](Tape& t, std::span<const Var> v) { return sum(v[0]); };
  EXPECT_THROW(finite_difference_check(f, p, 1e-2), std::invalid_argument);
  auto bad = [](Tape& t, std::span<const Var> v) {
    return t.push(Matrix::Constant(1, 1, std::nan("")), true, [v](Tape& tape, const Matrix& g) { tape.accumulate(v[0], g); });
  };
  EXPECT_THROW(finite_difference_check(bad, p), NumericalError);
}

TEST(Stats, RanksAverageTies) {
  Eigen::VectorXd x(5);
  x << 3, 1, 3, 2, 5;
  const Eigen::VectorXd r = ranks(x);
  EXPECT_DOUBLE_EQ(r(1), 1);
  EXPECT_DOUBLE_EQ(r(3), 2);
  EXPECT_DOUBLE_EQ(r(0), 3.5);
  EXPECT_DOUBLE_EQ(r(2), 3.5);
  EXPECT_DOUBLE_EQ(r(4), 5);
}

TEST(Stats, SpearmanOfMonotoneMapIsOne) {
  Eigen::VectorXd a = Eigen::VectorXd::LinSpaced(20, -2, 3);
  Eigen::VectorXd b = a.array().exp();
  EXPECT_NEAR(spearman(a, b), 1.0, 1e-15);
  EXPECT_NEAR(spearman(a, Eigen::VectorXd(-b)), -1.0, 1e-15);
}

TEST(Stats, ConstantDataHasExactlyZeroVariance) {
  // 0.3 is not representable, so a naive mean leaves rounding residue.
  const Eigen::VectorXd a = Eigen::VectorXd::Constant(200, 0.3);
  EXPECT_EQ(variance(a), 0.0);
  EXPECT_EQ(pearson(a, Eigen::VectorXd::LinSpaced(200, 0, 1)), 0.0);
  Eigen::VectorXd b(4);
  b << 1e9 + 1, 1e9 + 2, 1e9 + 3, 1e9 + 4;
  EXPECT_DOUBLE_EQ(variance(b), 1.25);
}

TEST(Stats, PearsonOfConstantIsZero) {
  Eigen::VectorXd a = Eigen::VectorXd::Constant(10, 2.0);
  Eigen::VectorXd b = Eigen::VectorXd::LinSpaced(10, 0, 1);
  EXPECT_EQ(pearson(a, b), 0.0);
  EXPECT_EQ(variance(a), 0.0);
}
