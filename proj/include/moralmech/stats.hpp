#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace moralmech::stats {

/// Deviations from the mean, computed on data shifted by its first element so
/// that a constant input gives exactly zero.
template <typename Derived>
auto centered(const Eigen::MatrixBase<Derived>& x) {
  const auto shifted = (x.array() - x.coeff(0)).eval();
  return (shifted - shifted.mean()).eval();
}

/// Population variance (divides by n).
template <typename Derived>
typename Derived::Scalar variance(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  if (x.size() == 0) return Scalar(0);
  return centered(x).square().sum() / Scalar(x.size());
}

/// Pearson correlation; returns 0 when either input has zero variance.
template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar pearson(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b) {
  using Scalar = typename DerivedA::Scalar;
  if (a.size() == 0) return Scalar(0);
  const auto ca = centered(a);
  const auto cb = centered(b);
  const Scalar saa = ca.square().sum();
  const Scalar sbb = cb.square().sum();
  if (saa <= Scalar(0) || sbb <= Scalar(0)) return Scalar(0);
  return std::clamp((ca * cb).sum() / std::sqrt(saa * sbb), Scalar(-1), Scalar(1));
}

/// Average ranks (1-based), ties share the mean of their positions.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> ranks(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  const Eigen::Index n = x.size();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index(0));
  std::stable_sort(order.begin(), order.end(), [&x](Eigen::Index i, Eigen::Index j) { return x(i) < x(j); });
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> r(n);
  for (Eigen::Index i = 0; i < n;) {
    Eigen::Index j = i;
    while (j + 1 < n && x(order[std::size_t(j + 1)]) == x(order[std::size_t(i)])) ++j;
    const Scalar avg = Scalar(i + j) / Scalar(2) + Scalar(1);
    for (Eigen::Index k = i; k <= j; ++k) r(order[std::size_t(k)]) = avg;
    i = j + 1;
  }
  return r;
}

template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar spearman(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b) {
  return pearson(ranks(a), ranks(b));
}

inline Eigen::VectorXd as_vector(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), Eigen::Index(v.size()));
}

}  // namespace moralmech::stats
