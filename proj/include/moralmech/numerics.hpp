#pragma once

#include <Eigen/Core>

#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <numbers>
#include <span>
#include <vector>

namespace moralmech {

/// Dense row-major matrix; every tensor in the model is two-dimensional.
template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowVectorX = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using Matrix = MatrixX<double>;
using RowVector = RowVectorX<double>;

inline constexpr double kLayerNormEps = 1e-5;

// ---------------------------------------------------------------------------
// Stateless kernels. These work on any Eigen expression and are shared by the
// recorded ops below and by code that only needs forward values.
// ---------------------------------------------------------------------------

template <std::floating_point Scalar>
Scalar gelu(Scalar x) {
  return Scalar(0.5) * x * (Scalar(1) + std::erf(x * Scalar(0.5 * std::numbers::sqrt2)));
}

/// d/dx of the exact (erf) GELU: Phi(x) + x * phi(x).
template <std::floating_point Scalar>
Scalar gelu_derivative(Scalar x) {
  const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(x * Scalar(0.5 * std::numbers::sqrt2)));
  const Scalar pdf = std::exp(Scalar(-0.5) * x * x) * Scalar(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
  return cdf + x * pdf;
}

template <std::floating_point Scalar>
Scalar sigmoid(Scalar x) {
  if (x >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

template <typename Derived>
auto gelu(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  return x.unaryExpr([](Scalar v) { return gelu(v); }).eval();
}

template <typename Derived>
auto sigmoid(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  return x.unaryExpr([](Scalar v) { return sigmoid(v); }).eval();
}

/// Row-wise softmax with the row maximum subtracted before exponentiation.
template <typename Derived>
auto softmax_rows(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  MatrixX<Scalar> out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Scalar m = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - m).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

/// Normalizes each row to zero mean and unit (biased) variance, then applies
/// the per-column affine transform `gain`, `bias`.
template <typename Derived, typename GainDerived, typename BiasDerived>
auto layer_norm(const Eigen::MatrixBase<Derived>& x, const Eigen::MatrixBase<GainDerived>& gain,
                const Eigen::MatrixBase<BiasDerived>& bias, typename Derived::Scalar eps = kLayerNormEps) {
  using Scalar = typename Derived::Scalar;
  MatrixX<Scalar> out(x.rows(), x.cols());
  const Scalar n = Scalar(x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Scalar mean = x.row(r).sum() / n;
    const auto centered = (x.row(r).array() - mean).eval();
    const Scalar var = centered.square().sum() / n;
    const Scalar inv_std = Scalar(1) / std::sqrt(var + eps);
    out.row(r) = (centered * inv_std * gain.array() + bias.array()).matrix();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reverse-mode tape.
// ---------------------------------------------------------------------------

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
/// owning tape is alive.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  Tape* tape() const { return tape_; }
  std::size_t index() const { return index_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t index) : tape_(tape), index_(index) {}

  Tape* tape_ = nullptr;
  std::size_t index_ = 0;
};

/// Append-only record of a computation. Each node stores its forward value
/// and a backward rule that scatters its output gradient into its operands.
/// `backward` walks the nodes in strict reverse order of recording.
///
/// A tape is single-threaded. Separate tapes may be used concurrently.
class Tape {
 public:
  /// Receives the tape and the gradient flowing into the node.
  using BackwardFn = std::function<void(Tape&, const Matrix&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that never receives a gradient.
  Var constant(Matrix value);
  /// Leaf that is a gradient target (a parameter or an input of interest).
  Var variable(Matrix value);

  /// Records an op. `requires_grad` should be true when any operand needs a
  /// gradient; `backward` may be empty for such nodes only if they are leaves.
  Var push(Matrix value, bool requires_grad, BackwardFn backward);

  const Matrix& value(Var v) const;
  bool requires_grad(Var v) const;

  /// Adds `delta` into the gradient of `v` when `v` requires one.
  template <typename Derived>
  void accumulate(Var v, const Eigen::MatrixBase<Derived>& delta) {
    Node& node = nodes_[v.index()];
    if (!node.requires_grad) return;
    if (!node.has_grad) {
      node.grad = delta;
      node.has_grad = true;
    } else {
      node.grad += delta;
    }
  }

  /// Mutable gradient block of `v`, zero-initialized on first access. Used by
  /// ops that scatter into a sub-block.
  Matrix& grad_buffer(Var v);

  /// Seeds `output` with `seed` and propagates to every recorded node. Any
  /// gradients from an earlier call are discarded first.
  void backward(Var output, const Matrix& seed);
  /// Shorthand for a 1x1 output seeded with 1.
  void backward(Var output);

  /// Gradient of the last backward output with respect to `v`. Nodes that
  /// received no gradient report zeros. Throws std::invalid_argument if `v`
  /// does not belong to this tape.
  const Matrix& grad(Var v);

  std::size_t size() const { return nodes_.size(); }
  bool owns(Var v) const { return v.tape() == this && v.index() < nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    BackwardFn backward;
    bool requires_grad = false;
    bool has_grad = false;
  };

  void check(Var v) const;

  std::vector<Node> nodes_;
};

// Recorded ops. Operands must live on the same tape.

Var matmul(Var a, Var b);
/// alpha * a * b^T
Var matmul_bt(Var a, Var b, double alpha = 1.0);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var hadamard(Var a, Var b);
Var scale(Var a, double alpha);
/// Adds a 1 x n row to every row of `a`.
Var add_row(Var a, Var row);
/// Multiplies rows of `a` elementwise by the 1 x n `row`. With stride > 1
/// only rows whose index is a multiple of `stride` are scaled; the rest pass
/// through unchanged.
Var mul_row(Var a, Var row, Eigen::Index stride = 1);
Var gelu(Var x);
Var sigmoid(Var x);
Var softmax_rows(Var x);
Var layer_norm(Var x, Var gain, Var bias, double eps = kLayerNormEps);
Var block(Var x, Eigen::Index row, Eigen::Index col, Eigen::Index rows, Eigen::Index cols);
/// Rows `start, start + stride, ...` (count rows in total).
Var strided_rows(Var x, Eigen::Index start, Eigen::Index stride, Eigen::Index count);
Var hcat(std::span<const Var> parts);
Var vcat(std::span<const Var> parts);
/// Row i of the result is row indices[i] of `table`.
Var gather_rows(Var table, std::span<const int> indices);
/// 1x1 sum of all entries.
Var sum(Var x);
Var mean(Var x);
/// Mean binary cross-entropy of n x 1 logits against 0/1 targets.
Var bce_with_logits(Var logits, std::span<const double> targets);

// ---------------------------------------------------------------------------
// Gradient checking.
// ---------------------------------------------------------------------------

/// Builds a scalar (1x1) output on `tape` from parameter variables.
using TapeFunction = std::function<Var(Tape&, std::span<const Var>)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_param = 0;
  Eigen::Index worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares tape gradients of `f` at `params` against central differences
/// with step `h`. The per-coordinate error is
/// |analytic - numeric| / (|numeric| + 1e-12); the maximum is returned.
/// Throws NumericalError if `f` is non-finite anywhere it is evaluated and
/// std::invalid_argument if `h` is outside [1e-7, 1e-3].
GradCheckResult finite_difference_check(const TapeFunction& f, std::span<const Matrix> params, double h = 1e-5);

}  // namespace moralmech
