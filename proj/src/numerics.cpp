#include "moralmech/numerics.hpp"

#include <algorithm>
#include <numbers>
#include <stdexcept>
#include <utility>

#include "moralmech/error.hpp"

namespace moralmech {

const Matrix& Var::value() const { return tape_->value(*this); }

Var Tape::constant(Matrix value) { return push(std::move(value), false, {}); }

Var Tape::variable(Matrix value) { return push(std::move(value), true, {}); }

Var Tape::push(Matrix value, bool requires_grad, BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  if (requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

void Tape::check(Var v) const {
  if (!owns(v)) throw std::invalid_argument("tape: variable is not recorded on this tape");
}

const Matrix& Tape::value(Var v) const {
  check(v);
  return nodes_[v.index()].value;
}

bool Tape::requires_grad(Var v) const {
  check(v);
  return nodes_[v.index()].requires_grad;
}

Matrix& Tape::grad_buffer(Var v) {
  Node& node = nodes_[v.index()];
  if (!node.has_grad) {
    node.grad = Matrix::Zero(node.value.rows(), node.value.cols());
    node.has_grad = true;
  }
  return node.grad;
}

void Tape::backward(Var output, const Matrix& seed) {
  check(output);
  const Matrix& out = nodes_[output.index()].value;
  if (seed.rows() != out.rows() || seed.cols() != out.cols())
    throw std::invalid_argument("tape: seed shape does not match output shape");
  for (Node& node : nodes_) {
    node.has_grad = false;
    node.grad.resize(0, 0);
  }
  Node& root = nodes_[output.index()];
  root.grad = seed;
  root.has_grad = true;
  for (std::size_t i = output.index() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.has_grad || !node.backward) continue;
    // Backward rules never record nodes, so `node` stays valid.
    node.backward(*this, node.grad);
  }
}

void Tape::backward(Var output) { backward(output, Matrix::Ones(1, 1)); }

const Matrix& Tape::grad(Var v) {
  check(v);
  return grad_buffer(v);
}

namespace {

Tape& same_tape(Var a, Var b) {
  if (a.tape() == nullptr || a.tape() != b.tape()) throw std::invalid_argument("tape: operands on different tapes");
  return *a.tape();
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimensions differ");
  Matrix out = a.value() * b.value();
  return t.push(std::move(out), t.requires_grad(a) || t.requires_grad(b), [a, b](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(a)) tp.accumulate(a, g * tp.value(b).transpose());
    if (tp.requires_grad(b)) tp.accumulate(b, tp.value(a).transpose() * g);
  });
}

Var matmul_bt(Var a, Var b, double alpha) {
  Tape& t = same_tape(a, b);
  if (a.cols() != b.cols()) throw std::invalid_argument("matmul_bt: inner dimensions differ");
  Matrix out = alpha * (a.value() * b.value().transpose());
  return t.push(std::move(out), t.requires_grad(a) || t.requires_grad(b), [a, b, alpha](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(a)) tp.accumulate(a, alpha * (g * tp.value(b)));
    if (tp.requires_grad(b)) tp.accumulate(b, alpha * (g.transpose() * tp.value(a)));
  });
}

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b);
  Matrix out = a.value() + b.value();
  return t.push(std::move(out), t.requires_grad(a) || t.requires_grad(b), [a, b](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

Var sub(Var a, Var b) {
  Tape& t = same_tape(a, b);
  Matrix out = a.value() - b.value();
  return t.push(std::move(out), t.requires_grad(a) || t.requires_grad(b), [a, b](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, -g);
  });
}

Var hadamard(Var a, Var b) {
  Tape& t = same_tape(a, b);
  Matrix out = a.value().cwiseProduct(b.value());
  return t.push(std::move(out), t.requires_grad(a) || t.requires_grad(b), [a, b](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(a)) tp.accumulate(a, g.cwiseProduct(tp.value(b)));
    if (tp.requires_grad(b)) tp.accumulate(b, g.cwiseProduct(tp.value(a)));
  });
}

Var scale(Var a, double alpha) {
  Tape& t = *a.tape();
  Matrix out = alpha * a.value();
  return t.push(std::move(out), t.requires_grad(a), [a, alpha](Tape& tp, const Matrix& g) { tp.accumulate(a, alpha * g); });
}

Var add_row(Var a, Var row) {
  Tape& t = same_tape(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("add_row: row shape mismatch");
  Matrix out = a.value().rowwise() + row.value().row(0);
  return t.push(std::move(out), t.requires_grad(a) || t.requires_grad(row), [a, row](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g);
    if (tp.requires_grad(row)) tp.accumulate(row, g.colwise().sum());
  });
}

Var mul_row(Var a, Var row, Eigen::Index stride) {
  Tape& t = same_tape(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("mul_row: row shape mismatch");
  if (stride < 1) throw std::invalid_argument("mul_row: stride must be positive");
  Matrix out = a.value();
  for (Eigen::Index r = 0; r < out.rows(); r += stride) out.row(r).array() *= row.value().row(0).array();
  return t.push(std::move(out), t.requires_grad(a) || t.requires_grad(row), [a, row, stride](Tape& tp, const Matrix& g) {
    const Matrix& m = tp.value(row);
    if (tp.requires_grad(a)) {
      Matrix ga = g;
      for (Eigen::Index r = 0; r < ga.rows(); r += stride) ga.row(r).array() *= m.row(0).array();
      tp.accumulate(a, ga);
    }
    if (tp.requires_grad(row)) {
      const Matrix& av = tp.value(a);
      RowVector gr = RowVector::Zero(m.cols());
      for (Eigen::Index r = 0; r < g.rows(); r += stride) gr.array() += g.row(r).array() * av.row(r).array();
      tp.accumulate(row, gr);
    }
  });
}

Var gelu(Var x) {
  Tape& t = *x.tape();
  const Matrix& xv = x.value();
  // Phi(x) is reused by the backward rule.
  Matrix cdf = xv.unaryExpr([](double v) { return 0.5 * (1.0 + std::erf(v * (0.5 * std::numbers::sqrt2))); });
  Matrix out = xv.cwiseProduct(cdf);
  return t.push(std::move(out), t.requires_grad(x), [x, cdf = std::move(cdf)](Tape& tp, const Matrix& g) {
    constexpr double kInvSqrt2Pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
    const auto xa = tp.value(x).array();
    tp.accumulate(x, (g.array() * (cdf.array() + xa * (-0.5 * xa.square()).exp() * kInvSqrt2Pi)).matrix());
  });
}

Var sigmoid(Var x) {
  Tape& t = *x.tape();
  Matrix out = sigmoid(x.value());
  Matrix saved = out;
  return t.push(std::move(out), t.requires_grad(x), [x, s = std::move(saved)](Tape& tp, const Matrix& g) {
    tp.accumulate(x, (g.array() * s.array() * (1.0 - s.array())).matrix());
  });
}

Var softmax_rows(Var x) {
  Tape& t = *x.tape();
  Matrix out = softmax_rows(x.value());
  Matrix saved = out;
  return t.push(std::move(out), t.requires_grad(x), [x, y = std::move(saved)](Tape& tp, const Matrix& g) {
    const Eigen::VectorXd dots = g.cwiseProduct(y).rowwise().sum();
    Matrix gx = y.cwiseProduct((g.colwise() - dots));
    tp.accumulate(x, gx);
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  Tape& t = same_tape(x, gain);
  same_tape(x, bias);
  const Matrix& xv = x.value();
  const Eigen::Index n = xv.cols();
  if (gain.rows() != 1 || gain.cols() != n || bias.rows() != 1 || bias.cols() != n)
    throw std::invalid_argument("layer_norm: affine shape mismatch");
  Matrix normalized(xv.rows(), n);
  Eigen::VectorXd inv_std(xv.rows());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const double mu = xv.row(r).sum() / double(n);
    const auto centered = (xv.row(r).array() - mu).eval();
    const double var = centered.square().sum() / double(n);
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    normalized.row(r) = (centered * inv_std(r)).matrix();
  }
  Matrix out = (normalized.array().rowwise() * gain.value().row(0).array()).rowwise() + bias.value().row(0).array();
  const bool rg = t.requires_grad(x) || t.requires_grad(gain) || t.requires_grad(bias);
  return t.push(std::move(out), rg,
                [x, gain, bias, y = std::move(normalized), inv_std = std::move(inv_std)](Tape& tp, const Matrix& g) {
                  if (tp.requires_grad(gain)) tp.accumulate(gain, g.cwiseProduct(y).colwise().sum());
                  if (tp.requires_grad(bias)) tp.accumulate(bias, g.colwise().sum());
                  if (!tp.requires_grad(x)) return;
                  const Matrix dy = g.array().rowwise() * tp.value(gain).row(0).array();
                  const double n = double(y.cols());
                  const Eigen::VectorXd mean_dy = dy.rowwise().sum() / n;
                  const Eigen::VectorXd mean_dy_y = dy.cwiseProduct(y).rowwise().sum() / n;
                  Matrix gx = (dy.colwise() - mean_dy) - (y.array().colwise() * mean_dy_y.array()).matrix();
                  gx = gx.array().colwise() * inv_std.array();
                  tp.accumulate(x, gx);
                });
}

Var block(Var x, Eigen::Index row, Eigen::Index col, Eigen::Index rows, Eigen::Index cols) {
  Tape& t = *x.tape();
  if (row < 0 || col < 0 || row + rows > x.rows() || col + cols > x.cols())
    throw std::out_of_range("block: range outside operand");
  Matrix out = x.value().block(row, col, rows, cols);
  return t.push(std::move(out), t.requires_grad(x), [x, row, col, rows, cols](Tape& tp, const Matrix& g) {
    tp.grad_buffer(x).block(row, col, rows, cols) += g;
  });
}

Var strided_rows(Var x, Eigen::Index start, Eigen::Index stride, Eigen::Index count) {
  Tape& t = *x.tape();
  if (start < 0 || stride < 1 || count < 0 || (count > 0 && start + (count - 1) * stride >= x.rows()))
    throw std::out_of_range("strided_rows: range outside operand");
  Matrix out(count, x.cols());
  for (Eigen::Index i = 0; i < count; ++i) out.row(i) = x.value().row(start + i * stride);
  return t.push(std::move(out), t.requires_grad(x), [x, start, stride](Tape& tp, const Matrix& g) {
    Matrix& gx = tp.grad_buffer(x);
    for (Eigen::Index i = 0; i < g.rows(); ++i) gx.row(start + i * stride) += g.row(i);
  });
}

Var hcat(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("hcat: no operands");
  Tape& t = *parts.front().tape();
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  bool rg = false;
  for (const Var& p : parts) {
    same_tape(parts.front(), p);
    if (p.rows() != rows) throw std::invalid_argument("hcat: row counts differ");
    cols += p.cols();
    rg = rg || t.requires_grad(p);
  }
  Matrix out(rows, cols);
  Eigen::Index c = 0;
  for (const Var& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return t.push(std::move(out), rg, [ps = std::vector<Var>(parts.begin(), parts.end())](Tape& tp, const Matrix& g) {
    Eigen::Index col = 0;
    for (const Var& p : ps) {
      const Eigen::Index w = p.cols();
      if (tp.requires_grad(p)) tp.accumulate(p, g.middleCols(col, w));
      col += w;
    }
  });
}

Var vcat(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("vcat: no operands");
  Tape& t = *parts.front().tape();
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  bool rg = false;
  for (const Var& p : parts) {
    same_tape(parts.front(), p);
    if (p.cols() != cols) throw std::invalid_argument("vcat: column counts differ");
    rows += p.rows();
    rg = rg || t.requires_grad(p);
  }
  Matrix out(rows, cols);
  Eigen::Index r = 0;
  for (const Var& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return t.push(std::move(out), rg, [ps = std::vector<Var>(parts.begin(), parts.end())](Tape& tp, const Matrix& g) {
    Eigen::Index row = 0;
    for (const Var& p : ps) {
      const Eigen::Index h = p.rows();
      if (tp.requires_grad(p)) tp.accumulate(p, g.middleRows(row, h));
      row += h;
    }
  });
}

Var gather_rows(Var table, std::span<const int> indices) {
  Tape& t = *table.tape();
  const Matrix& tv = table.value();
  Matrix out(Eigen::Index(indices.size()), tv.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= tv.rows()) throw std::out_of_range("gather_rows: index outside table");
    out.row(Eigen::Index(i)) = tv.row(indices[i]);
  }
  return t.push(std::move(out), t.requires_grad(table),
                [table, idx = std::vector<int>(indices.begin(), indices.end())](Tape& tp, const Matrix& g) {
                  Matrix& gt = tp.grad_buffer(table);
                  for (std::size_t i = 0; i < idx.size(); ++i) gt.row(idx[i]) += g.row(Eigen::Index(i));
                });
}

Var sum(Var x) {
  Tape& t = *x.tape();
  Matrix out(1, 1);
  out(0, 0) = x.value().sum();
  return t.push(std::move(out), t.requires_grad(x), [x](Tape& tp, const Matrix& g) {
    tp.accumulate(x, Matrix::Constant(x.rows(), x.cols(), g(0, 0)));
  });
}

Var mean(Var x) {
  const double n = double(x.value().size());
  return scale(sum(x), 1.0 / n);
}

Var bce_with_logits(Var logits, std::span<const double> targets) {
  Tape& t = *logits.tape();
  const Matrix& z = logits.value();
  if (z.cols() != 1 || z.rows() != Eigen::Index(targets.size()))
    throw std::invalid_argument("bce_with_logits: expected n x 1 logits matching targets");
  double total = 0.0;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const double v = z(i, 0);
    total += std::max(v, 0.0) - targets[std::size_t(i)] * v + std::log1p(std::exp(-std::abs(v)));
  }
  Matrix out(1, 1);
  out(0, 0) = total / double(z.rows());
  return t.push(std::move(out), t.requires_grad(logits),
                [logits, y = std::vector<double>(targets.begin(), targets.end())](Tape& tp, const Matrix& g) {
                  const Matrix& zv = tp.value(logits);
                  Matrix gz(zv.rows(), 1);
                  const double n = double(zv.rows());
                  for (Eigen::Index i = 0; i < zv.rows(); ++i)
                    gz(i, 0) = g(0, 0) * (sigmoid(zv(i, 0)) - y[std::size_t(i)]) / n;
                  tp.accumulate(logits, gz);
                });
}

GradCheckResult finite_difference_check(const TapeFunction& f, std::span<const Matrix> params, double h) {
  if (!(h >= 1e-7 && h <= 1e-3)) throw std::invalid_argument("finite_difference_check: h must lie in [1e-7, 1e-3]");

  auto evaluate = [&](std::span<const Matrix> values) {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(values.size());
    for (const Matrix& m : values) vars.push_back(tape.constant(m));
    const double y = f(tape, vars).value()(0, 0);
    if (!std::isfinite(y)) throw NumericalError("finite_difference_check: non-finite function value");
    return y;
  };

  std::vector<Matrix> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const Matrix& m : params) vars.push_back(tape.variable(m));
    Var out = f(tape, vars);
    if (out.rows() != 1 || out.cols() != 1) throw std::invalid_argument("finite_difference_check: f must be scalar");
    if (!std::isfinite(out.value()(0, 0))) throw NumericalError("finite_difference_check: non-finite function value");
    tape.backward(out);
    for (const Var& v : vars) analytic.push_back(tape.grad(v));
  }

  GradCheckResult result;
  std::vector<Matrix> work(params.begin(), params.end());
  for (std::size_t p = 0; p < work.size(); ++p) {
    for (Eigen::Index i = 0; i < work[p].size(); ++i) {
      double& coord = work[p].data()[i];
      const double saved = coord;
      coord = saved + h;
      const double up = evaluate(work);
      coord = saved - h;
      const double down = evaluate(work);
      coord = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[p].data()[i];
      const double err = std::abs(a - numeric) / (std::abs(numeric) + 1e-12);
      if (err > result.max_relative_error) result = {err, p, i, a, numeric};
    }
  }
  return result;
}

}  // namespace moralmech
