#include "moralmech/circuit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "moralmech/error.hpp"
#include "moralmech/parallel.hpp"

namespace moralmech {

WeightMethod parse_weight_method(const std::string& text) {
  if (text == "odds") return WeightMethod::Odds;
  if (text == "logit_difference") return WeightMethod::LogitDifference;
  throw ConfigError("unknown weight method '" + text + "' (expected odds or logit_difference)");
}

std::string to_string(WeightMethod m) { return m == WeightMethod::Odds ? "odds" : "logit_difference"; }

MoralWeights extract_moral_weights(const Model& m, WeightMethod method) {
  const CharacterVocab& vocab = m.config.vocab;
  if (!vocab.contains("Man")) throw ConfigError("moral weights are normalized to Man, which is not in the vocabulary");
  constexpr double kClamp = 1e-6;

  MoralWeights w;
  w.vocab = vocab;
  w.weights.resize(vocab.size());
  w.probability.resize(vocab.size());
  for (std::size_t c = 0; c < vocab.size(); ++c) {
    const Scenario s = make_scenario(vocab, {{"Man", 1}}, {{vocab.name(c), 1}});
    const double p = predict_symmetric(m, s);
    w.probability[c] = p;
    if (method == WeightMethod::Odds) {
      const double pc = std::clamp(p, kClamp, 1.0 - kClamp);
      if (pc != p) w.clamped.push_back(vocab.name(c));
      w.weights[c] = pc / (1.0 - pc);
    } else {
      w.weights[c] = std::exp(0.5 * (forward(m, s) - forward(m, swap_teams(s))));
    }
  }
  const double man = w.weights[vocab.index("Man")];
  for (double& x : w.weights) x /= man;
  return w;
}

ScoreLabel label_by_score(const Scenario& s, const TokenWeights& w) {
  const double left = weighted_total(s.outcome0, w);
  const double right = weighted_total(s.outcome1, w);
  return {right > left ? 1 : 0, right == left};
}

Matrix site_activations(const Model& m, const GateSite& site, std::span<const Scenario> scenarios, int threads) {
  const ModelConfig& cfg = m.config;
  if (site.layer < 0 || site.layer >= cfg.layers) throw ConfigError("gate site layer outside the model");
  Matrix out(Eigen::Index(scenarios.size()), site.width(cfg));
  parallel_chunks(scenarios.size(), 128, threads, [&](std::size_t begin, std::size_t end) {
    Tape tape;
    const ParamVars vars = bind_params(tape, m.params, false);
    const ForwardTrace trace = forward_on_tape(tape, vars, cfg, scenarios.subspan(begin, end - begin));
    const std::size_t l = std::size_t(site.layer);
    const Matrix& act =
        site.location == GateLocation::MlpHidden ? trace.mlp_hidden[l].value() : trace.head_concat[l].value();
    const Eigen::Index rps = trace.rows_per_sequence[l];
    for (std::size_t i = begin; i < end; ++i) out.row(Eigen::Index(i)) = act.row(Eigen::Index(i - begin) * rps);
  });
  return out;
}

SiteProjection site_projection(const Model& m, const GateSite& site) {
  if (site.layer < 0 || site.layer >= m.config.layers) throw ConfigError("gate site layer outside the model");
  const LayerParams& lp = m.params.layers[std::size_t(site.layer)];
  if (site.location == GateLocation::MlpHidden) return {lp.w2, lp.b2};
  return {lp.wo, lp.bo};
}

Matrix cls_updates(const Matrix& activations, const RowVector& mask, const SiteProjection& proj) {
  if (mask.size() != activations.cols()) throw std::invalid_argument("cls_updates: mask width mismatch");
  Matrix u = (activations.array().rowwise() * mask.array()).matrix() * proj.weight;
  u.rowwise() += proj.bias;
  return u;
}

double mean_pairwise_sq_distance(const Matrix& points) {
  const Eigen::Index n = points.rows();
  if (n < 2) return 0.0;
  // sum_{i<j} |xi - xj|^2 = n sum |xi|^2 - |sum xi|^2
  const double total = double(n) * points.squaredNorm() - points.colwise().sum().squaredNorm();
  return std::max(0.0, total / (double(n) * double(n - 1) / 2.0));
}

Var snn_loss(Var points, std::span<const int> labels, double temperature) {
  if (!(temperature > 0.0)) throw NumericalError("snn_loss: temperature must be positive");
  const Matrix& x = points.value();
  const Eigen::Index n = x.rows();
  if (Eigen::Index(labels.size()) != n) throw std::invalid_argument("snn_loss: label count mismatch");

  const Eigen::VectorXd sq = x.rowwise().squaredNorm();
  Eigen::MatrixXd dist = -2.0 * (x * x.transpose());
  dist.colwise() += sq;
  dist.rowwise() += sq.transpose();
  dist = dist.cwiseMax(0.0);

  // G(i, j) = d loss / d D(i, j)
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(n, n);
  double loss = 0.0;
  std::size_t anchors = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    bool has_partner = false;
    double lowest = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      lowest = std::min(lowest, dist(i, j));
      has_partner |= labels[std::size_t(j)] == labels[std::size_t(i)];
    }
    if (!has_partner) continue;
    double z_all = 0.0;
    double z_same = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      const double e = std::exp(-(dist(i, j) - lowest) / temperature);
      g(i, j) = e;
      z_all += e;
      if (labels[std::size_t(j)] == labels[std::size_t(i)]) z_same += e;
    }
    if (!(z_same > 0.0)) {
      // Every same-label partner underflowed; the anchor contributes nothing
      // useful and would make the loss infinite.
      g.row(i).setZero();
      continue;
    }
    loss += std::log(z_all) - std::log(z_same);
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      const double p_same = labels[std::size_t(j)] == labels[std::size_t(i)] ? g(i, j) / z_same : 0.0;
      g(i, j) = (p_same - g(i, j) / z_all) / temperature;
    }
    ++anchors;
  }
  if (anchors > 0) {
    loss /= double(anchors);
    g /= double(anchors);
  }
  Matrix value(1, 1);
  value(0, 0) = loss;
  Tape& t = *points.tape();
  return t.push(std::move(value), t.requires_grad(points), [points, g = std::move(g)](Tape& tp, const Matrix& seed) {
    const Matrix& xv = points.value();
    const Eigen::MatrixXd sym = g + g.transpose();
    const Eigen::VectorXd weight = sym.rowwise().sum();
    const Matrix dx = 2.0 * seed(0, 0) * ((xv.array().colwise() * weight.array()).matrix() - sym * xv);
    tp.accumulate(points, dx);
  });
}

RowVector MaskParams::soft() const { return sigmoid((beta * logits).eval()); }

RowVector MaskParams::hard() const { return (logits.array() > 0.0).cast<double>().matrix(); }

std::size_t MaskParams::selected() const { return std::size_t((logits.array() > 0.0).count()); }

double beta_at(const MaskTrainConfig& cfg, int step) {
  if (cfg.steps <= 1) return cfg.beta_end;
  const double t = double(std::clamp(step, 0, cfg.steps - 1)) / double(cfg.steps - 1);
  return cfg.beta_start * std::pow(cfg.beta_end / cfg.beta_start, t);
}

MaskTrainResult train_mask(const Matrix& activations, std::span<const int> labels, const SiteProjection& proj,
                           const MaskTrainConfig& cfg) {
  if (cfg.steps < 1 || cfg.batch < 2) throw ConfigError("mask training needs steps >= 1 and batch >= 2");
  if (!(cfg.beta_start > 0.0) || !(cfg.beta_end > 0.0)) throw ConfigError("mask beta schedule must be positive");
  if (cfg.lambda < 0.0) throw ConfigError("mask lambda must be non-negative");
  if (Eigen::Index(labels.size()) != activations.rows()) throw std::invalid_argument("train_mask: label count mismatch");
  if (activations.cols() != proj.weight.rows()) throw std::invalid_argument("train_mask: projection width mismatch");

  std::vector<std::size_t> by_class[2];
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i] ? 1 : 0].push_back(i);
  if (by_class[0].empty() || by_class[1].empty())
    throw DataError("mask training needs examples of both labels");

  const Eigen::Index width = activations.cols();
  MaskTrainResult r;
  r.mask.logits = RowVector::Constant(width, cfg.init_logit);
  RowVector adam_m = RowVector::Zero(width);
  RowVector adam_v = RowVector::Zero(width);
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;

  std::mt19937_64 rng(cfg.seed);
  const int half = cfg.batch / 2;
  std::vector<int> batch_labels(std::size_t(cfg.batch));
  std::vector<int> rows(std::size_t(cfg.batch));
  for (int k = 0; k < cfg.batch; ++k) batch_labels[std::size_t(k)] = k < cfg.batch - half ? 0 : 1;

  r.loss.reserve(std::size_t(cfg.steps));
  for (int step = 0; step < cfg.steps; ++step) {
    const double beta = beta_at(cfg, step);
    for (int k = 0; k < cfg.batch; ++k) {
      const auto& pool = by_class[batch_labels[std::size_t(k)]];
      rows[std::size_t(k)] = int(pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)]);
    }
    Tape tape;
    const Var logits = tape.variable(Matrix(r.mask.logits));
    const Var mask = sigmoid(scale(logits, beta));
    const Var h = gather_rows(tape.constant(activations), rows);
    const Var u = add_row(matmul(mul_row(h, mask), tape.constant(proj.weight)), tape.constant(Matrix(proj.bias)));
    const double temperature = std::max(cfg.temperature_scale * mean_pairwise_sq_distance(u.value()), 1e-12);
    const Var probe = snn_loss(u, batch_labels, temperature);
    const Var total = add(probe, scale(sum(mask), cfg.lambda));
    if (!std::isfinite(total.value()(0, 0))) throw NumericalError("mask training produced a non-finite loss");
    tape.backward(total);
    r.loss.push_back(probe.value()(0, 0));

    const RowVector g = tape.grad(logits);
    adam_m = kBeta1 * adam_m + (1.0 - kBeta1) * g;
    adam_v = kBeta2 * adam_v + (1.0 - kBeta2) * g.cwiseAbs2();
    const double c1 = 1.0 - std::pow(kBeta1, step + 1);
    const double c2 = 1.0 - std::pow(kBeta2, step + 1);
    r.mask.logits.array() -= cfg.lr * (adam_m.array() / c1) / ((adam_v.array() / c2).sqrt() + kEps);
  }
  r.mask.beta = cfg.beta_end;
  const std::size_t selected = r.mask.selected();
  r.degenerate = selected == 0 || selected == std::size_t(width);
  const RowVector soft = r.mask.soft();
  const RowVector hard = r.mask.hard();
  std::size_t agree = 0;
  for (Eigen::Index i = 0; i < width; ++i) agree += (soft(i) > 0.5 ? 1.0 : 0.0) == hard(i);
  r.soft_hard_agreement = double(agree) / double(width);
  return r;
}

std::vector<int> knn_predict(const Matrix& points, std::span<const int> labels) {
  const Eigen::Index n = points.rows();
  if (n < 2) throw DataError("knn evaluation needs at least two points");
  if (Eigen::Index(labels.size()) != n) throw std::invalid_argument("knn: label count mismatch");

  const Eigen::VectorXd sq = points.rowwise().squaredNorm();
  const double sq_max = sq.maxCoeff();
  std::vector<int> pred(static_cast<std::size_t>(n));
  constexpr Eigen::Index kChunk = 256;
  std::vector<Eigen::Index> candidates;
  for (Eigen::Index start = 0; start < n; start += kChunk) {
    const Eigen::Index rows = std::min(kChunk, n - start);
    Eigen::MatrixXd d = -2.0 * (points.middleRows(start, rows) * points.transpose());
    d.colwise() += sq.segment(start, rows);
    d.rowwise() += sq.transpose();
    for (Eigen::Index r = 0; r < rows; ++r) {
      const Eigen::Index i = start + r;
      d(r, i) = std::numeric_limits<double>::infinity();
      const double lowest = d.row(r).minCoeff();
      // The expansion loses precision; rescore everything within rounding
      // reach of the minimum with the direct formula.
      const double tol = 1e-9 * (sq(i) + sq_max) + 1e-300;
      candidates.clear();
      for (Eigen::Index j = 0; j < n; ++j)
        if (j != i && d(r, j) <= lowest + tol) candidates.push_back(j);
      Eigen::Index best = -1;
      double best_d = std::numeric_limits<double>::infinity();
      for (Eigen::Index j : candidates) {
        const double dj = (points.row(i) - points.row(j)).squaredNorm();
        if (dj < best_d) {
          best_d = dj;
          best = j;
        }
      }
      pred[std::size_t(i)] = labels[std::size_t(best)];
    }
  }
  return pred;
}

double knn_accuracy(const Matrix& points, std::span<const int> labels) {
  const std::vector<int> pred = knn_predict(points, labels);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == labels[i];
  return double(hits) / double(pred.size());
}

double knn_eval(const Matrix& activations, std::span<const int> labels, const SiteProjection& proj,
                const MaskParams& mask, MaskMode mode) {
  RowVector m;
  switch (mode) {
    case MaskMode::Soft: m = mask.soft(); break;
    case MaskMode::Hard: m = mask.hard(); break;
    case MaskMode::None: m = RowVector::Ones(activations.cols()); break;
  }
  return knn_accuracy(cls_updates(activations, m, proj), labels);
}

double label_agreement(std::span<const double> probabilities, std::span<const int> labels) {
  if (probabilities.size() != labels.size()) throw std::invalid_argument("label_agreement: length mismatch");
  if (labels.empty()) return 0.0;
  double hits = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double p = probabilities[i];
    if (p == 0.5) hits += 0.5;
    else hits += (p > 0.5 ? 1 : 0) == labels[i] ? 1.0 : 0.0;
  }
  return hits / double(labels.size());
}

AblationResult ablate_and_eval(const Model& m, const GateSite& site, const RowVector& hard_mask,
                               std::span<const Scenario> test, const TokenWeights& w, int controls,
                               std::uint64_t seed, int threads) {
  if (test.empty()) throw DataError("ablation needs a non-empty test set");
  const Eigen::Index width = site.width(m.config);
  if (hard_mask.size() != width) throw ConfigError("ablation mask has the wrong width");

  AblationResult r;
  std::vector<int> labels(test.size());
  for (std::size_t i = 0; i < test.size(); ++i) {
    const ScoreLabel l = label_by_score(test[i], w);
    labels[i] = l.label;
    r.ties += l.tie;
  }
  r.label_prior = double(std::count(labels.begin(), labels.end(), 1)) / double(labels.size());
  r.baseline_chance = std::max(r.label_prior, 1.0 - r.label_prior);

  auto accuracy_with = [&](const RowVector& keep) {
    const Gate gate{site, keep};
    return label_agreement(predict_symmetric(m, test, &gate, threads), labels);
  };
  r.full_accuracy = label_agreement(predict_symmetric(m, test, nullptr, threads), labels);
  r.ablated_accuracy = accuracy_with((1.0 - hard_mask.array()).matrix());
  r.drop = r.full_accuracy - r.ablated_accuracy;
  r.margin = r.full_accuracy - r.baseline_chance;
  if (r.margin > 0.0) r.causal_share = r.drop / r.margin;

  const Eigen::Index k = Eigen::Index((hard_mask.array() > 0.5).count());
  std::mt19937_64 rng(seed);
  std::vector<Eigen::Index> units(static_cast<std::size_t>(width));
  for (int c = 0; c < controls; ++c) {
    std::iota(units.begin(), units.end(), Eigen::Index(0));
    std::shuffle(units.begin(), units.end(), rng);
    RowVector keep = RowVector::Ones(width);
    for (Eigen::Index i = 0; i < k; ++i) keep(units[std::size_t(i)]) = 0.0;
    r.control_drops.push_back(r.full_accuracy - accuracy_with(keep));
  }
  if (!r.control_drops.empty())
    r.control_mean_drop =
        std::accumulate(r.control_drops.begin(), r.control_drops.end(), 0.0) / double(r.control_drops.size());
  return r;
}

CircuitReport run_circuit(const Model& m, std::span<const Scenario> probe, std::span<const Scenario> test,
                          const CircuitConfig& cfg) {
  if (!(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0))
    throw ConfigError("circuit train_fraction must lie in (0, 1)");
  if (probe.size() < 4) throw DataError("circuit probing needs at least four probe scenarios");

  CircuitReport r;
  r.site = cfg.site.name();
  r.width = std::size_t(cfg.site.width(m.config));
  r.weights = extract_moral_weights(m, cfg.weight_method);

  std::vector<int> labels(probe.size());
  for (std::size_t i = 0; i < probe.size(); ++i) labels[i] = label_by_score(probe[i], r.weights.weights).label;
  r.probe_label_prior = double(std::count(labels.begin(), labels.end(), 1)) / double(labels.size());

  std::vector<std::size_t> order(probe.size());
  std::iota(order.begin(), order.end(), std::size_t(0));
  std::mt19937_64 rng(cfg.mask.seed);
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t n_train =
      std::clamp<std::size_t>(std::size_t(std::llround(cfg.train_fraction * double(probe.size()))), 2, probe.size() - 2);

  const Matrix acts = site_activations(m, cfg.site, probe, cfg.threads);
  const SiteProjection proj = site_projection(m, cfg.site);
  Matrix train_x(Eigen::Index(n_train), acts.cols());
  Matrix eval_x(Eigen::Index(probe.size() - n_train), acts.cols());
  std::vector<int> train_y, eval_y;
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (i < n_train) {
      train_x.row(Eigen::Index(i)) = acts.row(Eigen::Index(order[i]));
      train_y.push_back(labels[order[i]]);
    } else {
      eval_x.row(Eigen::Index(i - n_train)) = acts.row(Eigen::Index(order[i]));
      eval_y.push_back(labels[order[i]]);
    }
  }
  r.training_examples = n_train;
  r.eval_examples = eval_y.size();
  r.test_examples = test.size();

  const MaskTrainResult trained = train_mask(train_x, train_y, proj, cfg.mask);
  r.degenerate_mask = trained.degenerate;
  r.soft_hard_agreement = trained.soft_hard_agreement;
  r.selected = trained.mask.selected();
  for (Eigen::Index i = 0; i < trained.mask.logits.size(); ++i)
    if (trained.mask.logits(i) > 0.0) r.selected_units.push_back(int(i));

  r.knn_unmasked = knn_eval(eval_x, eval_y, proj, trained.mask, MaskMode::None);
  r.knn_soft = knn_eval(eval_x, eval_y, proj, trained.mask, MaskMode::Soft);
  r.knn_hard = knn_eval(eval_x, eval_y, proj, trained.mask, MaskMode::Hard);
  r.ablation = ablate_and_eval(m, cfg.site, trained.mask.hard(), test, r.weights.weights, cfg.controls,
                               cfg.mask.seed + 1, cfg.threads);
  return r;
}

nlohmann::json to_json(const CircuitReport& r) {
  nlohmann::json weights = nlohmann::json::object();
  for (std::size_t i = 0; i < r.weights.weights.size(); ++i) weights[r.weights.vocab.name(i)] = r.weights.weights[i];
  const AblationResult& a = r.ablation;
  return {
      {"site", r.site},
      {"knn_accuracy_soft", r.knn_soft},
      {"knn_accuracy_hard", r.knn_hard},
      {"knn_accuracy_unmasked", r.knn_unmasked},
      {"selected_neurons", r.selected},
      {"width", r.width},
      {"sparsity", r.width ? double(r.selected) / double(r.width) : 0.0},
      {"training_examples", r.training_examples},
      {"eval_examples", r.eval_examples},
      {"test_examples", r.test_examples},
      {"full_model_acc", a.full_accuracy},
      {"ablated_acc", a.ablated_accuracy},
      {"ablation_drop", a.drop},
      {"baseline_chance", a.baseline_chance},
      {"label_prior", a.label_prior},
      {"margin", a.margin},
      {"causal_share", a.causal_share ? nlohmann::json(*a.causal_share) : nlohmann::json(nullptr)},
      {"random_control", a.control_mean_drop},
      {"random_control_drops", a.control_drops},
      {"label_ties", a.ties},
      {"probe_label_prior", r.probe_label_prior},
      {"degenerate_mask", r.degenerate_mask},
      {"soft_hard_agreement", r.soft_hard_agreement},
      {"selected_units", r.selected_units},
      {"moral_weights", weights},
      {"clamped_weights", r.weights.clamped},
  };
}

}  // namespace moralmech
