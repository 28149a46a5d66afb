#include "moralmech/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

#include "moralmech/error.hpp"

namespace moralmech {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("train: learning rate must be positive");
  if (batch_size < 1) throw ConfigError("train: batch size must be at least 1");
  if (epochs < 0) throw ConfigError("train: epochs must be non-negative");
  if (eval_every < 1) throw ConfigError("train: eval_every must be at least 1");
  if (patience < 0) throw ConfigError("train: patience must be non-negative");
  if (target_accuracy < 0.0 || target_accuracy > 1.0) throw ConfigError("train: target_accuracy must lie in [0, 1]");
}

nlohmann::json to_json(const EpochMetrics& m) {
  nlohmann::json j = {{"epoch", m.epoch}, {"train_loss", m.train_loss}};
  j["val_accuracy"] = m.val_accuracy >= 0.0 ? nlohmann::json(m.val_accuracy) : nlohmann::json(nullptr);
  return j;
}

nlohmann::json to_json(const TrainMetrics& m) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const EpochMetrics& e : m.epochs) epochs.push_back(to_json(e));
  return {{"epochs", epochs}, {"best_epoch", m.best_epoch}, {"best_val_accuracy", m.best_val_accuracy}};
}

TrainMetrics metrics_from_json(const nlohmann::json& j) {
  TrainMetrics m;
  for (const auto& e : j.at("epochs")) {
    EpochMetrics em;
    em.epoch = e.at("epoch").get<int>();
    em.train_loss = e.at("train_loss").get<double>();
    em.val_accuracy = e.at("val_accuracy").is_null() ? -1.0 : e.at("val_accuracy").get<double>();
    m.epochs.push_back(em);
  }
  m.best_epoch = j.at("best_epoch").get<int>();
  m.best_val_accuracy = j.at("best_val_accuracy").get<double>();
  return m;
}

AdamState::AdamState(const ModelParams& shapes) {
  shapes.visit([this](const std::string&, const Matrix& p) {
    m.push_back(Matrix::Zero(p.rows(), p.cols()));
    v.push_back(Matrix::Zero(p.rows(), p.cols()));
  });
}

void adam_step(ModelParams& params, std::span<const Matrix> grads, AdamState& state, const TrainConfig& cfg) {
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, double(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, double(state.step));
  std::size_t i = 0;
  params.visit([&](const std::string&, Matrix& p) {
    const Matrix& g = grads[i];
    Matrix& m = state.m[i];
    Matrix& v = state.v[i];
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.cwiseAbs2();
    p.array() -= cfg.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg.adam_eps);
    ++i;
  });
}

namespace {

nlohmann::json params_to_json(const ModelParams& p) {
  nlohmann::json out = nlohmann::json::array();
  p.visit([&out](const std::string&, const Matrix& m) { out.push_back(matrix_to_json(m)); });
  return out;
}

std::vector<Matrix> matrices_from_json(const nlohmann::json& j) {
  std::vector<Matrix> out;
  for (const auto& m : j) out.push_back(matrix_from_json(m));
  return out;
}

ModelParams params_from_json(const nlohmann::json& j, const ModelConfig& cfg) {
  ModelParams p = zero_params(cfg);
  const auto values = matrices_from_json(j);
  try {
    unflatten(values, p);
  } catch (const std::invalid_argument& e) {
    throw DataError(std::string("train state: ") + e.what());
  }
  return p;
}

std::uint64_t epoch_seed(std::uint64_t seed, int epoch) {
  std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(epoch), 0x5eedu};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (std::uint64_t(out[0]) << 32) | out[1];
}

}  // namespace

nlohmann::json to_json(const TrainState& s) {
  nlohmann::json m = nlohmann::json::array(), v = nlohmann::json::array();
  for (const Matrix& x : s.adam.m) m.push_back(matrix_to_json(x));
  for (const Matrix& x : s.adam.v) v.push_back(matrix_to_json(x));
  return {{"current", params_to_json(s.current)},
          {"best", params_to_json(s.best)},
          {"adam_m", m},
          {"adam_v", v},
          {"adam_step", s.adam.step},
          {"epochs_done", s.epochs_done},
          {"metrics", to_json(s.metrics)}};
}

TrainState train_state_from_json(const nlohmann::json& j, const ModelConfig& cfg) {
  try {
    TrainState s;
    s.current = params_from_json(j.at("current"), cfg);
    s.best = params_from_json(j.at("best"), cfg);
    s.adam.m = matrices_from_json(j.at("adam_m"));
    s.adam.v = matrices_from_json(j.at("adam_v"));
    s.adam.step = j.at("adam_step").get<std::int64_t>();
    s.epochs_done = j.at("epochs_done").get<int>();
    s.metrics = metrics_from_json(j.at("metrics"));
    if (s.adam.m.size() != flatten(s.current).size() || s.adam.v.size() != s.adam.m.size())
      throw DataError("train state: optimizer moments do not match the parameters");
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("corrupt train state: ") + e.what());
  }
}

double batch_loss(const Model& m, std::span<const LabeledScenario> rows) {
  std::vector<Scenario> scenarios;
  std::vector<double> targets;
  for (const LabeledScenario& r : rows) {
    scenarios.push_back(r.scenario);
    targets.push_back(double(r.label));
  }
  Tape tape;
  const ParamVars vars = bind_params(tape, m.params, false);
  const Var logits = forward_on_tape(tape, vars, m.config, scenarios).logits;
  return bce_with_logits(logits, targets).value()(0, 0);
}

TrainResult train(const Dataset& train_set, const Dataset& val_set, const ModelConfig& mcfg, const TrainConfig& tcfg,
                  const EpochCallback& on_epoch, std::optional<TrainState> resume) {
  mcfg.validate();
  tcfg.validate();
  if (train_set.empty()) throw DataError("train: training set is empty");
  if (val_set.empty()) throw DataError("train: validation set is empty");
  if (!(train_set.vocab == mcfg.vocab) || !(val_set.vocab == mcfg.vocab))
    throw DataError("train: dataset vocabulary differs from the model vocabulary");

  TrainState state;
  if (resume) {
    state = std::move(*resume);
  } else {
    state.current = init_params(mcfg, tcfg.seed);
    state.best = state.current;
    state.adam = AdamState(state.current);
  }
  Model model{mcfg, state.current};

  const std::size_t n = train_set.size();
  std::vector<std::size_t> order(n);
  std::vector<Scenario> scenarios;
  std::vector<double> targets;
  int stale = 0;
  for (const EpochMetrics& e : state.metrics.epochs)
    if (e.val_accuracy >= 0.0) stale = e.epoch > state.metrics.best_epoch ? stale + 1 : 0;

  for (int epoch = state.epochs_done + 1; epoch <= tcfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(epoch_seed(tcfg.seed, epoch));
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0.0;
    for (std::size_t begin = 0; begin < n; begin += tcfg.batch_size) {
      const std::size_t end = std::min(n, begin + tcfg.batch_size);
      scenarios.clear();
      targets.clear();
      for (std::size_t i = begin; i < end; ++i) {
        scenarios.push_back(train_set.rows[order[i]].scenario);
        targets.push_back(double(train_set.rows[order[i]].label));
      }
      Tape tape;
      const ParamVars vars = bind_params(tape, model.params, true);
      const Var logits = forward_on_tape(tape, vars, mcfg, scenarios).logits;
      const Var loss = bce_with_logits(logits, targets);
      const double value = loss.value()(0, 0);
      if (!std::isfinite(value))
        throw NumericalError("train: non-finite loss at epoch " + std::to_string(epoch) + ", batch starting at row " +
                             std::to_string(begin));
      tape.backward(loss);
      std::vector<Matrix> grads;
      vars.visit([&](const std::string&, const Var& v) { grads.push_back(tape.grad(v)); });
      adam_step(model.params, grads, state.adam, tcfg);
      loss_sum += value * double(end - begin);
    }

    EpochMetrics em;
    em.epoch = epoch;
    em.train_loss = loss_sum / double(n);
    em.val_accuracy = -1.0;
    const bool validate_now = epoch % tcfg.eval_every == 0 || epoch == tcfg.epochs;
    if (validate_now) {
      em.val_accuracy = evaluate(model, val_set, tcfg.threads);
      if (em.val_accuracy > state.metrics.best_val_accuracy) {
        state.metrics.best_val_accuracy = em.val_accuracy;
        state.metrics.best_epoch = epoch;
        state.best = model.params;
        stale = 0;
      } else {
        ++stale;
      }
    }
    em.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    state.metrics.epochs.push_back(em);
    state.epochs_done = epoch;
    state.current = model.params;
    if (on_epoch) on_epoch(em);
    if (tcfg.patience > 0 && stale >= tcfg.patience) break;
    if (tcfg.target_accuracy > 0.0 && em.val_accuracy >= tcfg.target_accuracy) break;
  }

  TrainResult result;
  result.best = Model{mcfg, state.best};
  result.metrics = state.metrics;
  result.state = std::move(state);
  return result;
}

double evaluate(const Model& m, const Dataset& d, int threads) {
  if (d.empty()) throw DataError("evaluate: empty dataset");
  std::vector<Scenario> scenarios;
  scenarios.reserve(d.size());
  for (const LabeledScenario& r : d.rows) scenarios.push_back(r.scenario);
  const std::vector<double> p = predict_symmetric(m, scenarios, nullptr, threads);
  double correct = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.5)
      correct += 0.5;
    else if ((p[i] > 0.5 ? 1 : 0) == d.rows[i].label)
      correct += 1.0;
  }
  return correct / double(d.size());
}

}  // namespace moralmech
