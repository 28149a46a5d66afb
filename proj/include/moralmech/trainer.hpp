#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "json.hpp"
#include "moralmech/model.hpp"
#include "moralmech/scenario.hpp"

namespace moralmech {

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 512;
  int epochs = 10;
  std::uint64_t seed = 1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  /// Stop after this many epochs without a validation improvement; 0 = never.
  int patience = 0;
  /// Stop once a validation accuracy reaches this value; 0 = never.
  double target_accuracy = 0.0;
  /// Validate every `eval_every` epochs (the last epoch is always validated).
  int eval_every = 1;
  int threads = 1;

  void validate() const;
};

struct EpochMetrics {
  int epoch = 0;  ///< 1-based
  double train_loss = 0.0;
  double val_accuracy = 0.0;  ///< negative when this epoch was not validated
  double wall_seconds = 0.0;  ///< not serialized, so saved metrics stay reproducible
};

struct TrainMetrics {
  std::vector<EpochMetrics> epochs;
  int best_epoch = 0;
  double best_val_accuracy = -1.0;
};

nlohmann::json to_json(const EpochMetrics& m);
nlohmann::json to_json(const TrainMetrics& m);
TrainMetrics metrics_from_json(const nlohmann::json& j);

/// Adam state for every parameter tensor, in ModelParams visit order.
struct AdamState {
  std::vector<Matrix> m, v;
  std::int64_t step = 0;

  explicit AdamState(const ModelParams& shapes);
  AdamState() = default;
};

/// One Adam update of `params` with `grads` (visit order).
void adam_step(ModelParams& params, std::span<const Matrix> grads, AdamState& state, const TrainConfig& cfg);

/// Everything needed to continue a run where it stopped.
struct TrainState {
  ModelParams current;
  AdamState adam;
  int epochs_done = 0;
  TrainMetrics metrics;
  ModelParams best;
};

nlohmann::json to_json(const TrainState& s);
TrainState train_state_from_json(const nlohmann::json& j, const ModelConfig& cfg);

struct TrainResult {
  Model best;  ///< parameters of the best validation epoch
  TrainMetrics metrics;
  TrainState state;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Mean binary cross-entropy of sigmoid(f(O0,O1)) against the labels of
/// `rows` (no symmetrization).
double batch_loss(const Model& m, std::span<const LabeledScenario> rows);

/// Minimizes binary cross-entropy of the raw logit with Adam. Parameters are
/// initialized from tcfg.seed and every batch is drawn from a per-epoch
/// seeded permutation, so a run is a pure function of its inputs. Returns the
/// parameters of the best validation epoch (earliest on ties).
///
/// Throws DataError for empty datasets or mismatched vocabularies and
/// NumericalError when the loss becomes non-finite.
TrainResult train(const Dataset& train_set, const Dataset& val_set, const ModelConfig& mcfg, const TrainConfig& tcfg,
                  const EpochCallback& on_epoch = {}, std::optional<TrainState> resume = std::nullopt);

/// Fraction of rows whose symmetric prediction rounds to the label. An exact
/// 1/2 prediction earns half credit, which keeps the score invariant under
/// swapping every row and flipping every label.
double evaluate(const Model& m, const Dataset& d, int threads = 1);

}  // namespace moralmech
