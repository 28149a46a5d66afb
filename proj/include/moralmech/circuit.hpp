#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "moralmech/model.hpp"
#include "moralmech/scenario.hpp"

namespace moralmech {

// ---------------------------------------------------------------------------
// Model-derived moral weights and labels
// ---------------------------------------------------------------------------

enum class WeightMethod {
  Odds,             ///< p / (1 - p) of sparing c against Man one-on-one
  LogitDifference,  ///< exp of half the antisymmetric logit difference
};

WeightMethod parse_weight_method(const std::string& text);
std::string to_string(WeightMethod m);

struct MoralWeights {
  CharacterVocab vocab = CharacterVocab::standard();
  TokenWeights weights;              ///< weight(Man) == 1 exactly
  std::vector<double> probability;   ///< p_c of the {Man:1} vs {c:1} match
  std::vector<std::string> clamped;  ///< tokens whose p_c hit 0 or 1

  double operator[](const std::string& token) const { return weights[vocab.index(token)]; }
};

MoralWeights extract_moral_weights(const Model& m, WeightMethod method = WeightMethod::Odds);

struct ScoreLabel {
  int label = 0;  ///< 1 when outcome1's weighted total is larger
  bool tie = false;
};

ScoreLabel label_by_score(const Scenario& s, const TokenWeights& w);

// ---------------------------------------------------------------------------
// Probing data
// ---------------------------------------------------------------------------

/// CLS-row activations at the gate site (pre-gate), one row per scenario.
Matrix site_activations(const Model& m, const GateSite& site, std::span<const Scenario> scenarios, int threads = 1);

/// The linear map that turns gated site activations into the CLS residual
/// update: (mask * h) W + b.
struct SiteProjection {
  Matrix weight;  ///< width x d
  RowVector bias;
};

SiteProjection site_projection(const Model& m, const GateSite& site);

/// CLS updates for every row of `activations` under `mask` (width entries).
Matrix cls_updates(const Matrix& activations, const RowVector& mask, const SiteProjection& proj);

// ---------------------------------------------------------------------------
// Soft nearest neighbour loss and mask training
// ---------------------------------------------------------------------------

/// Mean over anchors of -log(sum_same exp(-D/T) / sum_other exp(-D/T)) with
/// D the squared Euclidean distance and T fixed. Anchors without a same-label
/// partner in the batch are skipped. Returns a 1x1 node.
Var snn_loss(Var points, std::span<const int> labels, double temperature);

/// Mean squared pairwise distance over distinct pairs.
double mean_pairwise_sq_distance(const Matrix& points);

struct MaskParams {
  RowVector logits;
  double beta = 1.0;

  RowVector soft() const;
  RowVector hard() const;  ///< 1 where logits > 0
  std::size_t selected() const;
};

struct MaskTrainConfig {
  double lambda = 1e-5;
  double beta_start = 1.0;
  double beta_end = 200.0;
  int steps = 1500;
  int batch = 256;
  double lr = 0.05;
  double init_logit = 0.1;
  double temperature_scale = 0.07;
  std::uint64_t seed = 1;
};

struct MaskTrainResult {
  MaskParams mask;
  std::vector<double> loss;  ///< SNN loss per step (without the penalty)
  bool degenerate = false;   ///< hard mask all zeros or all ones
  double soft_hard_agreement = 0.0;  ///< fraction of units with round(soft) == hard
};

/// Learns mask logits over the site units with Adam, class-balanced batches
/// and a geometric beta schedule. `activations` are site activations of the
/// frozen model; `labels` come from label_by_score.
MaskTrainResult train_mask(const Matrix& activations, std::span<const int> labels, const SiteProjection& proj,
                           const MaskTrainConfig& cfg);

/// beta after `step` of `steps` on the geometric schedule.
double beta_at(const MaskTrainConfig& cfg, int step);

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Leave-one-out 1-NN predictions with Euclidean distance; ties go to the
/// lower index. Throws DataError for fewer than two points.
std::vector<int> knn_predict(const Matrix& points, std::span<const int> labels);
double knn_accuracy(const Matrix& points, std::span<const int> labels);

enum class MaskMode { Soft, Hard, None };

double knn_eval(const Matrix& activations, std::span<const int> labels, const SiteProjection& proj,
                const MaskParams& mask, MaskMode mode);

/// Agreement of symmetric predictions with labels; an exact 0.5 earns half.
double label_agreement(std::span<const double> probabilities, std::span<const int> labels);

struct AblationResult {
  double full_accuracy = 0.0;
  double ablated_accuracy = 0.0;
  double drop = 0.0;
  double baseline_chance = 0.0;
  double label_prior = 0.0;  ///< fraction labelled 1
  double margin = 0.0;
  std::optional<double> causal_share;  ///< empty when margin <= 0
  std::vector<double> control_drops;
  double control_mean_drop = 0.0;
  std::size_t ties = 0;
};

/// Zeroes the selected units (scope per site) and compares agreement with the
/// score labels before and after, plus `controls` random masks of the same size.
AblationResult ablate_and_eval(const Model& m, const GateSite& site, const RowVector& hard_mask,
                               std::span<const Scenario> test, const TokenWeights& w, int controls,
                               std::uint64_t seed, int threads = 1);

// ---------------------------------------------------------------------------
// End to end
// ---------------------------------------------------------------------------

struct CircuitConfig {
  GateSite site;
  MaskTrainConfig mask;
  WeightMethod weight_method = WeightMethod::Odds;
  double train_fraction = 0.8;
  int controls = 10;
  int threads = 1;
};

struct CircuitReport {
  std::string site;
  double knn_unmasked = 0.0;
  double knn_soft = 0.0;
  double knn_hard = 0.0;
  std::size_t selected = 0;
  std::size_t width = 0;
  std::size_t training_examples = 0;
  std::size_t eval_examples = 0;
  std::size_t test_examples = 0;
  bool degenerate_mask = false;
  double soft_hard_agreement = 0.0;
  double probe_label_prior = 0.0;
  std::vector<int> selected_units;
  AblationResult ablation;
  MoralWeights weights;
};

/// Labels `probe` with the model's moral weights, splits it into mask
/// training and KNN evaluation parts, learns the mask and runs the ablation
/// on `test`.
CircuitReport run_circuit(const Model& m, std::span<const Scenario> probe, std::span<const Scenario> test,
                          const CircuitConfig& cfg);

nlohmann::json to_json(const CircuitReport& r);

}  // namespace moralmech
