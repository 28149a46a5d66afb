#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "moralmech/model.hpp"
#include "moralmech/scenario.hpp"

namespace moralmech {

/// A protected attribute expressed as two disjoint token groups. The bias
/// score measures preference for sparing the privileged group.
struct BiasDimension {
  std::string name;
  std::vector<std::string> privileged;
  std::vector<std::string> unprivileged;

  /// Throws ConfigError for empty, overlapping or unknown token sets.
  void validate(const CharacterVocab& vocab) const;
};

/// legality, gender, social_role, age and species with the default token sets.
std::vector<BiasDimension> default_bias_dimensions();

struct ContrastiveScenario {
  Scenario scenario;
  int privileged_side = 0;  ///< outcome holding the privileged group
};

/// Each scenario is {p:k} against {u:k} with p, u drawn uniformly from the two
/// groups, k uniform in 1..max_count and the privileged side a fair coin.
std::vector<ContrastiveScenario> generate_contrastive(const BiasDimension& dim, const CharacterVocab& vocab,
                                                      std::size_t n, std::uint64_t seed, int max_count = 5);

enum class AttentionStrategy {
  ClsRow,            ///< CLS-row attention mass on the relevant positions
  MeanIntoRelevant,  ///< attention mass into relevant positions, averaged over all query rows
};

AttentionStrategy parse_attention_strategy(const std::string& text);
std::string to_string(AttentionStrategy s);

/// Sequence positions of the tokens of `dim` that are present (count >= 1)
/// in `s`. Position 0 is CLS, then outcome0 slots, then outcome1 slots.
std::vector<Eigen::Index> relevant_positions(const Scenario& s, const BiasDimension& dim, const CharacterVocab& vocab);

/// Scalar summary of one head's attention matrix over `positions`.
double attention_scalar(const Matrix& attention, std::span<const Eigen::Index> positions,
                        AttentionStrategy strategy = AttentionStrategy::ClsRow);
double attention_scalar(const Capture& capture, int layer, int head, std::span<const Eigen::Index> positions,
                        AttentionStrategy strategy = AttentionStrategy::ClsRow);

/// Symmetric probability of sparing the privileged group.
double bias_score(const ContrastiveScenario& c, const Model& m);

struct ImportanceTable {
  std::string dimension;
  Matrix importance;                    ///< layers x heads, I = Var * |Corr|
  Matrix variance;                      ///< Var of the attention scalar
  Matrix correlation;                   ///< Pearson(alpha, bias score), 0 when degenerate
  std::vector<std::vector<bool>> degenerate;  ///< [layer][head] zero variance in alpha or b
  std::vector<double> layer_totals;
  double mean_bias = 0.0;
  std::size_t n = 0;
};

/// Importance from precomputed samples. `alpha` is n x (layers*heads) with
/// column l*heads + h.
ImportanceTable importance_from_samples(const std::string& dimension, const Matrix& alpha,
                                        const Eigen::VectorXd& bias, int layers, int heads);

struct ImportanceOptions {
  std::size_t n = 1000;
  std::uint64_t seed = 1;
  AttentionStrategy strategy = AttentionStrategy::ClsRow;
  int max_count = 5;
  int threads = 1;
};

/// Throws ConfigError when n < 30.
ImportanceTable importance(const Model& m, const BiasDimension& dim, const ImportanceOptions& opts);

nlohmann::json to_json(const ImportanceTable& t);
/// Rows of the heatmap CSV: bias, layer, head, importance.
std::vector<std::vector<std::string>> csv_rows(const ImportanceTable& t);

}  // namespace moralmech
