#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "moralmech/model.hpp"
#include "moralmech/scenario.hpp"

namespace moralmech {

struct RelevanceEntry {
  std::string token;
  int team = 0;
  double score = 0.0;
};

/// Relevance of the 2 x 23 token positions (CLS excluded) for one decision.
struct RelevanceResult {
  CharacterVocab vocab = CharacterVocab::standard();
  std::vector<double> team0;  ///< per vocabulary slot, outcome0 tokens
  std::vector<double> team1;  ///< per vocabulary slot, outcome1 tokens
  double normalizer = 0.0;    ///< raw CLS-row mass before normalization
  double probability = 0.0;
  bool uniform_fallback = false;

  double total() const;
  /// Scores in descending order; ties keep team 0 first, then vocabulary order.
  std::vector<RelevanceEntry> ranked() const;
};

/// Per layer I + mean_h(max(dA * A, 0)), multiplied across layers in order.
Matrix relevance_matrix(const Capture& capture);

/// Normalized CLS-row scores from `c` (sequence_length square). An all-zero
/// row falls back to uniform scores with `uniform_fallback` set.
RelevanceResult relevance_from_matrix(const Matrix& c, const CharacterVocab& vocab);

/// Unsymmetrized explanation of the predicted decision: gradients of the
/// logit f when f >= 0, of -f otherwise. `probability` is sigmoid(f).
RelevanceResult relevance_single(const Scenario& s, const Model& m);

/// Average of the explanation of `s` and the team-remapped explanation of
/// swap_teams(s), renormalized; `probability` is predict_symmetric(s).
RelevanceResult relevance_symmetric(const Scenario& s, const Model& m);

/// Exchanges the team-0 and team-1 scores.
RelevanceResult remap_teams(const RelevanceResult& r);

nlohmann::json to_json(const RelevanceResult& r);
std::vector<std::vector<std::string>> csv_rows(const RelevanceResult& r);

}  // namespace moralmech
