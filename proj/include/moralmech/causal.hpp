#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"
#include "moralmech/model.hpp"
#include "moralmech/scenario.hpp"

namespace moralmech {

/// One scenario seen from the point of view of one character.
struct InterventionRecord {
  int treatment = 0;     ///< character present (count >= 1) in outcome 1
  double outcome = 0.0;  ///< symmetric preference for outcome 1
  int total0 = 0;
  int total1 = 0;
};

/// Synthetic scenarios scored once by the model; per-character record tables
/// are views over it.
struct InterventionCorpus {
  CharacterVocab vocab = CharacterVocab::standard();
  std::vector<Scenario> scenarios;
  std::vector<double> outcome;

  std::size_t size() const { return scenarios.size(); }
  std::vector<InterventionRecord> records(std::size_t character) const;
};

struct CorpusConfig {
  std::size_t n = 20000;
  std::uint64_t seed = 1;
  std::vector<std::string> context_tokens = default_context_tokens();
  int max_distinct = 5;
  int max_count = 5;
};

InterventionCorpus build_intervention_corpus(const Model& m, const CorpusConfig& cfg, int threads = 1);

struct OlsResult {
  Eigen::VectorXd coefficients;
  Eigen::VectorXd standard_errors;
  double residual_variance = 0.0;
};

/// Least squares via column-pivoted Householder QR with classical standard
/// errors. Throws NumericalError naming the first degenerate column when the
/// design is rank deficient.
OlsResult ols(const Eigen::MatrixXd& design, const Eigen::VectorXd& y, const std::vector<std::string>& column_names);

struct AteResult {
  std::string character;
  double ate = 0.0;
  double standard_error = 0.0;
  Eigen::VectorXd coefficients;  ///< [intercept, treatment, total0, total1]
  std::size_t n_treated = 0;
  std::size_t n_control = 0;
  std::size_t corpus_size = 0;
};

/// Backdoor-adjusted effect of the treatment: OLS of outcome on
/// [1, T, total0, total1], reporting the T coefficient. Throws DataError when
/// a treatment arm is empty and NumericalError for a singular design.
AteResult estimate_ate(const std::string& character, const std::vector<InterventionRecord>& records);

struct AteReport {
  std::vector<AteResult> results;  ///< sorted by ATE, descending
  std::vector<std::pair<std::string, std::string>> failures;  ///< character, reason
  std::size_t corpus_size = 0;
};

AteReport ate_report(const InterventionCorpus& corpus);
AteReport ate_report(const Model& m, const CorpusConfig& cfg, int threads = 1);

nlohmann::json to_json(const AteReport& r);
std::vector<std::vector<std::string>> csv_rows(const AteReport& r);

}  // namespace moralmech
