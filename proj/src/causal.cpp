#include "moralmech/causal.hpp"

#include <Eigen/QR>

#include <algorithm>
#include <random>

#include "moralmech/error.hpp"
#include "moralmech/report.hpp"

namespace moralmech {

std::vector<InterventionRecord> InterventionCorpus::records(std::size_t character) const {
  if (character >= vocab.size()) throw std::out_of_range("intervention corpus: character index out of range");
  std::vector<InterventionRecord> out;
  out.reserve(scenarios.size());
  for (std::size_t i = 0; i < scenarios.size(); ++i) {
    const Scenario& s = scenarios[i];
    out.push_back({s.outcome1.counts[character] >= 1 ? 1 : 0, outcome[i], s.outcome0.total(), s.outcome1.total()});
  }
  return out;
}

InterventionCorpus build_intervention_corpus(const Model& m, const CorpusConfig& cfg, int threads) {
  if (cfg.n == 0) throw ConfigError("intervention corpus needs n > 0");
  const CharacterVocab& vocab = m.config.vocab;
  std::vector<bool> is_context(vocab.size(), false);
  for (const std::string& name : cfg.context_tokens) is_context[vocab.index(name)] = true;

  InterventionCorpus corpus;
  corpus.vocab = vocab;
  corpus.scenarios.reserve(cfg.n);
  std::mt19937_64 rng(cfg.seed);
  for (std::size_t i = 0; i < cfg.n; ++i) {
    Scenario s;
    s.outcome0 = sample_outcome(vocab, is_context, cfg.max_distinct, cfg.max_count, rng);
    s.outcome1 = sample_outcome(vocab, is_context, cfg.max_distinct, cfg.max_count, rng);
    corpus.scenarios.push_back(std::move(s));
  }
  corpus.outcome = predict_symmetric(m, corpus.scenarios, nullptr, threads);
  return corpus;
}

OlsResult ols(const Eigen::MatrixXd& design, const Eigen::VectorXd& y, const std::vector<std::string>& column_names) {
  const Eigen::Index n = design.rows();
  const Eigen::Index p = design.cols();
  if (y.size() != n) throw std::invalid_argument("ols: response length differs from design rows");
  if (n <= p) throw NumericalError("ols: need more observations than coefficients");

  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
  qr.setThreshold(1e-10);
  if (qr.rank() < p) {
    // Pivoting moves independent columns first; the first column beyond the
    // rank is the one that adds nothing new.
    const Eigen::Index col = qr.colsPermutation().indices()(qr.rank());
    const std::string name =
        std::size_t(col) < column_names.size() ? column_names[std::size_t(col)] : "column " + std::to_string(col);
    throw NumericalError("ols: singular design matrix, column '" + name + "' is degenerate");
  }
  OlsResult r;
  r.coefficients = qr.solve(y);
  const Eigen::VectorXd residual = y - design * r.coefficients;
  r.residual_variance = residual.squaredNorm() / double(n - p);

  // (X^T X)^-1 = P R^-1 R^-T P^T
  const Eigen::MatrixXd R = qr.matrixR().topLeftCorner(p, p).template triangularView<Eigen::Upper>();
  const Eigen::MatrixXd r_inv = R.triangularView<Eigen::Upper>().solve(Eigen::MatrixXd::Identity(p, p));
  const Eigen::MatrixXd cov_perm = r_inv * r_inv.transpose();
  const auto& perm = qr.colsPermutation();
  const Eigen::MatrixXd cov = perm * cov_perm * perm.transpose();
  r.standard_errors = (r.residual_variance * cov.diagonal().array()).sqrt().matrix();
  return r;
}

AteResult estimate_ate(const std::string& character, const std::vector<InterventionRecord>& records) {
  AteResult r;
  r.character = character;
  r.corpus_size = records.size();
  for (const InterventionRecord& rec : records) (rec.treatment ? r.n_treated : r.n_control)++;
  if (r.n_treated == 0) throw DataError("ATE for " + character + ": treatment arm is empty");
  if (r.n_control == 0) throw DataError("ATE for " + character + ": control arm is empty");

  const Eigen::Index n = Eigen::Index(records.size());
  Eigen::MatrixXd x(n, 4);
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const InterventionRecord& rec = records[std::size_t(i)];
    x(i, 0) = 1.0;
    x(i, 1) = double(rec.treatment);
    x(i, 2) = double(rec.total0);
    x(i, 3) = double(rec.total1);
    y(i) = rec.outcome;
  }
  const OlsResult fit = ols(x, y, {"intercept", "treatment", "total0", "total1"});
  r.coefficients = fit.coefficients;
  r.ate = fit.coefficients(1);
  r.standard_error = fit.standard_errors(1);
  return r;
}

AteReport ate_report(const InterventionCorpus& corpus) {
  AteReport report;
  report.corpus_size = corpus.size();
  for (std::size_t c = 0; c < corpus.vocab.size(); ++c) {
    try {
      report.results.push_back(estimate_ate(corpus.vocab.name(c), corpus.records(c)));
    } catch (const DataError& e) {
      report.failures.emplace_back(corpus.vocab.name(c), e.what());
    } catch (const NumericalError& e) {
      report.failures.emplace_back(corpus.vocab.name(c), e.what());
    }
  }
  std::stable_sort(report.results.begin(), report.results.end(),
                   [](const AteResult& a, const AteResult& b) { return a.ate > b.ate; });
  return report;
}

AteReport ate_report(const Model& m, const CorpusConfig& cfg, int threads) {
  return ate_report(build_intervention_corpus(m, cfg, threads));
}

nlohmann::json to_json(const AteReport& r) {
  nlohmann::json results = nlohmann::json::array();
  for (const AteResult& a : r.results)
    results.push_back({{"character", a.character},
                       {"ate", a.ate},
                       {"stderr", a.standard_error},
                       {"n_treated", a.n_treated},
                       {"n_control", a.n_control},
                       {"coefficients",
                        {{"intercept", a.coefficients(0)},
                         {"treatment", a.coefficients(1)},
                         {"total0", a.coefficients(2)},
                         {"total1", a.coefficients(3)}}}});
  nlohmann::json failures = nlohmann::json::array();
  for (const auto& [name, why] : r.failures) failures.push_back({{"character", name}, {"error", why}});
  return {{"corpus_size", r.corpus_size}, {"results", results}, {"failures", failures}};
}

std::vector<std::vector<std::string>> csv_rows(const AteReport& r) {
  std::vector<std::vector<std::string>> rows;
  for (const AteResult& a : r.results)
    rows.push_back({a.character, format_double(a.ate), format_double(a.standard_error), std::to_string(a.n_treated),
                    std::to_string(a.n_control)});
  return rows;
}

}  // namespace moralmech
