#include "moralmech/relevance.hpp"

#include <algorithm>
#include <cmath>

#include "moralmech/error.hpp"
#include "moralmech/report.hpp"

namespace moralmech {

namespace {

// Summing slot pairs (team0 + team1) makes the total independent of which
// team holds which score, bit for bit.
double pairwise_total(const std::vector<double>& a, const std::vector<double>& b) {
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) total += a[i] + b[i];
  return total;
}

void normalize(RelevanceResult& r) {
  const double total = pairwise_total(r.team0, r.team1);
  r.normalizer = total;
  if (!(total > 0.0) || !std::isfinite(total)) {
    const double u = 1.0 / double(r.team0.size() + r.team1.size());
    std::fill(r.team0.begin(), r.team0.end(), u);
    std::fill(r.team1.begin(), r.team1.end(), u);
    r.uniform_fallback = true;
    return;
  }
  for (double& x : r.team0) x /= total;
  for (double& x : r.team1) x /= total;
}

}  // namespace

double RelevanceResult::total() const { return pairwise_total(team0, team1); }

std::vector<RelevanceEntry> RelevanceResult::ranked() const {
  std::vector<RelevanceEntry> out;
  for (std::size_t i = 0; i < team0.size(); ++i) out.push_back({vocab.name(i), 0, team0[i]});
  for (std::size_t i = 0; i < team1.size(); ++i) out.push_back({vocab.name(i), 1, team1[i]});
  std::stable_sort(out.begin(), out.end(),
                   [](const RelevanceEntry& a, const RelevanceEntry& b) { return a.score > b.score; });
  return out;
}

Matrix relevance_matrix(const Capture& capture) {
  if (capture.attention.empty() || capture.attention_grad.size() != capture.attention.size())
    throw std::invalid_argument("relevance needs attention gradients for every layer");
  Matrix c;
  for (std::size_t l = 0; l < capture.attention.size(); ++l) {
    const auto& heads = capture.attention[l];
    const auto& grads = capture.attention_grad[l];
    const Eigen::Index n = heads.at(0).rows();
    Matrix avg = Matrix::Zero(n, n);
    for (std::size_t h = 0; h < heads.size(); ++h)
      avg.array() += (grads.at(h).array() * heads[h].array()).cwiseMax(0.0);
    avg /= double(heads.size());
    avg.diagonal().array() += 1.0;
    c = l == 0 ? avg : Matrix(c * avg);
  }
  return c;
}

RelevanceResult relevance_from_matrix(const Matrix& c, const CharacterVocab& vocab) {
  const Eigen::Index V = Eigen::Index(vocab.size());
  if (c.rows() != 2 * V + 1 || c.cols() != 2 * V + 1)
    throw std::invalid_argument("relevance matrix does not match the vocabulary");
  RelevanceResult r;
  r.vocab = vocab;
  r.team0.resize(std::size_t(V));
  r.team1.resize(std::size_t(V));
  for (Eigen::Index i = 0; i < V; ++i) {
    r.team0[std::size_t(i)] = std::max(0.0, c(0, 1 + i));
    r.team1[std::size_t(i)] = std::max(0.0, c(0, 1 + V + i));
  }
  normalize(r);
  return r;
}

RelevanceResult relevance_single(const Scenario& s, const Model& m) {
  Capture capture;
  const double logit = forward_capture(m, s, capture, true);
  if (!std::isfinite(logit)) throw NumericalError("relevance: non-finite logit");
  // Explain the predicted decision: when outcome 0 wins, its score is -f.
  if (logit < 0.0)
    for (auto& layer : capture.attention_grad)
      for (Matrix& g : layer) g = -g;
  RelevanceResult r = relevance_from_matrix(relevance_matrix(capture), m.config.vocab);
  r.probability = sigmoid(logit);
  return r;
}

RelevanceResult remap_teams(const RelevanceResult& r) {
  RelevanceResult out = r;
  std::swap(out.team0, out.team1);
  return out;
}

RelevanceResult relevance_symmetric(const Scenario& s, const Model& m) {
  const RelevanceResult a = relevance_single(s, m);
  const RelevanceResult b = remap_teams(relevance_single(swap_teams(s), m));
  RelevanceResult r;
  r.vocab = m.config.vocab;
  r.team0.resize(a.team0.size());
  r.team1.resize(a.team1.size());
  for (std::size_t i = 0; i < a.team0.size(); ++i) {
    r.team0[i] = 0.5 * (a.team0[i] + b.team0[i]);
    r.team1[i] = 0.5 * (a.team1[i] + b.team1[i]);
  }
  normalize(r);
  r.uniform_fallback = r.uniform_fallback || a.uniform_fallback || b.uniform_fallback;
  r.probability = predict_symmetric(m, s);
  return r;
}

nlohmann::json to_json(const RelevanceResult& r) {
  nlohmann::json ranked = nlohmann::json::array();
  for (const RelevanceEntry& e : r.ranked()) ranked.push_back({{"token", e.token}, {"team", e.team}, {"score", e.score}});
  return {{"probability", r.probability},
          {"normalizer", r.normalizer},
          {"uniform_fallback", r.uniform_fallback},
          {"ranked", ranked}};
}

std::vector<std::vector<std::string>> csv_rows(const RelevanceResult& r) {
  std::vector<std::vector<std::string>> rows;
  for (const RelevanceEntry& e : r.ranked()) rows.push_back({e.token, std::to_string(e.team), format_double(e.score)});
  return rows;
}

}  // namespace moralmech
