#include "moralmech/layerwise.hpp"

#include <algorithm>
#include <random>
#include <set>

#include "moralmech/error.hpp"
#include "moralmech/parallel.hpp"
#include "moralmech/report.hpp"
#include "moralmech/stats.hpp"

namespace moralmech {

void BiasDimension::validate(const CharacterVocab& vocab) const {
  if (privileged.empty() || unprivileged.empty())
    throw ConfigError("bias dimension '" + name + "' needs two non-empty token sets");
  std::set<std::string> seen;
  for (const auto* group : {&privileged, &unprivileged})
    for (const std::string& t : *group) {
      if (!vocab.contains(t)) throw ConfigError("bias dimension '" + name + "': unknown token '" + t + "'");
      if (!seen.insert(t).second)
        throw ConfigError("bias dimension '" + name + "': token '" + t + "' appears more than once");
    }
}

std::vector<BiasDimension> default_bias_dimensions() {
  const std::vector<std::string> humans = {
      "Man",      "Woman",    "Pregnant",      "Stroller",        "OldMan",      "OldWoman",
      "Boy",      "Girl",     "Homeless",      "LargeWoman",      "LargeMan",    "Criminal",
      "MaleExecutive", "FemaleExecutive", "MaleAthlete", "FemaleAthlete", "MaleDoctor", "FemaleDoctor"};
  std::vector<std::string> law_abiding;
  std::copy_if(humans.begin(), humans.end(), std::back_inserter(law_abiding),
               [](const std::string& t) { return t != "Criminal"; });
  return {
      {"legality", law_abiding, {"Criminal"}},
      {"gender",
       {"Man", "LargeMan", "OldMan", "Boy", "MaleExecutive", "MaleAthlete", "MaleDoctor"},
       {"Woman", "LargeWoman", "OldWoman", "Girl", "FemaleExecutive", "FemaleAthlete", "FemaleDoctor"}},
      {"social_role", {"MaleExecutive", "FemaleExecutive", "MaleDoctor", "FemaleDoctor"}, {"Homeless"}},
      {"age", {"Boy", "Girl", "Stroller"}, {"OldMan", "OldWoman"}},
      {"species", humans, {"Dog", "Cat"}},
  };
}

std::vector<ContrastiveScenario> generate_contrastive(const BiasDimension& dim, const CharacterVocab& vocab,
                                                      std::size_t n, std::uint64_t seed, int max_count) {
  if (n == 0) throw ConfigError("generate_contrastive needs n > 0");
  if (max_count < 1) throw ConfigError("generate_contrastive needs max_count >= 1");
  dim.validate(vocab);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick_p(0, dim.privileged.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_u(0, dim.unprivileged.size() - 1);
  std::uniform_int_distribution<int> pick_k(1, max_count);
  std::bernoulli_distribution coin(0.5);

  std::vector<ContrastiveScenario> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::string& p = dim.privileged[pick_p(rng)];
    const std::string& u = dim.unprivileged[pick_u(rng)];
    const int k = pick_k(rng);
    const int side = coin(rng) ? 1 : 0;
    const Outcome priv = make_outcome(vocab, {{p, k}});
    const Outcome unpriv = make_outcome(vocab, {{u, k}});
    ContrastiveScenario c;
    c.privileged_side = side;
    c.scenario = side == 0 ? Scenario{priv, unpriv} : Scenario{unpriv, priv};
    out.push_back(std::move(c));
  }
  return out;
}

AttentionStrategy parse_attention_strategy(const std::string& text) {
  if (text == "cls_row") return AttentionStrategy::ClsRow;
  if (text == "mean_into_relevant") return AttentionStrategy::MeanIntoRelevant;
  throw ConfigError("unknown attention strategy '" + text + "' (expected cls_row or mean_into_relevant)");
}

std::string to_string(AttentionStrategy s) {
  return s == AttentionStrategy::ClsRow ? "cls_row" : "mean_into_relevant";
}

std::vector<Eigen::Index> relevant_positions(const Scenario& s, const BiasDimension& dim, const CharacterVocab& vocab) {
  const Eigen::Index V = Eigen::Index(vocab.size());
  std::vector<Eigen::Index> out;
  for (const auto* group : {&dim.privileged, &dim.unprivileged})
    for (const std::string& t : *group) {
      const std::size_t i = vocab.index(t);
      if (s.outcome0.counts[i] > 0) out.push_back(1 + Eigen::Index(i));
      if (s.outcome1.counts[i] > 0) out.push_back(1 + V + Eigen::Index(i));
    }
  std::sort(out.begin(), out.end());
  return out;
}

double attention_scalar(const Matrix& attention, std::span<const Eigen::Index> positions, AttentionStrategy strategy) {
  double total = 0.0;
  if (strategy == AttentionStrategy::ClsRow) {
    for (Eigen::Index p : positions) total += attention(0, p);
    return total;
  }
  for (Eigen::Index p : positions) total += attention.col(p).sum();
  return total / double(attention.rows());
}

double attention_scalar(const Capture& capture, int layer, int head, std::span<const Eigen::Index> positions,
                        AttentionStrategy strategy) {
  return attention_scalar(capture.attention.at(std::size_t(layer)).at(std::size_t(head)), positions, strategy);
}

double bias_score(const ContrastiveScenario& c, const Model& m) {
  const double p = predict_symmetric(m, c.scenario);
  return c.privileged_side == 1 ? p : 1.0 - p;
}

ImportanceTable importance_from_samples(const std::string& dimension, const Matrix& alpha,
                                        const Eigen::VectorXd& bias, int layers, int heads) {
  if (alpha.rows() != bias.size()) throw std::invalid_argument("importance: alpha and bias lengths differ");
  if (alpha.cols() != Eigen::Index(layers) * heads) throw std::invalid_argument("importance: alpha has wrong width");
  ImportanceTable t;
  t.dimension = dimension;
  t.n = std::size_t(bias.size());
  t.importance = Matrix::Zero(layers, heads);
  t.variance = Matrix::Zero(layers, heads);
  t.correlation = Matrix::Zero(layers, heads);
  t.degenerate.assign(std::size_t(layers), std::vector<bool>(std::size_t(heads), false));
  t.layer_totals.assign(std::size_t(layers), 0.0);
  t.mean_bias = bias.size() ? bias.mean() : 0.0;
  const double var_b = stats::variance(bias);
  for (int l = 0; l < layers; ++l)
    for (int h = 0; h < heads; ++h) {
      const Eigen::VectorXd a = alpha.col(Eigen::Index(l) * heads + h);
      const double var_a = stats::variance(a);
      const bool degenerate = !(var_a > 0.0) || !(var_b > 0.0);
      const double corr = degenerate ? 0.0 : stats::pearson(a, bias);
      t.variance(l, h) = var_a;
      t.correlation(l, h) = corr;
      t.importance(l, h) = var_a * std::abs(corr);
      t.degenerate[std::size_t(l)][std::size_t(h)] = degenerate;
      t.layer_totals[std::size_t(l)] += t.importance(l, h);
    }
  return t;
}

ImportanceTable importance(const Model& m, const BiasDimension& dim, const ImportanceOptions& opts) {
  if (opts.n < 30) throw ConfigError("importance needs n >= 30 scenarios");
  const ModelConfig& cfg = m.config;
  const auto scenarios = generate_contrastive(dim, cfg.vocab, opts.n, opts.seed, opts.max_count);

  std::vector<Scenario> plain;
  plain.reserve(scenarios.size());
  for (const auto& c : scenarios) plain.push_back(c.scenario);
  const std::vector<double> p = predict_symmetric(m, plain, nullptr, opts.threads);
  Eigen::VectorXd bias(Eigen::Index(scenarios.size()));
  for (std::size_t i = 0; i < scenarios.size(); ++i)
    bias(Eigen::Index(i)) = scenarios[i].privileged_side == 1 ? p[i] : 1.0 - p[i];

  const int L = cfg.layers;
  const int H = cfg.heads;
  Matrix alpha(Eigen::Index(scenarios.size()), Eigen::Index(L) * H);
  parallel_chunks(scenarios.size(), 32, opts.threads, [&](std::size_t begin, std::size_t end) {
    Capture capture;
    for (std::size_t i = begin; i < end; ++i) {
      forward_capture(m, scenarios[i].scenario, capture);
      const auto positions = relevant_positions(scenarios[i].scenario, dim, cfg.vocab);
      for (int l = 0; l < L; ++l)
        for (int h = 0; h < H; ++h)
          alpha(Eigen::Index(i), Eigen::Index(l) * H + h) = attention_scalar(capture, l, h, positions, opts.strategy);
    }
  });
  return importance_from_samples(dim.name, alpha, bias, L, H);
}

nlohmann::json to_json(const ImportanceTable& t) {
  nlohmann::json cells = nlohmann::json::array();
  for (Eigen::Index l = 0; l < t.importance.rows(); ++l)
    for (Eigen::Index h = 0; h < t.importance.cols(); ++h)
      cells.push_back({{"layer", l},
                       {"head", h},
                       {"importance", t.importance(l, h)},
                       {"variance", t.variance(l, h)},
                       {"correlation", t.correlation(l, h)},
                       {"degenerate", bool(t.degenerate[std::size_t(l)][std::size_t(h)])}});
  return {{"bias", t.dimension}, {"n", t.n},           {"mean_bias_score", t.mean_bias},
          {"cells", cells},      {"layer_totals", t.layer_totals}};
}

std::vector<std::vector<std::string>> csv_rows(const ImportanceTable& t) {
  std::vector<std::vector<std::string>> rows;
  for (Eigen::Index l = 0; l < t.importance.rows(); ++l)
    for (Eigen::Index h = 0; h < t.importance.cols(); ++h)
      rows.push_back({t.dimension, std::to_string(l), std::to_string(h), format_double(t.importance(l, h))});
  return rows;
}

}  // namespace moralmech
