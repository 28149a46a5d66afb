#include <gtest/gtest.h>

#include <numeric>

#include "moralmech/relevance.hpp"

using namespace moralmech;

namespace {

ModelConfig tiny() {
  ModelConfig cfg;
  cfg.d = 8;
  cfg.mlp_dim = 16;
  cfg.head_hidden = 4;
  return cfg;
}

std::vector<Scenario> scenarios(std::size_t n, std::uint64_t seed) {
  SyntheticConfig cfg;
  cfg.n = n;
  cfg.seed = seed;
  std::vector<Scenario> out;
  for (const auto& r : generate_synthetic(CharacterVocab::standard(), cfg).rows) out.push_back(r.scenario);
  return out;
}

double sum_scores(const RelevanceResult& r) {
  return std::accumulate(r.team0.begin(), r.team0.end(), 0.0) + std::accumulate(r.team1.begin(), r.team1.end(), 0.0);
}

}  // namespace

TEST(RelevanceMatrix, ZeroGradientsGiveIdentityAndUniformFallback) {
  Capture cap;
  for (int l = 0; l < 2; ++l) {
    cap.attention.push_back({Matrix::Constant(47, 47, 1.0 / 47), Matrix::Constant(47, 47, 1.0 / 47)});
    cap.attention_grad.push_back({Matrix::Zero(47, 47), Matrix::Zero(47, 47)});
  }
  const Matrix c = relevance_matrix(cap);
  EXPECT_TRUE(c.isIdentity());
  const RelevanceResult r = relevance_from_matrix(c, CharacterVocab::standard());
  EXPECT_TRUE(r.uniform_fallback);
  for (double s : r.team0) EXPECT_DOUBLE_EQ(s, 1.0 / 46);
  for (double s : r.team1) EXPECT_DOUBLE_EQ(s, 1.0 / 46);
  EXPECT_NEAR(sum_scores(r), 1.0, 1e-12);
}

TEST(RelevanceMatrix, SingleLayerClosedForm) {
  Matrix a = Matrix::Zero(47, 47), g = Matrix::Zero(47, 47);
  for (int j = 0; j < 47; ++j) {
    a(0, j) = 1.0 / 47;
    g(0, j) = 0.1 * (j % 5);  // non-negative
  }
  Capture cap;
  cap.attention.push_back({a});
  cap.attention_grad.push_back({g});
  const Matrix c = relevance_matrix(cap);
  Matrix expected = Matrix::Identity(47, 47);
  expected += (g.array() * a.array()).matrix();
  EXPECT_LT((c - expected).cwiseAbs().maxCoeff(), 1e-15);

  const RelevanceResult r = relevance_from_matrix(c, CharacterVocab::standard());
  const double total = expected.row(0).tail(46).sum();
  for (int i = 0; i < 23; ++i) {
    EXPECT_NEAR(r.team0[std::size_t(i)], expected(0, 1 + i) / total, 1e-15);
    EXPECT_NEAR(r.team1[std::size_t(i)], expected(0, 24 + i) / total, 1e-15);
  }
}

TEST(RelevanceMatrix, NegativeEvidenceIsClampedAndHeadsAveraged) {
  Matrix a = Matrix::Constant(3, 3, 0.5);
  Matrix g1 = Matrix::Constant(3, 3, 2.0), g2 = Matrix::Constant(3, 3, -2.0);
  Capture cap;
  cap.attention.push_back({a, a});
  cap.attention_grad.push_back({g1, g2});
  const Matrix c = relevance_matrix(cap);
  // mean(max(1, 0), max(-1, 0)) = 0.5
  EXPECT_DOUBLE_EQ(c(0, 1), 0.5);
  EXPECT_DOUBLE_EQ(c(0, 0), 1.5);
}

TEST(RelevanceMatrix, LayersMultiplyInOrder) {
  Matrix a0 = Matrix::Zero(3, 3), a1 = Matrix::Zero(3, 3);
  a0(0, 1) = 1.0;
  a1(1, 2) = 1.0;
  Capture cap;
  cap.attention = {{a0}, {a1}};
  cap.attention_grad = {{Matrix::Ones(3, 3)}, {Matrix::Ones(3, 3)}};
  const Matrix c = relevance_matrix(cap);
  const Matrix l0 = Matrix::Identity(3, 3) + a0, l1 = Matrix::Identity(3, 3) + a1;
  EXPECT_EQ(c, l0 * l1);
  EXPECT_NE(c, l1 * l0);
}

TEST(Relevance, NormalizedAndNonNegativeOnModel) {
  const Model m = make_model(tiny(), 3);
  for (const Scenario& s : scenarios(30, 4)) {
    for (const RelevanceResult& r : {relevance_single(s, m), relevance_symmetric(s, m)}) {
      EXPECT_NEAR(sum_scores(r), 1.0, 1e-6);
      for (double x : r.team0) EXPECT_GE(x, 0.0);
      for (double x : r.team1) EXPECT_GE(x, 0.0);
      EXPECT_EQ(r.ranked().size(), 46u);
    }
  }
}

TEST(Relevance, SymmetrizedIsExactlySwapInvariant) {
  const Model m = make_model(tiny(), 6);
  for (const Scenario& s : scenarios(30, 5)) {
    const RelevanceResult a = relevance_symmetric(s, m);
    const RelevanceResult b = remap_teams(relevance_symmetric(swap_teams(s), m));
    EXPECT_EQ(a.team0, b.team0);
    EXPECT_EQ(a.team1, b.team1);
    EXPECT_DOUBLE_EQ(a.probability, predict_symmetric(m, s));
  }
}

TEST(Relevance, MirroredScenarioScoresTeamsEqually) {
  const Model m = make_model(tiny(), 7);
  const CharacterVocab& v = m.config.vocab;
  const RelevanceResult r = relevance_symmetric(make_scenario(v, {{"Dog", 2}}, {{"Dog", 2}}), m);
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(r.team0[i], r.team1[i], 1e-10);
}

TEST(Relevance, SingleExplainsPredictedDecision) {
  // Flipping the sign of every gradient swaps which evidence survives the
  // clamp; relevance_single applies that flip when outcome 0 is predicted.
  const Model m = make_model(tiny(), 9);
  for (const Scenario& s : scenarios(20, 6)) {
    Capture cap;
    const double f = forward_capture(m, s, cap, true);
    if (f < 0.0)
      for (auto& layer : cap.attention_grad)
        for (Matrix& g : layer) g = -g;
    const RelevanceResult expected = relevance_from_matrix(relevance_matrix(cap), m.config.vocab);
    const RelevanceResult got = relevance_single(s, m);
    EXPECT_EQ(got.team0, expected.team0);
    EXPECT_EQ(got.team1, expected.team1);
    EXPECT_DOUBLE_EQ(got.probability, sigmoid(f));
  }
}

TEST(Relevance, RankingIsStableAndSerializable) {
  RelevanceResult r;
  r.team0.assign(23, 0.0);
  r.team1.assign(23, 0.0);
  r.team1[11] = 0.6;
  r.team0[0] = 0.2;
  r.team1[0] = 0.2;
  const auto ranked = r.ranked();
  EXPECT_EQ(ranked[0].token, "Criminal");
  EXPECT_EQ(ranked[0].team, 1);
  EXPECT_EQ(ranked[1].token, "Man");
  EXPECT_EQ(ranked[1].team, 0);
  EXPECT_EQ(ranked[2].team, 1);
  EXPECT_EQ(to_json(r).at("ranked").size(), 46u);
  EXPECT_EQ(csv_rows(r).front(), (std::vector<std::string>{"Criminal", "1", "0.6"}));
}
