#include <gtest/gtest.h>

#include <random>

#include "moralmech/error.hpp"
#include "moralmech/layerwise.hpp"

using namespace moralmech;

namespace {

ModelConfig tiny() {
  ModelConfig cfg;
  cfg.d = 8;
  cfg.mlp_dim = 16;
  cfg.head_hidden = 4;
  return cfg;
}

}  // namespace

TEST(Dimensions, DefaultsAreValidAndDisjoint) {
  const CharacterVocab v = CharacterVocab::standard();
  const auto dims = default_bias_dimensions();
  ASSERT_EQ(dims.size(), 5u);
  for (const BiasDimension& d : dims) {
    EXPECT_NO_THROW(d.validate(v));
    for (const auto& p : d.privileged)
      for (const auto& u : d.unprivileged) EXPECT_NE(p, u);
  }
  EXPECT_EQ(dims[0].name, "legality");
  EXPECT_EQ(dims[0].unprivileged, std::vector<std::string>{"Criminal"});
}

TEST(Dimensions, ValidateRejectsBadGroups) {
  const CharacterVocab v = CharacterVocab::standard();
  EXPECT_THROW((BiasDimension{"x", {}, {"Dog"}}.validate(v)), ConfigError);
  EXPECT_THROW((BiasDimension{"x", {"Robot"}, {"Dog"}}.validate(v)), ConfigError);
  EXPECT_THROW((BiasDimension{"x", {"Dog"}, {"Dog"}}.validate(v)), ConfigError);
}

TEST(Contrastive, ScenariosPitGroupsAgainstEachOther) {
  const CharacterVocab v = CharacterVocab::standard();
  const BiasDimension dim = default_bias_dimensions()[4];  // species
  const auto cs = generate_contrastive(dim, v, 400, 3);
  ASSERT_EQ(cs.size(), 400u);
  int side1 = 0;
  for (const ContrastiveScenario& c : cs) {
    const Outcome& priv = c.privileged_side == 0 ? c.scenario.outcome0 : c.scenario.outcome1;
    const Outcome& unpriv = c.privileged_side == 0 ? c.scenario.outcome1 : c.scenario.outcome0;
    EXPECT_EQ(priv.total(), unpriv.total());
    for (const auto& u : dim.unprivileged) EXPECT_EQ(priv.counts[v.index(u)], 0);
    for (const auto& p : dim.privileged) EXPECT_EQ(unpriv.counts[v.index(p)], 0);
    side1 += c.privileged_side;
  }
  EXPECT_GT(side1, 120);
  EXPECT_LT(side1, 280);
}

TEST(AttentionScalar, ClsRowAndMeanStrategies) {
  Matrix a = Matrix::Zero(4, 4);
  a << 0.1, 0.2, 0.3, 0.4,  //
      0.5, 0.5, 0.0, 0.0,   //
      0.0, 1.0, 0.0, 0.0,   //
      0.25, 0.25, 0.25, 0.25;
  const std::vector<Eigen::Index> pos = {1, 3};
  EXPECT_DOUBLE_EQ(attention_scalar(a, pos, AttentionStrategy::ClsRow), 0.6);
  // Mean over all query rows of the mass sent to the relevant columns.
  EXPECT_DOUBLE_EQ(attention_scalar(a, pos, AttentionStrategy::MeanIntoRelevant), (0.6 + 0.5 + 1.0 + 0.5) / 4.0);
  EXPECT_EQ(parse_attention_strategy("mean_into_relevant"), AttentionStrategy::MeanIntoRelevant);
  EXPECT_EQ(to_string(AttentionStrategy::ClsRow), "cls_row");
  EXPECT_THROW(parse_attention_strategy("max"), ConfigError);
}

TEST(RelevantPositions, OnlyPresentDimensionTokens) {
  const CharacterVocab v = CharacterVocab::standard();
  const BiasDimension dim = default_bias_dimensions()[1];  // gender
  const Scenario s = make_scenario(v, {{"Man", 2}, {"Dog", 1}}, {{"Woman", 2}});
  const auto pos = relevant_positions(s, dim, v);
  const std::vector<Eigen::Index> want = {1 + Eigen::Index(v.index("Man")), 1 + 23 + Eigen::Index(v.index("Woman"))};
  EXPECT_EQ(pos, want);
}

TEST(Importance, ConstantAttentionGivesZero) {
  Matrix alpha = Matrix::Constant(100, 4, 0.25);
  Eigen::VectorXd b = Eigen::VectorXd::LinSpaced(100, 0, 1);
  const ImportanceTable t = importance_from_samples("x", alpha, b, 2, 2);
  EXPECT_TRUE(t.importance.isZero());
  EXPECT_TRUE(t.degenerate[0][0]);
  EXPECT_EQ(t.layer_totals, (std::vector<double>{0.0, 0.0}));
}

TEST(Importance, PerfectCorrelationGivesVariance) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 1);
  Eigen::VectorXd b(200);
  for (int i = 0; i < 200; ++i) b(i) = u(rng);
  Matrix alpha(200, 4);
  alpha.col(0) = 0.3 * b;
  alpha.col(1) = -2.0 * b.array() + 1.0;
  alpha.col(2) = b.array().square();
  alpha.col(3).setConstant(0.1);
  const ImportanceTable t = importance_from_samples("x", alpha, b, 2, 2);
  const auto pop_var = [](const Eigen::VectorXd& x) { return (x.array() - x.mean()).square().mean(); };
  EXPECT_NEAR(t.importance(0, 0), pop_var(alpha.col(0)), 1e-15);
  EXPECT_NEAR(t.importance(0, 1), pop_var(alpha.col(1)), 1e-14);
  EXPECT_LT(t.importance(1, 0), pop_var(alpha.col(2)));
  EXPECT_EQ(t.importance(1, 1), 0.0);
  EXPECT_NEAR(t.correlation(0, 1), -1.0, 1e-12);
  EXPECT_NEAR(t.layer_totals[0], t.importance(0, 0) + t.importance(0, 1), 1e-15);
}

TEST(Importance, ConstantBiasIsDegenerate) {
  Matrix alpha = Matrix::Random(50, 4);
  const ImportanceTable t = importance_from_samples("x", alpha, Eigen::VectorXd::Constant(50, 0.5), 2, 2);
  EXPECT_TRUE(t.importance.isZero());
  EXPECT_TRUE(t.degenerate[1][1]);
}

TEST(Importance, ModelRunProducesFullTable) {
  const Model m = make_model(tiny(), 2);
  ImportanceOptions opts;
  opts.n = 60;
  const ImportanceTable t = importance(m, default_bias_dimensions()[0], opts);
  EXPECT_EQ(t.importance.rows(), 2);
  EXPECT_EQ(t.importance.cols(), 2);
  EXPECT_TRUE((t.importance.array() >= 0.0).all());
  EXPECT_EQ(csv_rows(t).size(), 4u);
  opts.threads = 3;
  const ImportanceTable again = importance(m, default_bias_dimensions()[0], opts);
  EXPECT_EQ(to_json(t), to_json(again));
  opts.n = 10;
  EXPECT_THROW(importance(m, default_bias_dimensions()[0], opts), ConfigError);
}

TEST(BiasScore, IsProbabilityOfSparingPrivileged) {
  const Model m = make_model(tiny(), 4);
  const CharacterVocab& v = m.config.vocab;
  const Scenario s = make_scenario(v, {{"Criminal", 2}}, {{"Man", 2}});
  const double p1 = predict_symmetric(m, s);
  EXPECT_DOUBLE_EQ(bias_score({s, 1}, m), p1);
  EXPECT_NEAR(bias_score({s, 0}, m), 1.0 - p1, 1e-15);
}
