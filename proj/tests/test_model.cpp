#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "moralmech/error.hpp"
#include "moralmech/model.hpp"

using namespace moralmech;

namespace {

std::vector<Scenario> random_scenarios(std::size_t n, std::uint64_t seed) {
  SyntheticConfig cfg;
  cfg.n = n;
  cfg.seed = seed;
  std::vector<Scenario> out;
  for (const auto& r : generate_synthetic(CharacterVocab::standard(), cfg).rows) out.push_back(r.scenario);
  return out;
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.d = 8;
  cfg.heads = 2;
  cfg.layers = 2;
  cfg.mlp_dim = 16;
  cfg.head_hidden = 4;
  return cfg;
}

// Rebuilds the parameter structure from a flat list of tape handles.
ParamVars vars_from(const ModelConfig& cfg, std::span<const Var> flat) {
  ParamVars v;
  v.layers.resize(std::size_t(cfg.layers));
  std::size_t i = 0;
  v.visit([&](const std::string&, Var& var) { var = flat[i++]; });
  return v;
}

}  // namespace

TEST(Config, ValidateRejectsInconsistentShapes) {
  ModelConfig cfg;
  cfg.d = 30;  // not divisible by 4
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = ModelConfig{};
  cfg.heads = 3;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = ModelConfig{};
  cfg.layers = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  EXPECT_NO_THROW(ModelConfig{}.validate());
}

TEST(Params, CountMatchesLayout) {
  const ModelConfig cfg;  // d=64, H=2, L=2, mlp 256, head 32
  const int d = cfg.d, m = cfg.mlp_dim, V = 23;
  const std::size_t embeddings = V * d / 2 + (cfg.max_cardinality + 1) * d / 4 + 2 * d / 4 + d;
  const std::size_t layer = 2 * d + (d * d + d) + d * d + (d * d + d) + (d * d + d) + 2 * d + (d * m + m) + (m * d + d);
  const std::size_t head = 2 * d + (d * cfg.head_hidden + cfg.head_hidden) + (cfg.head_hidden + 1);
  const ModelParams p = init_params(cfg, 1);
  EXPECT_EQ(parameter_count(p), embeddings + 2 * layer + head);
  EXPECT_EQ(parameter_count(p), 103089u);
}

TEST(Params, InitIsSeededAndFlattenRoundTrips) {
  const ModelConfig cfg = tiny_config();
  const ModelParams a = init_params(cfg, 5), b = init_params(cfg, 5), c = init_params(cfg, 6);
  const auto fa = flatten(a), fb = flatten(b), fc = flatten(c);
  bool differs = false;
  for (std::size_t i = 0; i < fa.size(); ++i) {
    EXPECT_EQ(fa[i], fb[i]);
    differs = differs || fa[i] != fc[i];
  }
  EXPECT_TRUE(differs);
  ModelParams z = zero_params(cfg);
  unflatten(fa, z);
  const auto fz = flatten(z);
  for (std::size_t i = 0; i < fa.size(); ++i) EXPECT_EQ(fa[i], fz[i]);
}

TEST(Embedding, LayoutIsClsThenTeams) {
  const Model m = make_model(tiny_config(), 2);
  const CharacterVocab& v = m.config.vocab;
  const Scenario s = make_scenario(v, {{"Dog", 2}}, {{"Man", 1}});
  const Matrix e = embed_scenario(s, m);
  ASSERT_EQ(e.rows(), 47);
  ASSERT_EQ(e.cols(), 8);
  EXPECT_EQ(Matrix(e.row(0)), m.params.cls);
  const Eigen::Index dog = Eigen::Index(v.index("Dog"));
  // character (4) | cardinality (2) | team (2)
  EXPECT_EQ(Matrix(e.block(1 + dog, 0, 1, 4)), Matrix(m.params.char_table.row(dog)));
  EXPECT_EQ(Matrix(e.block(1 + dog, 4, 1, 2)), Matrix(m.params.card_table.row(2)));
  EXPECT_EQ(Matrix(e.block(1 + dog, 6, 1, 2)), Matrix(m.params.team_table.row(0)));
  EXPECT_EQ(Matrix(e.block(1 + 23 + dog, 4, 1, 2)), Matrix(m.params.card_table.row(0)));
  EXPECT_EQ(Matrix(e.block(1 + 23, 6, 1, 2)), Matrix(m.params.team_table.row(1)));
}

TEST(Embedding, CountAboveCardinalityIsDataError) {
  const Model m = make_model(tiny_config(), 2);
  const Scenario s = make_scenario(m.config.vocab, {{"Dog", 11}}, {{"Man", 1}});
  EXPECT_THROW(forward(m, s), DataError);
}

TEST(Forward, BatchedMatchesSingleAndFullMatchesClsOnly) {
  const Model m = make_model(tiny_config(), 3);
  const auto scenarios = random_scenarios(40, 9);
  const auto batched = forward_logits(m, scenarios, nullptr, 2);
  for (std::size_t i = 0; i < scenarios.size(); ++i) {
    EXPECT_NEAR(batched[i], forward(m, scenarios[i]), 1e-12);
    Capture cap;
    EXPECT_NEAR(forward_capture(m, scenarios[i], cap), batched[i], 1e-12);
    ASSERT_EQ(cap.attention.size(), 2u);
    ASSERT_EQ(cap.attention[1].size(), 2u);
    EXPECT_EQ(cap.attention[1][0].rows(), 47);
    for (Eigen::Index r = 0; r < 47; ++r) EXPECT_NEAR(cap.attention[1][0].row(r).sum(), 1.0, 1e-12);
  }
}

TEST(Forward, LogitGradientsMatchFiniteDifferences) {
  const ModelConfig cfg = tiny_config();
  const ModelParams p = init_params(cfg, 4);
  const std::vector<Matrix> flat = flatten(p);
  for (const Scenario& s : random_scenarios(3, 21)) {
    auto f = [&](Tape& t, std::span<const Var> v) {
      return forward_on_tape(t, vars_from(cfg, v), cfg, std::span<const Scenario>(&s, 1)).logits;
    };
    const GradCheckResult r = finite_difference_check(f, flat);
    EXPECT_LT(r.max_relative_error, 1e-4) << "param " << r.worst_param << " analytic " << r.analytic << " numeric "
                                          << r.numeric;
  }
}

TEST(Forward, AttentionGradientsOnlyReachClsRowOfLastLayer) {
  const Model m = make_model(tiny_config(), 8);
  const Scenario s = random_scenarios(1, 3).front();
  Capture cap;
  forward_capture(m, s, cap, true);
  ASSERT_EQ(cap.attention_grad.size(), 2u);
  for (std::size_t l = 0; l < 2; ++l) {
    for (std::size_t h = 0; h < 2; ++h) {
      const Matrix& a = cap.attention[l][h];
      const Matrix& g = cap.attention_grad[l][h];
      ASSERT_EQ(g.rows(), a.rows());
      ASSERT_TRUE(g.allFinite());
    }
  }
  const Matrix& g_last = cap.attention_grad[1][0];
  EXPECT_TRUE(g_last.bottomRows(46).isZero());
  EXPECT_FALSE(g_last.row(0).isZero());
}

TEST(Symmetry, SwapComplementsAndSymmetricScenariosAreHalf) {
  const Model m = make_model(tiny_config(), 11);
  const auto scenarios = random_scenarios(500, 13);
  for (const Scenario& s : scenarios) {
    EXPECT_LT(std::abs(predict_symmetric(m, s) + predict_symmetric(m, swap_teams(s)) - 1.0), 1e-12);
    const Scenario mirror{s.outcome0, s.outcome0};
    EXPECT_EQ(predict_symmetric(m, mirror), 0.5);
    EXPECT_EQ(predict_symmetric(m, std::vector<Scenario>{mirror}).front(), 0.5);
  }
  const auto batched = predict_symmetric(m, scenarios, nullptr, 3);
  for (std::size_t i = 0; i < scenarios.size(); ++i) EXPECT_NEAR(batched[i], predict_symmetric(m, scenarios[i]), 1e-12);
}

TEST(Symmetry, ProbabilityFormula) {
  EXPECT_DOUBLE_EQ(symmetric_probability(0.0, 0.0), 0.5);
  EXPECT_NEAR(symmetric_probability(2.0, -1.0), 0.5 * (sigmoid(2.0) + 1.0 - sigmoid(-1.0)), 1e-15);
  EXPECT_EQ(symmetric_probability(1.3, 1.3), 0.5);
}

TEST(Gate, IdentityMaskIsBitwiseNeutral) {
  const Model m = make_model(tiny_config(), 12);
  const auto scenarios = random_scenarios(50, 14);
  for (const char* site_name : {"mlp0", "mlp1", "attn0", "attn1"}) {
    for (GateScope scope : {GateScope::ClsOnly, GateScope::AllPositions}) {
      const GateSite site = GateSite::parse(site_name, scope);
      const Gate gate{site, RowVector::Ones(site.width(m.config))};
      const auto plain = forward_logits(m, scenarios);
      const auto gated = forward_logits(m, scenarios, &gate);
      for (std::size_t i = 0; i < scenarios.size(); ++i) EXPECT_EQ(plain[i], gated[i]) << site_name;
    }
  }
}

TEST(Gate, ZeroMaskChangesLogitsAndSiteNamesParse) {
  const Model m = make_model(tiny_config(), 12);
  const Scenario s = random_scenarios(1, 15).front();
  const GateSite site = GateSite::parse("mlp1");
  EXPECT_EQ(site.name(), "mlp1");
  EXPECT_EQ(site.width(m.config), 16);
  EXPECT_EQ(GateSite::parse("attn0").width(m.config), 8);
  const Gate gate{site, RowVector::Zero(16)};
  EXPECT_NE(forward(m, s), forward(m, s, &gate));
  EXPECT_THROW(GateSite::parse("conv1"), ConfigError);
}

TEST(Checkpoint, RoundTripIsExact) {
  const Model m = make_model(tiny_config(), 17);
  const auto path = std::filesystem::temp_directory_path() / "moralmech_ckpt_roundtrip.json";
  Checkpoint ck;
  ck.model = m;
  ck.metrics = {{"note", "x"}};
  save_checkpoint(path, ck);
  const Checkpoint back = load_checkpoint(path);
  EXPECT_EQ(back.metrics, ck.metrics);
  const auto a = flatten(m.params), b = flatten(back.model.params);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
  const Scenario s = random_scenarios(1, 2).front();
  EXPECT_EQ(forward(m, s), forward(back.model, s));
  std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptFilesAreDataErrors) {
  const auto path = std::filesystem::temp_directory_path() / "moralmech_ckpt_corrupt.json";
  {
    std::ofstream(path) << "{not json";
  }
  EXPECT_THROW(load_checkpoint(path), DataError);
  save_checkpoint(path, make_model(tiny_config(), 1));
  std::ifstream in(path);
  nlohmann::json j = nlohmann::json::parse(in);
  j["version"] = 99;
  std::ofstream(path) << j.dump();
  EXPECT_THROW(load_checkpoint(path), DataError);
  EXPECT_THROW(load_checkpoint("/nonexistent/ckpt.json"), DataError);
  std::filesystem::remove(path);
}
