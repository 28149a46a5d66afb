#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "moralmech/cli.hpp"
#include "moralmech/error.hpp"

using namespace moralmech;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("moralmech_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  int run(std::vector<std::string> args) {
    args.insert(args.begin(), "moralmech");
    testing::internal::CaptureStdout();
    testing::internal::CaptureStderr();
    const int code = run_cli(args);
    out_ = testing::internal::GetCapturedStdout();
    err_ = testing::internal::GetCapturedStderr();
    return code;
  }

  static std::string read(const std::string& p) {
    std::ifstream in(p);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
  }

  // Report content without the timestamp.
  static std::string stable(const std::string& p) {
    std::stringstream in(read(p)), out;
    std::string line;
    while (std::getline(in, line))
      if (line.find("generated_at") == std::string::npos) out << line << '\n';
    return out.str();
  }

  // Generates data and trains a tiny checkpoint; returns its path.
  std::string tiny_checkpoint() {
    EXPECT_EQ(run({"gen", "--out", path("d.csv"), "--n", "400"}), kExitOk) << err_;
    EXPECT_EQ(run({"train", "--data", path("d.csv"), "--out", path("m.json"), "--d", "8", "--mlp-dim", "16",
                   "--head-hidden", "4", "--epochs", "1", "--batch-size", "64"}),
              kExitOk)
        << err_;
    return path("m.json");
  }

  fs::path dir_;
  std::string out_, err_;
};

}  // namespace

TEST(ScenarioJson, RoundTripAndErrors) {
  const CharacterVocab v = CharacterVocab::standard();
  const json j = json::parse(R"({"outcome0":{"Man":3},"outcome1":{"Criminal":3,"Dog":1}})");
  const Scenario s = scenario_from_json(j, v);
  EXPECT_EQ(s, make_scenario(v, {{"Man", 3}}, {{"Criminal", 3}, {"Dog", 1}}));
  EXPECT_EQ(scenario_to_json(s, v), j);
  EXPECT_THROW(scenario_from_json(json::parse(R"({"outcome0":{"Man":3}})"), v), DataError);
  EXPECT_THROW(scenario_from_json(json::parse(R"({"outcome0":{"Elf":1},"outcome1":{}})"), v), DataError);
  EXPECT_THROW(scenario_from_json(json::parse(R"({"outcome0":{"Man":1.5},"outcome1":{}})"), v), DataError);
}

TEST_F(CliTest, ExitCodes) {
  EXPECT_EQ(run({}), kExitConfig);
  EXPECT_EQ(run({"train", "--bogus"}), kExitConfig);
  EXPECT_EQ(run({"--help"}), kExitOk);
  EXPECT_EQ(run({"ate", "--checkpoint", path("missing.json")}), kExitData);
  EXPECT_NE(err_.find("does not exist"), std::string::npos);
  EXPECT_EQ(run({"train", "--data", path("missing.csv"), "--out", path("m.json")}), kExitData);
  EXPECT_FALSE(fs::exists(path("m.json")));
  EXPECT_EQ(run({"gen", "--out", path("d.csv"), "--flip-probability", "2"}), kExitConfig);
  EXPECT_EQ(run({"train", "--data", path("d.csv"), "--out", path("m.json"), "--d", "30"}), kExitConfig);
}

TEST_F(CliTest, ConfigFileUnknownKeysAndOverrides) {
  std::ofstream(path("run.toml")) << "[gen]\nn = 50\nout = \"" << path("a.csv") << "\"\n";
  EXPECT_EQ(run({"--config", path("run.toml"), "gen"}), kExitOk) << err_;
  EXPECT_TRUE(fs::exists(path("a.csv")));
  // A flag wins over the file.
  EXPECT_EQ(run({"--config", path("run.toml"), "gen", "--out", path("b.csv"), "--n", "7"}), kExitOk);
  EXPECT_EQ(json::parse(out_).at("rows"), 7);

  std::ofstream(path("typo.toml")) << "[gen]\nnn = 50\n";
  EXPECT_EQ(run({"--config", path("typo.toml"), "gen", "--out", path("c.csv")}), kExitConfig);
  EXPECT_NE(err_.find("nn"), std::string::npos);
  std::ofstream(path("section.toml")) << "[generate]\nn = 5\n";
  EXPECT_EQ(run({"--config", path("section.toml"), "gen", "--out", path("c.csv")}), kExitConfig);
  std::ofstream(path("type.toml")) << "[gen]\nn = \"many\"\n";
  EXPECT_EQ(run({"--config", path("type.toml"), "gen", "--out", path("c.csv")}), kExitConfig);
}

TEST_F(CliTest, AnalysesAreByteIdenticalAcrossRuns) {
  const std::string ck = tiny_checkpoint();
  const std::vector<std::vector<std::string>> commands = {
      {"ate", "--checkpoint", ck, "--n", "500", "--out", "R"},
      {"layerwise", "--checkpoint", ck, "--n", "40", "--out", "R"},
      {"circuit", "--checkpoint", ck, "--probe-n", "200", "--test-n", "100", "--steps", "20", "--batch", "32",
       "--controls", "2", "--out", "R"},
      {"explain", "--checkpoint", ck, "--scenario", R"({"outcome0":{"Man":3},"outcome1":{"Criminal":3}})", "--out",
       "R"},
      {"eval", "--checkpoint", ck, "--data", path("d.csv"), "--out", "R"},
  };
  for (auto cmd : commands) {
    const std::string prefix = path(cmd[0]);
    cmd.back() = prefix;
    ASSERT_EQ(run(cmd), kExitOk) << cmd[0] << ": " << err_;
    std::map<std::string, std::string> first;
    for (const char* ext : {".json", ".csv"})
      if (fs::exists(prefix + ext)) first[ext] = stable(prefix + ext);
    ASSERT_EQ(run(cmd), kExitOk) << cmd[0] << ": " << err_;
    ASSERT_FALSE(first.empty());
    for (const auto& [ext, text] : first) EXPECT_EQ(stable(prefix + ext), text) << cmd[0] << ext;
  }
  EXPECT_TRUE(fs::exists(path("ate.csv")));
  EXPECT_TRUE(fs::exists(path("layerwise.csv")));
  EXPECT_TRUE(fs::exists(path("explain.csv")));
}

TEST_F(CliTest, TrainWritesMetricsAndResumes) {
  ASSERT_EQ(run({"gen", "--out", path("d.csv"), "--n", "300"}), kExitOk);
  const std::vector<std::string> base = {"train", "--data", path("d.csv"), "--d", "8", "--mlp-dim", "16",
                                         "--head-hidden", "4", "--batch-size", "64"};
  auto with = [&](std::vector<std::string> extra) {
    std::vector<std::string> v = base;
    v.insert(v.end(), extra.begin(), extra.end());
    return v;
  };
  ASSERT_EQ(run(with({"--epochs", "2", "--out", path("full.json")})), kExitOk) << err_;
  EXPECT_NE(out_.find("\"epoch\":2"), std::string::npos);
  ASSERT_EQ(run(with({"--epochs", "1", "--out", path("half.json")})), kExitOk);
  ASSERT_EQ(run(with({"--epochs", "2", "--resume", path("half.json"), "--out", path("resumed.json")})), kExitOk)
      << err_;
  const json full = json::parse(read(path("full.json")));
  const json resumed = json::parse(read(path("resumed.json")));
  EXPECT_EQ(full.at("params"), resumed.at("params"));
  EXPECT_EQ(full.at("metrics").at("training"), resumed.at("metrics").at("training"));
  // The resumed run's metrics file holds only the epochs it ran.
  const std::string tail = stable(path("resumed.json.metrics.jsonl"));
  EXPECT_EQ(tail.find("\"epoch\":1,"), std::string::npos);
  EXPECT_NE(stable(path("full.json.metrics.jsonl")).find(tail), std::string::npos);
}

TEST_F(CliTest, GridWritesOneCheckpointPerConfiguration) {
  ASSERT_EQ(run({"gen", "--out", path("d.csv"), "--n", "300"}), kExitOk);
  ASSERT_EQ(run({"train", "--data", path("d.csv"), "--out", path("grid"), "--grid", "8x2x1,8x1x2", "--epochs", "1",
                 "--head-hidden", "4"}),
            kExitOk)
      << err_;
  EXPECT_TRUE(fs::exists(path("grid/d8_h2_l1.ckpt.json")));
  EXPECT_TRUE(fs::exists(path("grid/d8_h1_l2.ckpt.json")));
  const json grid = json::parse(read(path("grid/grid.json")));
  ASSERT_EQ(grid.at("grid").size(), 2u);
  EXPECT_EQ(grid.at("grid")[0].at("mlp_dim"), 32);
  EXPECT_EQ(run({"train", "--data", path("d.csv"), "--out", path("grid2"), "--grid", "8x2"}), kExitConfig);
}

TEST_F(CliTest, ExplainPrintsRankedRelevance) {
  const std::string ck = tiny_checkpoint();
  ASSERT_EQ(run({"explain", "--checkpoint", ck, "--scenario", R"({"outcome0":{"Man":3},"outcome1":{"Criminal":3}})"}),
            kExitOk)
      << err_;
  const json j = json::parse(out_);
  EXPECT_EQ(j.at("ranked").size(), 46u);
  EXPECT_TRUE(j.at("symmetric").get<bool>());
  double total = 0.0;
  for (const json& e : j.at("ranked")) total += e.at("score").get<double>();
  EXPECT_NEAR(total, 1.0, 1e-6);
  EXPECT_EQ(run({"explain", "--checkpoint", ck, "--scenario", "{not json"}), kExitData);
  EXPECT_EQ(run({"explain", "--checkpoint", ck}), kExitConfig);
}
