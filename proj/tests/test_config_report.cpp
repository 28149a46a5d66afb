#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "moralmech/config.hpp"
#include "moralmech/error.hpp"
#include "moralmech/report.hpp"

using namespace moralmech;
using nlohmann::json;

TEST(Config, ParsesScalarsArraysAndSections) {
  const json c = parse_config_string(R"(
threads = 2   # trailing comment

[train]
epochs = 10
learning_rate = 1e-3
data = "data/train.csv"
grid = [[32, 2, 2],
        [64, 2, 2]]

[layerwise.dims.age]
privileged = ["Boy", "Girl"]
unprivileged = ["OldMan"]
flag = false
)");
  EXPECT_EQ(c.at("threads"), 2);
  EXPECT_EQ(c.at("train").at("epochs"), 10);
  EXPECT_DOUBLE_EQ(c.at("train").at("learning_rate").get<double>(), 1e-3);
  EXPECT_EQ(c.at("train").at("data"), "data/train.csv");
  EXPECT_EQ(c.at("train").at("grid"), json::parse("[[32,2,2],[64,2,2]]"));
  EXPECT_EQ(c.at("layerwise").at("dims").at("age").at("privileged"), json::parse(R"(["Boy","Girl"])"));
  EXPECT_EQ(c.at("layerwise").at("dims").at("age").at("flag"), false);
  EXPECT_TRUE(c.at("train").at("epochs").is_number_integer());
}

TEST(Config, HashInsideStringIsNotAComment) {
  const json c = parse_config_string("[x]\nname = \"a # b\"\n");
  EXPECT_EQ(c.at("x").at("name"), "a # b");
}

TEST(Config, ErrorsCarryLineNumbers) {
  const std::vector<std::pair<std::string, int>> bad = {
      {"[train]\nepochs = \n", 2},
      {"[train\n", 1},
      {"a = 1\na = 2\n", 2},
      {"\n\nkey = [1, 2\n", 3},
      {"x = 'single'\n", 1},
  };
  for (const auto& [text, line] : bad) {
    try {
      parse_config_string(text);
      ADD_FAILURE() << "accepted: " << text;
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find("line " + std::to_string(line)), std::string::npos) << e.what();
    }
  }
}

TEST(Config, SectionLookup) {
  const json c = parse_config_string("[a]\nx = 1\n");
  EXPECT_EQ(config_section(c, "a").at("x"), 1);
  EXPECT_TRUE(config_section(c, "missing").empty());
  EXPECT_THROW(parse_config_file("/nonexistent/run.toml"), ConfigError);
}

TEST(Report, FormatDoubleRoundTrips) {
  for (double v : {0.1, 1.0 / 3.0, 1e-300, -2.5e17, 0.0, 123456789.125}) {
    const std::string s = format_double(v);
    EXPECT_EQ(std::stod(s), v) << s;
  }
  EXPECT_EQ(format_double(0.5), "0.5");
}

TEST(Report, ProvenanceAndHash) {
  const json cfg = {{"a", 1}, {"b", {1, 2}}};
  const json h = provenance("ate", cfg, 7);
  EXPECT_EQ(h.at("tool"), kToolName);
  EXPECT_EQ(h.at("version"), kToolVersion);
  EXPECT_EQ(h.at("command"), "ate");
  EXPECT_EQ(h.at("seed"), 7);
  EXPECT_EQ(h.at("config_hash"), config_hash(cfg));
  EXPECT_EQ(config_hash(cfg).size(), 16u);
  EXPECT_NE(config_hash(cfg), config_hash(json{{"a", 2}}));
  EXPECT_TRUE(h.contains("generated_at"));
}

TEST(Report, CsvAndJsonFiles) {
  const auto dir = std::filesystem::temp_directory_path() / "moralmech_report_test";
  std::filesystem::create_directories(dir);
  const json header = provenance("x", json::object(), 1);
  write_csv_report(dir / "r.csv", header, {"name", "value"}, {{"a", "1"}, {"b,c", "2"}});
  std::ifstream in(dir / "r.csv");
  std::string line;
  std::vector<std::string> data;
  while (std::getline(in, line))
    if (!line.empty() && line[0] != '#') data.push_back(line);
  ASSERT_EQ(data.size(), 3u);
  EXPECT_EQ(data[0], "name,value");
  EXPECT_EQ(data[1], "a,1");
  EXPECT_EQ(data[2], "\"b,c\",2");

  write_json_report(dir / "r.json", header, {{"k", 1}});
  std::ifstream jin(dir / "r.json");
  const json j = json::parse(jin);
  EXPECT_EQ(j.at("k"), 1);
  EXPECT_EQ(j.at("header"), header);
  std::filesystem::remove_all(dir);
}
