#include "moralmech/scenario.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "moralmech/error.hpp"

namespace moralmech {

CharacterVocab CharacterVocab::standard() {
  return CharacterVocab({"Man",          "Woman",           "Pregnant",        "Stroller",      "OldMan",
                         "OldWoman",     "Boy",             "Girl",            "Homeless",      "LargeWoman",
                         "LargeMan",     "Criminal",        "MaleExecutive",   "FemaleExecutive",
                         "MaleAthlete",  "FemaleAthlete",   "MaleDoctor",      "FemaleDoctor",  "Dog",
                         "Cat",          "CrossingSignal",  "Intervention",    "Barrier"});
}

CharacterVocab::CharacterVocab(std::vector<std::string> names) : names_(std::move(names)) {
  if (names_.size() != kVocabSize)
    throw DataError("vocabulary must list exactly " + std::to_string(kVocabSize) + " tokens, got " +
                    std::to_string(names_.size()));
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i].empty()) throw DataError("vocabulary token names must be non-empty");
    if (!lookup_.emplace(names_[i], i).second) throw DataError("duplicate vocabulary token: " + names_[i]);
  }
}

std::size_t CharacterVocab::index(const std::string& name) const {
  auto it = lookup_.find(name);
  if (it == lookup_.end()) throw DataError("token not in vocabulary: " + name);
  return it->second;
}

std::vector<std::string> default_context_tokens() { return {"CrossingSignal", "Intervention", "Barrier"}; }

int Outcome::total() const { return std::accumulate(counts.begin(), counts.end(), 0); }

Outcome make_outcome(const CharacterVocab& vocab, const std::map<std::string, int>& counts) {
  Outcome o;
  o.counts.assign(vocab.size(), 0);
  for (const auto& [name, n] : counts) {
    if (n < 0) throw DataError("negative count for token " + name);
    o.counts[vocab.index(name)] = n;
  }
  return o;
}

Scenario make_scenario(const CharacterVocab& vocab, const std::map<std::string, int>& outcome0,
                       const std::map<std::string, int>& outcome1) {
  return {make_outcome(vocab, outcome0), make_outcome(vocab, outcome1)};
}

Scenario swap_teams(const Scenario& s) { return {s.outcome1, s.outcome0}; }

std::string canonical_signature(const Scenario& s) {
  std::string key;
  key.reserve(4 * (s.outcome0.counts.size() + s.outcome1.counts.size()));
  auto append = [&key](const Outcome& o) {
    for (std::size_t i = 0; i < o.counts.size(); ++i) {
      if (i) key += ',';
      key += std::to_string(o.counts[i]);
    }
  };
  append(s.outcome0);
  key += '|';
  append(s.outcome1);
  return key;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

long parse_integer(const std::string& text, std::size_t line, const std::string& column) {
  long value = 0;
  const char* first = text.data();
  const char* last = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last || text.empty())
    throw DataError("line " + std::to_string(line) + ": malformed integer '" + text + "' in column " + column);
  return value;
}

}  // namespace

Dataset parse_dataset(std::istream& in, const CharacterVocab& vocab) {
  Dataset d;
  d.vocab = vocab;
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) throw DataError("dataset: missing header row");
  ++line_no;
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3);  // UTF-8 BOM
  if (!line.empty() && line.back() == '\r') line.pop_back();

  enum class Kind { Count, Label, Id };
  struct Column {
    Kind kind;
    int team = 0;
    std::size_t token = 0;
    std::string name;
  };
  std::vector<Column> columns;
  std::set<std::string> seen;
  for (std::string name : split_csv_line(line)) {
    name = trim(name);
    if (!seen.insert(name).second) throw DataError("line 1: duplicate column " + name);
    if (name == "label") {
      columns.push_back({Kind::Label, 0, 0, name});
    } else if (name == "scenario_id") {
      columns.push_back({Kind::Id, 0, 0, name});
    } else {
      const char last = name.empty() ? '\0' : name.back();
      const std::string token = name.empty() ? "" : name.substr(0, name.size() - 1);
      if ((last != '0' && last != '1') || !vocab.contains(token)) throw DataError("line 1: unknown column " + name);
      columns.push_back({Kind::Count, last - '0', vocab.index(token), name});
    }
  }
  if (!seen.contains("label")) throw DataError("line 1: missing column label");
  for (const std::string& token : vocab.names())
    for (const char* suffix : {"0", "1"})
      if (!seen.contains(token + suffix)) throw DataError("line 1: missing column " + token + suffix);

  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != columns.size())
      throw DataError("line " + std::to_string(line_no) + ": expected " + std::to_string(columns.size()) +
                      " fields, got " + std::to_string(fields.size()));
    LabeledScenario row;
    row.scenario.outcome0.counts.assign(vocab.size(), 0);
    row.scenario.outcome1.counts.assign(vocab.size(), 0);
    for (std::size_t c = 0; c < columns.size(); ++c) {
      const Column& col = columns[c];
      const std::string field = trim(fields[c]);
      switch (col.kind) {
        case Kind::Count: {
          const long v = parse_integer(field, line_no, col.name);
          if (v < 0) throw DataError("line " + std::to_string(line_no) + ": negative count in column " + col.name);
          auto& counts = col.team == 0 ? row.scenario.outcome0.counts : row.scenario.outcome1.counts;
          counts[col.token] = int(v);
          break;
        }
        case Kind::Label: {
          const long v = parse_integer(field, line_no, col.name);
          if (v != 0 && v != 1)
            throw DataError("line " + std::to_string(line_no) + ": label must be 0 or 1, got " + field);
          row.label = int(v);
          break;
        }
        case Kind::Id:
          row.scenario_id = field;
          break;
      }
    }
    d.rows.push_back(std::move(row));
  }
  return d;
}

Dataset parse_dataset(const std::filesystem::path& path, const CharacterVocab& vocab) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset " + path.string());
  return parse_dataset(in, vocab);
}

void write_dataset(std::ostream& out, const Dataset& d) {
  const bool with_ids =
      std::any_of(d.rows.begin(), d.rows.end(), [](const LabeledScenario& r) { return !r.scenario_id.empty(); });
  for (int team = 0; team < 2; ++team)
    for (const std::string& token : d.vocab.names()) out << token << team << ',';
  out << "label";
  if (with_ids) out << ",scenario_id";
  out << '\n';
  for (const LabeledScenario& r : d.rows) {
    for (int c : r.scenario.outcome0.counts) out << c << ',';
    for (int c : r.scenario.outcome1.counts) out << c << ',';
    out << r.label;
    if (with_ids) out << ',' << r.scenario_id;
    out << '\n';
  }
}

void write_dataset(const std::filesystem::path& path, const Dataset& d) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write dataset " + path.string());
  write_dataset(out, d);
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

TokenWeights weights_from_map(const CharacterVocab& vocab, const std::map<std::string, double>& table) {
  TokenWeights w(vocab.size(), 0.0);
  std::vector<bool> set(vocab.size(), false);
  for (const auto& [name, value] : table) {
    if (!vocab.contains(name)) throw ConfigError("weight given for unknown token " + name);
    w[vocab.index(name)] = value;
    set[vocab.index(name)] = true;
  }
  for (std::size_t i = 0; i < vocab.size(); ++i)
    if (!set[i]) throw ConfigError("weight table is missing token " + vocab.name(i));
  return w;
}

std::map<std::string, double> reference_weight_table() {
  return {{"Man", 1.0},          {"Woman", 1.1},           {"Pregnant", 2.0},      {"Stroller", 1.9},
          {"OldMan", 0.7},       {"OldWoman", 0.65},       {"Boy", 1.6},           {"Girl", 1.7},
          {"Homeless", 0.6},     {"LargeWoman", 0.9},      {"LargeMan", 0.85},     {"Criminal", 0.3},
          {"MaleExecutive", 1.2}, {"FemaleExecutive", 1.25}, {"MaleAthlete", 1.3},  {"FemaleAthlete", 1.35},
          {"MaleDoctor", 1.4},   {"FemaleDoctor", 1.45},   {"Dog", 0.45},          {"Cat", 0.4},
          {"CrossingSignal", 0.8}, {"Intervention", 0.95}, {"Barrier", 0.55}};
}

double weighted_total(const Outcome& o, const TokenWeights& w) {
  double total = 0.0;
  for (std::size_t i = 0; i < o.counts.size(); ++i) total += double(o.counts[i]) * w[i];
  return total;
}

Outcome sample_outcome(const CharacterVocab& vocab, const std::vector<bool>& is_context, int max_distinct,
                       int max_count, std::mt19937_64& rng) {
  std::vector<std::size_t> characters;
  for (std::size_t i = 0; i < vocab.size(); ++i)
    if (!is_context[i]) characters.push_back(i);
  Outcome o;
  o.counts.assign(vocab.size(), 0);
  const int limit = std::min<int>(max_distinct, int(characters.size()));
  const int k = std::uniform_int_distribution<int>(1, limit)(rng);
  // Partial Fisher-Yates: the first k entries become a uniform k-subset.
  for (int i = 0; i < k; ++i) {
    const std::size_t j = std::uniform_int_distribution<std::size_t>(std::size_t(i), characters.size() - 1)(rng);
    std::swap(characters[std::size_t(i)], characters[j]);
    o.counts[characters[std::size_t(i)]] = std::uniform_int_distribution<int>(1, max_count)(rng);
  }
  for (std::size_t i = 0; i < vocab.size(); ++i)
    if (is_context[i]) o.counts[i] = std::bernoulli_distribution(0.5)(rng) ? 1 : 0;
  return o;
}

int oracle_label(const Scenario& s, const TokenWeights& w, std::mt19937_64& rng) {
  const double left = weighted_total(s.outcome0, w);
  const double right = weighted_total(s.outcome1, w);
  if (right > left) return 1;
  if (right < left) return 0;
  return std::bernoulli_distribution(0.5)(rng) ? 1 : 0;
}

Dataset generate_synthetic(const CharacterVocab& vocab, const SyntheticConfig& cfg) {
  if (cfg.n == 0) throw ConfigError("synthetic generation needs n > 0");
  if (cfg.flip_probability < 0.0 || cfg.flip_probability > 1.0)
    throw ConfigError("flip probability must lie in [0, 1]");
  TokenWeights w = cfg.weights.empty() ? TokenWeights(vocab.size(), 1.0) : cfg.weights;
  if (w.size() != vocab.size()) throw ConfigError("weights do not cover the vocabulary");
  std::vector<bool> is_context(vocab.size(), false);
  for (const std::string& name : cfg.context_tokens) {
    if (!vocab.contains(name)) throw ConfigError("unknown context token " + name);
    is_context[vocab.index(name)] = true;
  }

  std::mt19937_64 rng(cfg.seed);
  Dataset d;
  d.vocab = vocab;
  d.rows.reserve(cfg.n);
  for (std::size_t i = 0; i < cfg.n; ++i) {
    LabeledScenario row;
    row.scenario.outcome0 = sample_outcome(vocab, is_context, cfg.max_distinct, cfg.max_count, rng);
    row.scenario.outcome1 = sample_outcome(vocab, is_context, cfg.max_distinct, cfg.max_count, rng);
    row.label = oracle_label(row.scenario, w, rng);
    if (cfg.flip_probability > 0.0 && std::bernoulli_distribution(cfg.flip_probability)(rng)) row.label = 1 - row.label;
    d.rows.push_back(std::move(row));
  }
  return d;
}

std::pair<Dataset, Dataset> split_unique(const Dataset& d, double val_fraction, std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("validation fraction must lie in (0, 1)");
  std::unordered_map<std::string, std::size_t> group_of;
  std::vector<std::size_t> row_group(d.rows.size());
  for (std::size_t i = 0; i < d.rows.size(); ++i) {
    auto [it, inserted] = group_of.emplace(canonical_signature(d.rows[i].scenario), group_of.size());
    row_group[i] = it->second;
  }
  const std::size_t groups = group_of.size();
  if (groups < 2) throw DataError("split_unique needs at least 2 distinct scenarios");

  // Groups are numbered by first appearance, so the permutation depends only
  // on the data order and the seed.
  std::vector<std::size_t> order(groups);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto want = std::size_t(std::llround(val_fraction * double(groups)));
  const std::size_t n_val = std::clamp<std::size_t>(want, 1, groups - 1);
  std::vector<bool> in_val(groups, false);
  for (std::size_t i = 0; i < n_val; ++i) in_val[order[i]] = true;

  Dataset train, val;
  train.vocab = d.vocab;
  val.vocab = d.vocab;
  for (std::size_t i = 0; i < d.rows.size(); ++i) (in_val[row_group[i]] ? val : train).rows.push_back(d.rows[i]);
  return {std::move(train), std::move(val)};
}

}  // namespace moralmech
