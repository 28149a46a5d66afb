#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace moralmech {

inline constexpr std::size_t kVocabSize = 23;

/// Ordered roster of the 23 token types. The order is part of a trained
/// model: token slot i of each outcome always holds character i.
class CharacterVocab {
 public:
  /// The 20 standard characters followed by CrossingSignal, Intervention and
  /// Barrier as count-valued context tokens.
  static CharacterVocab standard();

  /// Throws DataError unless `names` has exactly 23 unique entries.
  explicit CharacterVocab(std::vector<std::string> names);

  std::size_t size() const { return names_.size(); }
  const std::string& name(std::size_t i) const { return names_.at(i); }
  const std::vector<std::string>& names() const { return names_; }
  /// Index of `name`; throws DataError for tokens outside the vocabulary.
  std::size_t index(const std::string& name) const;
  bool contains(const std::string& name) const { return lookup_.contains(name); }

  bool operator==(const CharacterVocab& other) const { return names_ == other.names_; }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, std::size_t> lookup_;
};

/// Default context tokens: drawn as 0/1 by the synthetic generator.
std::vector<std::string> default_context_tokens();

/// Cardinalities per vocabulary slot for one side of a dilemma.
struct Outcome {
  std::vector<int> counts;

  int total() const;
  bool operator==(const Outcome&) const = default;
};

/// Builds an outcome from sparse token counts. Throws DataError for unknown
/// tokens or negative counts.
Outcome make_outcome(const CharacterVocab& vocab, const std::map<std::string, int>& counts);

struct Scenario {
  Outcome outcome0;
  Outcome outcome1;

  bool operator==(const Scenario&) const = default;
};

Scenario make_scenario(const CharacterVocab& vocab, const std::map<std::string, int>& outcome0,
                       const std::map<std::string, int>& outcome1);

struct LabeledScenario {
  Scenario scenario;
  int label = 0;  ///< 1 = outcome1 preferred
  std::string scenario_id;
};

struct Dataset {
  CharacterVocab vocab = CharacterVocab::standard();
  std::vector<LabeledScenario> rows;

  std::size_t size() const { return rows.size(); }
  bool empty() const { return rows.empty(); }
};

Scenario swap_teams(const Scenario& s);

/// Exact, order-sensitive text key for a scenario: the counts of outcome0 and
/// outcome1 in vocabulary order.
std::string canonical_signature(const Scenario& s);

// CSV: columns <Token>0 and <Token>1 for each token, `label`, optional
// `scenario_id`. A header row is required.
Dataset parse_dataset(std::istream& in, const CharacterVocab& vocab);
Dataset parse_dataset(const std::filesystem::path& path, const CharacterVocab& vocab);
void write_dataset(std::ostream& out, const Dataset& d);
void write_dataset(const std::filesystem::path& path, const Dataset& d);

/// Per-token weights aligned with a vocabulary.
using TokenWeights = std::vector<double>;

/// Resolves a name -> weight table against `vocab`. Throws ConfigError when a
/// token is missing or unknown.
TokenWeights weights_from_map(const CharacterVocab& vocab, const std::map<std::string, double>& table);

/// Planted per-token weights used by the synthetic generator by default:
/// a strict hierarchy with Pregnant and Stroller on top and Criminal last.
std::map<std::string, double> reference_weight_table();

/// Sum over tokens of count * weight.
double weighted_total(const Outcome& o, const TokenWeights& w);

struct SyntheticConfig {
  std::size_t n = 50000;
  std::uint64_t seed = 7;
  TokenWeights weights;  ///< empty = all ones
  double flip_probability = 0.0;
  std::vector<std::string> context_tokens = default_context_tokens();
  int max_distinct = 5;
  int max_count = 5;
};

/// Draws one outcome: 1..max_distinct distinct non-context characters with
/// counts in 1..max_count, context tokens present with probability 1/2.
Outcome sample_outcome(const CharacterVocab& vocab, const std::vector<bool>& is_context, int max_distinct,
                       int max_count, std::mt19937_64& rng);

/// 1 when outcome1 has the larger weighted total; exact ties are decided by a
/// fair coin drawn from `rng`.
int oracle_label(const Scenario& s, const TokenWeights& w, std::mt19937_64& rng);

Dataset generate_synthetic(const CharacterVocab& vocab, const SyntheticConfig& cfg);

/// Splits by canonical signature so that every row sharing a signature lands
/// in the same part. A fraction `val_fraction` of the distinct signatures
/// (at least one, at most all but one) goes to validation.
std::pair<Dataset, Dataset> split_unique(const Dataset& d, double val_fraction, std::uint64_t seed);

}  // namespace moralmech
