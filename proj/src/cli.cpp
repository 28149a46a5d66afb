#include "moralmech/cli.hpp"

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <random>
#include <set>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "CLI11.hpp"
#include "moralmech/causal.hpp"
#include "moralmech/circuit.hpp"
#include "moralmech/config.hpp"
#include "moralmech/error.hpp"
#include "moralmech/layerwise.hpp"
#include "moralmech/model.hpp"
#include "moralmech/relevance.hpp"
#include "moralmech/report.hpp"
#include "moralmech/trainer.hpp"

namespace moralmech {

using json = nlohmann::json;
namespace fs = std::filesystem;

Scenario scenario_from_json(const json& j, const CharacterVocab& vocab) {
  if (!j.is_object() || !j.contains("outcome0") || !j.contains("outcome1"))
    throw DataError("scenario must be an object with outcome0 and outcome1");
  auto side = [&](const char* key) {
    const json& o = j.at(key);
    if (!o.is_object()) throw DataError(std::string("scenario ") + key + " must map tokens to counts");
    std::map<std::string, int> counts;
    for (const auto& [token, count] : o.items()) {
      if (!count.is_number_integer()) throw DataError("scenario count for " + token + " must be an integer");
      counts[token] = count.get<int>();
    }
    return make_outcome(vocab, counts);
  };
  for (const auto& [key, value] : j.items())
    if (key != "outcome0" && key != "outcome1") throw DataError("scenario has unexpected field '" + key + "'");
  return {side("outcome0"), side("outcome1")};
}

json scenario_to_json(const Scenario& s, const CharacterVocab& vocab) {
  auto side = [&](const Outcome& o) {
    json out = json::object();
    for (std::size_t i = 0; i < vocab.size(); ++i)
      if (o.counts[i] != 0) out[vocab.name(i)] = o.counts[i];
    return out;
  };
  return {{"outcome0", side(s.outcome0)}, {"outcome1", side(s.outcome1)}};
}

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

namespace {

// Keys accepted in each config section; anything else is a typo and rejected.
const std::map<std::string, std::set<std::string>>& schema() {
  static const std::map<std::string, std::set<std::string>> s = {
      {"vocab", {"tokens"}},
      {"gen", {"n", "seed", "out", "flip_probability", "max_distinct", "max_count", "context_tokens", "weights"}},
      {"model", {"d", "heads", "layers", "mlp_dim", "head_hidden", "max_cardinality"}},
      {"train",
       {"data", "out", "val_fraction", "split_seed", "epochs", "batch_size", "learning_rate", "seed", "patience",
        "target_accuracy", "eval_every", "resume", "metrics", "grid"}},
      {"eval", {"checkpoint", "data", "out"}},
      {"ate", {"checkpoint", "n", "seed", "out", "max_distinct", "max_count", "context_tokens"}},
      {"layerwise", {"checkpoint", "n", "seed", "strategy", "dimensions", "max_count", "out", "dims"}},
      {"circuit",
       {"checkpoint", "site", "scope", "lambda", "beta_start", "beta_end", "steps", "batch", "lr", "init_logit",
        "temperature_scale", "seed", "weight_method", "train_fraction", "controls", "data", "probe_n", "test_n",
        "data_seed", "out"}},
      {"explain", {"checkpoint", "scenario", "scenario_file", "symmetric", "out"}},
  };
  return s;
}

void check_schema(const json& config) {
  for (const auto& [section, body] : config.items()) {
    if (section == "threads") continue;
    const auto it = schema().find(section);
    if (it == schema().end()) throw ConfigError("config: unknown section [" + section + "]");
    if (!body.is_object()) throw ConfigError("config: [" + section + "] must be a section");
    for (const auto& [key, value] : body.items())
      if (!it->second.contains(key)) throw ConfigError("config: unknown key '" + key + "' in [" + section + "]");
  }
}

// Typed access with config-level error messages.
class Section {
 public:
  Section(std::string name, json body) : name_(std::move(name)), body_(std::move(body)) {}

  bool has(const std::string& key) const { return body_.contains(key) && !body_.at(key).is_null(); }
  const json& raw(const std::string& key) const { return body_.at(key); }
  const json& body() const { return body_; }

  long long integer(const std::string& key, long long fallback) const {
    if (!has(key)) return fallback;
    if (!raw(key).is_number_integer()) fail(key, "an integer");
    return raw(key).get<long long>();
  }
  int int32(const std::string& key, int fallback) const {
    const long long v = integer(key, fallback);
    if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) fail(key, "a 32-bit integer");
    return int(v);
  }
  std::size_t count(const std::string& key, std::size_t fallback) const {
    const long long v = integer(key, (long long)fallback);
    if (v < 0) fail(key, "a non-negative integer");
    return std::size_t(v);
  }
  std::uint64_t seed(const std::string& key, std::uint64_t fallback) const {
    if (!has(key)) return fallback;
    if (raw(key).is_number_unsigned()) return raw(key).get<std::uint64_t>();
    if (raw(key).is_number_integer() && raw(key).get<long long>() >= 0) return std::uint64_t(raw(key).get<long long>());
    fail(key, "a non-negative integer");
  }
  double real(const std::string& key, double fallback) const {
    if (!has(key)) return fallback;
    if (!raw(key).is_number()) fail(key, "a number");
    return raw(key).get<double>();
  }
  bool boolean(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    if (!raw(key).is_boolean()) fail(key, "true or false");
    return raw(key).get<bool>();
  }
  std::string text(const std::string& key, const std::string& fallback) const {
    if (!has(key)) return fallback;
    if (!raw(key).is_string()) fail(key, "a string");
    return raw(key).get<std::string>();
  }
  std::string required_text(const std::string& key) const {
    if (!has(key)) throw ConfigError(name_ + "." + key + " is required");
    return text(key, "");
  }
  std::vector<std::string> strings(const std::string& key, std::vector<std::string> fallback) const {
    if (!has(key)) return fallback;
    if (!raw(key).is_array()) fail(key, "a list of strings");
    std::vector<std::string> out;
    for (const json& v : raw(key)) {
      if (!v.is_string()) fail(key, "a list of strings");
      out.push_back(v.get<std::string>());
    }
    return out;
  }

 private:
  [[noreturn]] void fail(const std::string& key, const std::string& what) const {
    throw ConfigError(name_ + "." + key + " must be " + what);
  }

  std::string name_;
  json body_;
};

struct Context {
  json config = json::object();  // file values merged with flag overrides
  int threads = 1;
  std::string command;

  Section section(const std::string& name) const { return Section(name, config_section(config, name)); }

  json effective(std::initializer_list<const char*> names) const {
    json out = json::object();
    for (const char* n : names) out[n] = config_section(config, n);
    out["threads"] = threads;
    return out;
  }
};

CharacterVocab vocab_from(const Context& ctx) {
  const Section v = ctx.section("vocab");
  if (!v.has("tokens")) return CharacterVocab::standard();
  try {
    return CharacterVocab(v.strings("tokens", {}));
  } catch (const DataError& e) {
    throw ConfigError(std::string("vocab.tokens: ") + e.what());
  }
}

Model load_model(const Context& ctx, const Section& sec) {
  const fs::path path = sec.required_text("checkpoint");
  if (!fs::exists(path)) throw DataError("checkpoint " + path.string() + " does not exist");
  Model m = load_checkpoint(path).model;
  if (ctx.section("vocab").has("tokens") && !(vocab_from(ctx) == m.config.vocab))
    throw DataError("checkpoint vocabulary does not match the configured vocabulary");
  return m;
}

Dataset load_dataset(const fs::path& path, const CharacterVocab& vocab) {
  if (!fs::exists(path)) throw DataError("dataset " + path.string() + " does not exist");
  return parse_dataset(path, vocab);
}

void emit_json_line(std::ostream& out, const json& j) { out << j.dump() << '\n' << std::flush; }

void write_reports(const std::string& prefix, const json& header, const json& body,
                   const std::vector<std::string>& columns, const std::vector<std::vector<std::string>>& rows) {
  const fs::path base(prefix);
  if (base.has_parent_path()) fs::create_directories(base.parent_path());
  write_json_report(prefix + ".json", header, body);
  if (!columns.empty()) write_csv_report(prefix + ".csv", header, columns, rows);
  emit_json_line(std::cout, {{"report", prefix + ".json"}});
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

void cmd_gen(const Context& ctx) {
  const Section s = ctx.section("gen");
  const CharacterVocab vocab = vocab_from(ctx);
  const fs::path out = s.required_text("out");
  SyntheticConfig cfg;
  cfg.n = s.count("n", cfg.n);
  cfg.seed = s.seed("seed", cfg.seed);
  cfg.flip_probability = s.real("flip_probability", cfg.flip_probability);
  cfg.max_distinct = s.int32("max_distinct", cfg.max_distinct);
  cfg.max_count = s.int32("max_count", cfg.max_count);
  cfg.context_tokens = s.strings("context_tokens", cfg.context_tokens);
  if (cfg.n == 0) throw ConfigError("gen.n must be positive");
  if (cfg.flip_probability < 0.0 || cfg.flip_probability > 1.0)
    throw ConfigError("gen.flip_probability must lie in [0, 1]");

  std::map<std::string, double> table = reference_weight_table();
  if (s.has("weights")) {
    const json& w = s.raw("weights");
    if (!w.is_object()) throw ConfigError("gen.weights must be a table of token = weight");
    table.clear();
    for (const auto& [token, value] : w.items()) {
      if (!value.is_number()) throw ConfigError("gen.weights." + token + " must be a number");
      table[token] = value.get<double>();
    }
  }
  cfg.weights = weights_from_map(vocab, table);
  for (const std::string& t : cfg.context_tokens)
    if (!vocab.contains(t)) throw ConfigError("gen.context_tokens: unknown token '" + t + "'");

  const Dataset d = generate_synthetic(vocab, cfg);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_dataset(out, d);
  std::size_t positives = 0;
  for (const auto& r : d.rows) positives += std::size_t(r.label);
  emit_json_line(std::cout, {{"dataset", out.string()}, {"rows", d.size()}, {"label1_rows", positives}});
}

ModelConfig model_config_from(const Context& ctx, int d, int heads, int layers) {
  const Section s = ctx.section("model");
  ModelConfig cfg;
  cfg.vocab = vocab_from(ctx);
  cfg.d = d;
  cfg.heads = heads;
  cfg.layers = layers;
  cfg.mlp_dim = s.int32("mlp_dim", 4 * d);
  cfg.head_hidden = s.int32("head_hidden", cfg.head_hidden);
  cfg.max_cardinality = s.int32("max_cardinality", cfg.max_cardinality);
  cfg.validate();
  return cfg;
}

TrainConfig train_config_from(const Context& ctx) {
  const Section s = ctx.section("train");
  TrainConfig cfg;
  cfg.learning_rate = s.real("learning_rate", cfg.learning_rate);
  cfg.batch_size = s.count("batch_size", cfg.batch_size);
  cfg.epochs = s.int32("epochs", cfg.epochs);
  cfg.seed = s.seed("seed", cfg.seed);
  cfg.patience = s.int32("patience", cfg.patience);
  cfg.target_accuracy = s.real("target_accuracy", cfg.target_accuracy);
  cfg.eval_every = s.int32("eval_every", cfg.eval_every);
  cfg.threads = ctx.threads;
  cfg.validate();
  return cfg;
}

struct GridPoint {
  int d, heads, layers;
  std::string tag() const {
    return "d" + std::to_string(d) + "_h" + std::to_string(heads) + "_l" + std::to_string(layers);
  }
};

std::vector<GridPoint> grid_from(const Section& s) {
  std::vector<GridPoint> out;
  if (!s.has("grid")) return out;
  const json& g = s.raw("grid");
  auto bad = [] { return ConfigError("train.grid must be a list of [d, heads, layers] triples"); };
  if (!g.is_array() || g.empty()) throw bad();
  for (const json& p : g) {
    if (!p.is_array() || p.size() != 3) throw bad();
    for (const json& v : p)
      if (!v.is_number_integer()) throw bad();
    out.push_back({p[0].get<int>(), p[1].get<int>(), p[2].get<int>()});
  }
  return out;
}

struct TrainOutcome {
  TrainResult result;
  ModelConfig config;
};

TrainOutcome train_one(const Context& ctx, const json& header, const Dataset& tr, const Dataset& va,
                       const ModelConfig& mcfg, const TrainConfig& tcfg, std::optional<TrainState> resume,
                       const fs::path& checkpoint, const fs::path& metrics_path, const std::string& tag) {
  if (checkpoint.has_parent_path()) fs::create_directories(checkpoint.parent_path());
  std::ofstream metrics(metrics_path, std::ios::binary);
  if (!metrics) throw DataError("cannot write metrics file " + metrics_path.string());
  emit_json_line(metrics, {{"header", header}});
  auto on_epoch = [&](const EpochMetrics& e) {
    json line = to_json(e);
    if (!tag.empty()) line["model"] = tag;
    emit_json_line(metrics, line);
    emit_json_line(std::cout, line);
    std::cerr << "epoch " << e.epoch << " loss " << e.train_loss << " val " << e.val_accuracy << " ("
              << e.wall_seconds << " s)\n";
  };
  (void)ctx;
  TrainOutcome out{train(tr, va, mcfg, tcfg, on_epoch, std::move(resume)), mcfg};
  Checkpoint ck;
  ck.model = out.result.best;
  ck.metrics = {{"header", header}, {"training", to_json(out.result.metrics)}};
  ck.train_state = to_json(out.result.state);
  save_checkpoint(checkpoint, ck);
  emit_json_line(std::cout, {{"checkpoint", checkpoint.string()},
                             {"best_epoch", out.result.metrics.best_epoch},
                             {"best_val_accuracy", out.result.metrics.best_val_accuracy}});
  return out;
}

void cmd_train(const Context& ctx) {
  const Section s = ctx.section("train");
  const Section ms = ctx.section("model");
  const fs::path data = s.required_text("data");
  const std::string out = s.required_text("out");
  const TrainConfig tcfg = train_config_from(ctx);
  const double val_fraction = s.real("val_fraction", 0.2);
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("train.val_fraction must lie in (0, 1)");
  const std::uint64_t split_seed = s.seed("split_seed", 3);
  const std::vector<GridPoint> grid = grid_from(s);
  if (!grid.empty() && s.has("resume")) throw ConfigError("train.resume cannot be combined with train.grid");

  // Validate every configuration before touching the data.
  std::optional<Checkpoint> resume_from;
  if (s.has("resume")) {
    const fs::path rp = s.text("resume", "");
    if (!fs::exists(rp)) throw DataError("resume checkpoint " + rp.string() + " does not exist");
    resume_from = load_checkpoint(rp);
    if (resume_from->train_state.is_null()) throw DataError("checkpoint " + rp.string() + " has no training state");
  }
  std::vector<ModelConfig> configs;
  if (grid.empty()) {
    configs.push_back(resume_from ? resume_from->model.config
                                  : model_config_from(ctx, ms.int32("d", 64), ms.int32("heads", 2), ms.int32("layers", 2)));
  } else {
    for (const GridPoint& g : grid) configs.push_back(model_config_from(ctx, g.d, g.heads, g.layers));
  }
  if (!fs::exists(data)) throw DataError("dataset " + data.string() + " does not exist");

  const Dataset all = load_dataset(data, configs.front().vocab);
  const auto [tr, va] = split_unique(all, val_fraction, split_seed);
  const json header = provenance("train", ctx.effective({"vocab", "model", "train"}), tcfg.seed);

  if (grid.empty()) {
    std::optional<TrainState> state;
    if (resume_from) state = train_state_from_json(resume_from->train_state, configs.front());
    const std::string metrics = s.text("metrics", out + ".metrics.jsonl");
    train_one(ctx, header, tr, va, configs.front(), tcfg, std::move(state), out, metrics, "");
    return;
  }

  fs::create_directories(out);
  json rows = json::array();
  std::vector<std::vector<std::string>> csv;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const std::string tag = grid[i].tag();
    const fs::path dir(out);
    const TrainOutcome r = train_one(ctx, header, tr, va, configs[i], tcfg, std::nullopt, dir / (tag + ".ckpt.json"),
                                     dir / (tag + ".metrics.jsonl"), tag);
    const std::size_t params = parameter_count(r.result.best.params);
    rows.push_back({{"model", tag},
                    {"d", grid[i].d},
                    {"heads", grid[i].heads},
                    {"layers", grid[i].layers},
                    {"mlp_dim", configs[i].mlp_dim},
                    {"parameters", params},
                    {"best_epoch", r.result.metrics.best_epoch},
                    {"val_accuracy", r.result.metrics.best_val_accuracy}});
    csv.push_back({std::to_string(grid[i].d), std::to_string(grid[i].heads), std::to_string(grid[i].layers),
                   std::to_string(configs[i].mlp_dim), std::to_string(params),
                   format_double(r.result.metrics.best_val_accuracy)});
  }
  write_reports((fs::path(out) / "grid").string(), header, {{"grid", rows}},
                {"d", "heads", "layers", "mlp_dim", "parameters", "val_accuracy"}, csv);
}

void cmd_eval(const Context& ctx) {
  const Section s = ctx.section("eval");
  const Model m = load_model(ctx, s);
  const Dataset d = load_dataset(s.required_text("data"), m.config.vocab);
  const double acc = evaluate(m, d, ctx.threads);
  const json header = provenance("eval", ctx.effective({"vocab", "eval"}), 0);
  const json body = {{"accuracy", acc}, {"rows", d.size()}};
  if (s.has("out")) {
    write_reports(s.text("out", ""), header, body, {}, {});
  } else {
    json doc = body;
    doc["header"] = header;
    std::cout << doc.dump(2) << '\n';
  }
}

void cmd_ate(const Context& ctx) {
  const Section s = ctx.section("ate");
  const Model m = load_model(ctx, s);
  CorpusConfig cfg;
  cfg.n = s.count("n", cfg.n);
  cfg.seed = s.seed("seed", cfg.seed);
  cfg.max_distinct = s.int32("max_distinct", cfg.max_distinct);
  cfg.max_count = s.int32("max_count", cfg.max_count);
  cfg.context_tokens = s.strings("context_tokens", cfg.context_tokens);
  const AteReport report = ate_report(m, cfg, ctx.threads);
  const json header = provenance("ate", ctx.effective({"vocab", "ate"}), cfg.seed);
  write_reports(s.text("out", "ate"), header, to_json(report), {"character", "ate", "stderr", "n_treated", "n_control"},
                csv_rows(report));
  for (const auto& [name, why] : report.failures) std::cerr << "ate: " << name << ": " << why << '\n';
}

std::vector<BiasDimension> dimensions_from(const Section& s, const CharacterVocab& vocab) {
  std::map<std::string, BiasDimension> known;
  std::vector<std::string> order;
  for (BiasDimension& d : default_bias_dimensions()) {
    order.push_back(d.name);
    known[d.name] = std::move(d);
  }
  if (s.has("dims")) {
    const json& dims = s.raw("dims");
    if (!dims.is_object()) throw ConfigError("layerwise.dims must be a table of dimensions");
    for (const auto& [name, body] : dims.items()) {
      const Section ds("layerwise.dims." + name, body);
      for (const auto& [key, value] : body.items())
        if (key != "privileged" && key != "unprivileged")
          throw ConfigError("layerwise.dims." + name + ": unknown key '" + key + "'");
      if (!known.contains(name)) order.push_back(name);
      BiasDimension& d = known[name];
      d.name = name;
      d.privileged = ds.strings("privileged", d.privileged);
      d.unprivileged = ds.strings("unprivileged", d.unprivileged);
    }
  }
  std::vector<BiasDimension> out;
  for (const std::string& name : s.strings("dimensions", order)) {
    if (!known.contains(name)) throw ConfigError("layerwise.dimensions: unknown dimension '" + name + "'");
    known[name].validate(vocab);
    out.push_back(known[name]);
  }
  return out;
}

void cmd_layerwise(const Context& ctx) {
  const Section s = ctx.section("layerwise");
  const Model m = load_model(ctx, s);
  ImportanceOptions opts;
  opts.n = s.count("n", opts.n);
  opts.seed = s.seed("seed", opts.seed);
  opts.max_count = s.int32("max_count", opts.max_count);
  opts.strategy = parse_attention_strategy(s.text("strategy", "cls_row"));
  opts.threads = ctx.threads;
  const std::vector<BiasDimension> dims = dimensions_from(s, m.config.vocab);

  json tables = json::array();
  std::vector<std::vector<std::string>> rows;
  for (const BiasDimension& d : dims) {
    const ImportanceTable t = importance(m, d, opts);
    tables.push_back(to_json(t));
    for (auto& r : csv_rows(t)) rows.push_back(std::move(r));
  }
  const json header = provenance("layerwise", ctx.effective({"vocab", "layerwise"}), opts.seed);
  write_reports(s.text("out", "layerwise"), header, {{"strategy", to_string(opts.strategy)}, {"tables", tables}},
                {"bias", "layer", "head", "importance"}, rows);
}

void cmd_circuit(const Context& ctx) {
  const Section s = ctx.section("circuit");
  const Model m = load_model(ctx, s);
  CircuitConfig cfg;
  const std::string scope = s.text("scope", "cls_only");
  if (scope != "cls_only" && scope != "all_positions")
    throw ConfigError("circuit.scope must be cls_only or all_positions");
  cfg.site = GateSite::parse(s.text("site", "mlp1"),
                             scope == "cls_only" ? GateScope::ClsOnly : GateScope::AllPositions);
  if (cfg.site.layer >= m.config.layers) throw ConfigError("circuit.site refers to a layer the model does not have");
  cfg.mask.lambda = s.real("lambda", cfg.mask.lambda);
  cfg.mask.beta_start = s.real("beta_start", cfg.mask.beta_start);
  cfg.mask.beta_end = s.real("beta_end", cfg.mask.beta_end);
  cfg.mask.steps = s.int32("steps", cfg.mask.steps);
  cfg.mask.batch = s.int32("batch", cfg.mask.batch);
  cfg.mask.lr = s.real("lr", cfg.mask.lr);
  cfg.mask.init_logit = s.real("init_logit", cfg.mask.init_logit);
  cfg.mask.temperature_scale = s.real("temperature_scale", cfg.mask.temperature_scale);
  cfg.mask.seed = s.seed("seed", cfg.mask.seed);
  cfg.weight_method = parse_weight_method(s.text("weight_method", "odds"));
  cfg.train_fraction = s.real("train_fraction", cfg.train_fraction);
  cfg.controls = s.int32("controls", cfg.controls);
  cfg.threads = ctx.threads;
  if (cfg.controls < 0) throw ConfigError("circuit.controls must be non-negative");

  const std::size_t probe_n = s.count("probe_n", 20000);
  const std::size_t test_n = s.count("test_n", 5000);
  const std::uint64_t data_seed = s.seed("data_seed", 11);
  if (probe_n < 4 || test_n < 1) throw ConfigError("circuit.probe_n must be >= 4 and circuit.test_n >= 1");
  std::vector<Scenario> probe, test;
  if (s.has("data")) {
    const Dataset d = load_dataset(s.text("data", ""), m.config.vocab);
    if (d.size() < probe_n + 1) throw DataError("circuit data has fewer rows than probe_n + 1");
    std::vector<std::size_t> order(d.size());
    std::iota(order.begin(), order.end(), std::size_t(0));
    std::mt19937_64 rng(data_seed);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i = 0; i < order.size(); ++i)
      (i < probe_n ? probe : test).push_back(d.rows[order[i]].scenario);
    if (test.size() > test_n) test.resize(test_n);
  } else {
    SyntheticConfig gen;
    gen.n = probe_n + test_n;
    gen.seed = data_seed;
    const Dataset d = generate_synthetic(m.config.vocab, gen);
    for (std::size_t i = 0; i < d.size(); ++i) (i < probe_n ? probe : test).push_back(d.rows[i].scenario);
  }

  const CircuitReport r = run_circuit(m, probe, test, cfg);
  const json header = provenance("circuit", ctx.effective({"vocab", "circuit"}), cfg.mask.seed);
  write_reports(s.text("out", "circuit"), header, to_json(r), {}, {});
  if (r.degenerate_mask) std::cerr << "circuit: learned hard mask is degenerate (" << r.selected << "/" << r.width << ")\n";
}

void cmd_explain(const Context& ctx) {
  const Section s = ctx.section("explain");
  const Model m = load_model(ctx, s);
  json scenario_json;
  if (s.has("scenario") == s.has("scenario_file"))
    throw ConfigError("explain needs exactly one of --scenario and --scenario-file");
  try {
    if (s.has("scenario")) {
      scenario_json = json::parse(s.text("scenario", ""));
    } else {
      const fs::path p = s.text("scenario_file", "");
      std::ifstream in(p);
      if (!in) throw DataError("cannot read scenario file " + p.string());
      scenario_json = json::parse(in);
    }
  } catch (const json::parse_error& e) {
    throw DataError(std::string("scenario is not valid JSON: ") + e.what());
  }
  const Scenario sc = scenario_from_json(scenario_json, m.config.vocab);
  const bool symmetric = s.boolean("symmetric", true);
  const RelevanceResult r = symmetric ? relevance_symmetric(sc, m) : relevance_single(sc, m);
  json body = to_json(r);
  body["scenario"] = scenario_to_json(sc, m.config.vocab);
  body["symmetric"] = symmetric;
  const json header = provenance("explain", ctx.effective({"vocab", "explain"}), 0);
  if (s.has("out")) {
    write_reports(s.text("out", ""), header, body, {"token", "team", "score"}, csv_rows(r));
  } else {
    body["header"] = header;
    std::cout << body.dump(2) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Argument wiring
// ---------------------------------------------------------------------------

// Binds a flag whose value, when given, overrides `section.key`.
class Overrides {
 public:
  template <typename T>
  CLI::Option* add(CLI::App* app, const std::string& flag, const std::string& section, const std::string& key,
                   const std::string& help) {
    auto value = std::make_shared<T>();
    CLI::Option* opt = app->add_option(flag, *value, help);
    apply_.push_back([=](json& config) {
      if (opt->count() > 0) config[section][key] = *value;
    });
    return opt;
  }

  void flag(CLI::App* app, const std::string& flag, const std::string& section, const std::string& key, bool value,
            const std::string& help) {
    CLI::Option* opt = app->add_flag(flag, help);
    apply_.push_back([=](json& config) {
      if (opt->count() > 0) config[section][key] = value;
    });
  }

  void custom(std::function<void(json&)> fn) { apply_.push_back(std::move(fn)); }

  void apply(json& config) const {
    for (const auto& fn : apply_) fn(config);
  }

 private:
  std::vector<std::function<void(json&)>> apply_;
};

std::vector<std::vector<int>> parse_grid_flag(const std::string& text) {
  std::vector<std::vector<int>> out;
  std::stringstream items(text);
  std::string item;
  while (std::getline(items, item, ',')) {
    std::vector<int> triple;
    std::stringstream parts(item);
    std::string part;
    while (std::getline(parts, part, 'x')) {
      try {
        std::size_t used = 0;
        triple.push_back(std::stoi(part, &used));
        if (used != part.size()) throw std::invalid_argument(part);
      } catch (const std::exception&) {
        throw ConfigError("--grid entries look like 64x2x2 (d x heads x layers), got '" + item + "'");
      }
    }
    if (triple.size() != 3) throw ConfigError("--grid entries look like 64x2x2 (d x heads x layers), got '" + item + "'");
    out.push_back(triple);
  }
  if (out.empty()) throw ConfigError("--grid is empty");
  return out;
}

int report_error(const char* kind, const std::exception& e, int code) {
  std::cerr << "moralmech: " << kind << ": " << e.what() << '\n';
  return code;
}

}  // namespace

int run_cli(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Interpretable moral-preference transformer: data generation, training and analyses"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path;
  int threads = 0;
  app.add_option("--config", config_path, "TOML-style run configuration; command-line flags override it");
  app.add_option("--threads", threads, "Worker threads for batched inference (default 1, or `threads` in the config)");

  Overrides ov;
  std::map<std::string, std::function<void(const Context&)>> handlers;

  CLI::App* gen = app.add_subcommand("gen", "Generate a synthetic labelled dataset (CSV)");
  ov.add<std::string>(gen, "--out", "gen", "out", "Output CSV path");
  ov.add<std::size_t>(gen, "--n", "gen", "n", "Number of scenarios (default 50000)");
  ov.add<std::uint64_t>(gen, "--seed", "gen", "seed", "Generator seed (default 7)");
  ov.add<double>(gen, "--flip-probability", "gen", "flip_probability", "Label noise rate (default 0)");
  ov.add<int>(gen, "--max-distinct", "gen", "max_distinct", "Distinct characters per outcome (default 5)");
  ov.add<int>(gen, "--max-count", "gen", "max_count", "Largest count per character (default 5)");
  handlers["gen"] = cmd_gen;

  CLI::App* tr = app.add_subcommand("train", "Train a model (or a grid of models) on a CSV dataset");
  ov.add<std::string>(tr, "--data", "train", "data", "Training CSV");
  ov.add<std::string>(tr, "--out", "train", "out", "Checkpoint path, or output directory with --grid");
  ov.add<double>(tr, "--val-fraction", "train", "val_fraction", "Share of distinct scenarios held out (default 0.2)");
  ov.add<std::uint64_t>(tr, "--split-seed", "train", "split_seed", "Seed of the train/validation split (default 3)");
  ov.add<int>(tr, "--epochs", "train", "epochs", "Epochs (default 10)");
  ov.add<std::size_t>(tr, "--batch-size", "train", "batch_size", "Minibatch size (default 512)");
  ov.add<double>(tr, "--lr", "train", "learning_rate", "Adam learning rate (default 1e-3)");
  ov.add<std::uint64_t>(tr, "--seed", "train", "seed", "Initialization and shuffling seed (default 1)");
  ov.add<int>(tr, "--patience", "train", "patience", "Early-stopping patience in epochs, 0 = off");
  ov.add<double>(tr, "--target-accuracy", "train", "target_accuracy", "Stop once validation reaches it, 0 = off");
  ov.add<int>(tr, "--eval-every", "train", "eval_every", "Validate every N epochs (default 1)");
  ov.add<std::string>(tr, "--resume", "train", "resume", "Continue from a checkpoint's saved training state");
  ov.add<std::string>(tr, "--metrics", "train", "metrics", "JSON-lines metrics path (default <out>.metrics.jsonl)");
  ov.add<int>(tr, "--d", "model", "d", "Embedding width (default 64)");
  ov.add<int>(tr, "--heads", "model", "heads", "Attention heads (default 2)");
  ov.add<int>(tr, "--layers", "model", "layers", "Encoder layers (default 2)");
  ov.add<int>(tr, "--mlp-dim", "model", "mlp_dim", "Feed-forward width (default 4 * d)");
  ov.add<int>(tr, "--head-hidden", "model", "head_hidden", "Classifier hidden width (default 32)");
  ov.add<int>(tr, "--max-cardinality", "model", "max_cardinality", "Largest representable count (default 10)");
  auto grid_text = std::make_shared<std::string>();
  CLI::Option* grid_opt =
      tr->add_option("--grid", *grid_text, "Comma-separated d x heads x layers list, e.g. 32x2x2,64x2x2");
  ov.custom([=](json& config) {
    if (grid_opt->count() > 0) config["train"]["grid"] = parse_grid_flag(*grid_text);
  });
  handlers["train"] = cmd_train;

  CLI::App* ev = app.add_subcommand("eval", "Symmetric accuracy of a checkpoint on a CSV dataset");
  ov.add<std::string>(ev, "--checkpoint", "eval", "checkpoint", "Checkpoint path");
  ov.add<std::string>(ev, "--data", "eval", "data", "Labelled CSV");
  ov.add<std::string>(ev, "--out", "eval", "out", "Report prefix (prints to stdout when absent)");
  handlers["eval"] = cmd_eval;

  CLI::App* ate = app.add_subcommand("ate", "Per-character average treatment effects");
  ov.add<std::string>(ate, "--checkpoint", "ate", "checkpoint", "Checkpoint path");
  ov.add<std::size_t>(ate, "--n", "ate", "n", "Intervention corpus size (default 20000)");
  ov.add<std::uint64_t>(ate, "--seed", "ate", "seed", "Corpus seed (default 1)");
  ov.add<std::string>(ate, "--out", "ate", "out", "Report prefix for .json and .csv (default ate)");
  handlers["ate"] = cmd_ate;

  CLI::App* lw = app.add_subcommand("layerwise", "Attention importance per bias dimension, layer and head");
  ov.add<std::string>(lw, "--checkpoint", "layerwise", "checkpoint", "Checkpoint path");
  ov.add<std::size_t>(lw, "--n", "layerwise", "n", "Contrastive scenarios per dimension (default 1000)");
  ov.add<std::uint64_t>(lw, "--seed", "layerwise", "seed", "Scenario seed (default 1)");
  ov.add<std::string>(lw, "--strategy", "layerwise", "strategy", "cls_row (default) or mean_into_relevant");
  ov.add<std::vector<std::string>>(lw, "--dimensions", "layerwise", "dimensions", "Subset of bias dimensions");
  ov.add<std::string>(lw, "--out", "layerwise", "out", "Report prefix for .json and .csv (default layerwise)");
  handlers["layerwise"] = cmd_layerwise;

  CLI::App* ci = app.add_subcommand("circuit", "Sparse circuit probing with ablation against random controls");
  ov.add<std::string>(ci, "--checkpoint", "circuit", "checkpoint", "Checkpoint path");
  ov.add<std::string>(ci, "--site", "circuit", "site", "Gate site: mlp<layer> or attn<layer> (default mlp1)");
  ov.add<std::string>(ci, "--scope", "circuit", "scope", "cls_only (default) or all_positions");
  ov.add<double>(ci, "--lambda", "circuit", "lambda", "L0 penalty weight (default 1e-5)");
  ov.add<double>(ci, "--beta-start", "circuit", "beta_start", "Initial mask temperature (default 1)");
  ov.add<double>(ci, "--beta-end", "circuit", "beta_end", "Final mask temperature (default 200)");
  ov.add<int>(ci, "--steps", "circuit", "steps", "Mask optimization steps (default 1500)");
  ov.add<int>(ci, "--batch", "circuit", "batch", "Class-balanced batch size (default 256)");
  ov.add<double>(ci, "--lr", "circuit", "lr", "Adam learning rate for mask logits (default 0.05)");
  ov.add<std::uint64_t>(ci, "--seed", "circuit", "seed", "Mask training seed (default 1)");
  ov.add<std::string>(ci, "--weight-method", "circuit", "weight_method", "odds (default) or logit_difference");
  ov.add<double>(ci, "--train-fraction", "circuit", "train_fraction", "Probe share used for mask training (0.8)");
  ov.add<int>(ci, "--controls", "circuit", "controls", "Random equal-size control masks (default 10)");
  ov.add<std::string>(ci, "--data", "circuit", "data", "CSV of scenarios to probe (default synthetic)");
  ov.add<std::size_t>(ci, "--probe-n", "circuit", "probe_n", "Probe scenarios (default 20000)");
  ov.add<std::size_t>(ci, "--test-n", "circuit", "test_n", "Ablation test scenarios (default 5000)");
  ov.add<std::uint64_t>(ci, "--data-seed", "circuit", "data_seed", "Seed for scenario sampling (default 11)");
  ov.add<std::string>(ci, "--out", "circuit", "out", "Report prefix (default circuit)");
  handlers["circuit"] = cmd_circuit;

  CLI::App* ex = app.add_subcommand("explain", "Token relevance for one scenario");
  ov.add<std::string>(ex, "--checkpoint", "explain", "checkpoint", "Checkpoint path");
  ov.add<std::string>(ex, "--scenario", "explain", "scenario",
                      R"(Scenario JSON, e.g. {"outcome0":{"Man":3},"outcome1":{"Criminal":3}})");
  ov.add<std::string>(ex, "--scenario-file", "explain", "scenario_file", "File holding the scenario JSON");
  ov.flag(ex, "--unsymmetrized", "explain", "symmetric", false, "Explain only the given ordering");
  ov.add<std::string>(ex, "--out", "explain", "out", "Report prefix for .json and .csv (prints when absent)");
  handlers["explain"] = cmd_explain;

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    Context ctx;
    if (!config_path.empty()) ctx.config = parse_config_file(config_path);
    ov.apply(ctx.config);
    check_schema(ctx.config);
    ctx.threads = 1;
    if (ctx.config.contains("threads")) {
      if (!ctx.config["threads"].is_number_integer()) throw ConfigError("threads must be an integer");
      ctx.threads = ctx.config["threads"].get<int>();
    }
    if (threads != 0) ctx.threads = threads;
    if (ctx.threads < 1) throw ConfigError("threads must be at least 1");
    for (CLI::App* sub : app.get_subcommands()) {
      ctx.command = sub->get_name();
      handlers.at(ctx.command)(ctx);
    }
  } catch (const ConfigError& e) {
    return report_error("config error", e, kExitConfig);
  } catch (const DataError& e) {
    return report_error("data error", e, kExitData);
  } catch (const NumericalError& e) {
    return report_error("numerical error", e, kExitNumerical);
  } catch (const std::exception& e) {
    return report_error("error", e, kExitConfig);
  }
  return kExitOk;
}

int run_cli(const std::vector<std::string>& args) {
  std::vector<std::string> storage = args;
  std::vector<char*> argv;
  for (std::string& a : storage) argv.push_back(a.data());
  argv.push_back(nullptr);
  return run_cli(int(storage.size()), argv.data());
}

}  // namespace moralmech
