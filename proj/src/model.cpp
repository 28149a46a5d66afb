#include "moralmech/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "moralmech/error.hpp"
#include "moralmech/parallel.hpp"

namespace moralmech {

void ModelConfig::validate() const {
  if (d <= 0 || d % 4 != 0) throw ConfigError("model: d must be a positive multiple of 4");
  if (heads <= 0 || d % heads != 0) throw ConfigError("model: d must be divisible by the head count");
  if (layers <= 0) throw ConfigError("model: need at least one layer");
  if (mlp_dim <= 0 || head_hidden <= 0) throw ConfigError("model: hidden widths must be positive");
  if (max_cardinality < 1) throw ConfigError("model: max_cardinality must be at least 1");
}

ModelParams zero_params(const ModelConfig& cfg) {
  cfg.validate();
  const int d = cfg.d;
  ModelParams p;
  p.char_table = Matrix::Zero(Eigen::Index(cfg.vocab.size()), cfg.char_dim());
  p.card_table = Matrix::Zero(cfg.max_cardinality + 1, cfg.card_dim());
  p.team_table = Matrix::Zero(2, cfg.team_dim());
  p.cls = Matrix::Zero(1, d);
  p.layers.resize(std::size_t(cfg.layers));
  for (LayerParams& l : p.layers) {
    l.ln1_gain = Matrix::Ones(1, d);
    l.ln1_bias = Matrix::Zero(1, d);
    l.wq = Matrix::Zero(d, d);
    l.bq = Matrix::Zero(1, d);
    l.wk = Matrix::Zero(d, d);
    l.wv = Matrix::Zero(d, d);
    l.bv = Matrix::Zero(1, d);
    l.wo = Matrix::Zero(d, d);
    l.bo = Matrix::Zero(1, d);
    l.ln2_gain = Matrix::Ones(1, d);
    l.ln2_bias = Matrix::Zero(1, d);
    l.w1 = Matrix::Zero(d, cfg.mlp_dim);
    l.b1 = Matrix::Zero(1, cfg.mlp_dim);
    l.w2 = Matrix::Zero(cfg.mlp_dim, d);
    l.b2 = Matrix::Zero(1, d);
  }
  p.final_gain = Matrix::Ones(1, d);
  p.final_bias = Matrix::Zero(1, d);
  p.head_w1 = Matrix::Zero(d, cfg.head_hidden);
  p.head_b1 = Matrix::Zero(1, cfg.head_hidden);
  p.head_w2 = Matrix::Zero(cfg.head_hidden, 1);
  p.head_b2 = Matrix::Zero(1, 1);
  return p;
}

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  ModelParams p = zero_params(cfg);
  std::mt19937_64 rng(seed);
  auto fill = [&rng](Matrix& m, int fan_in) {
    const double bound = 1.0 / std::sqrt(double(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  };
  const int d = cfg.d;
  fill(p.char_table, d);
  fill(p.card_table, d);
  fill(p.team_table, d);
  fill(p.cls, d);
  for (LayerParams& l : p.layers) {
    fill(l.wq, d);
    fill(l.bq, d);
    fill(l.wk, d);
    fill(l.wv, d);
    fill(l.bv, d);
    fill(l.wo, d);
    fill(l.bo, d);
    fill(l.w1, d);
    fill(l.b1, d);
    fill(l.w2, cfg.mlp_dim);
    fill(l.b2, cfg.mlp_dim);
  }
  fill(p.head_w1, d);
  fill(p.head_b1, d);
  fill(p.head_w2, cfg.head_hidden);
  fill(p.head_b2, cfg.head_hidden);
  return p;
}

std::size_t parameter_count(const ModelParams& p) {
  std::size_t n = 0;
  p.visit([&n](const std::string&, const Matrix& m) { n += std::size_t(m.size()); });
  return n;
}

std::vector<Matrix> flatten(const ModelParams& p) {
  std::vector<Matrix> out;
  p.visit([&out](const std::string&, const Matrix& m) { out.push_back(m); });
  return out;
}

void unflatten(std::span<const Matrix> values, ModelParams& p) {
  std::size_t i = 0;
  p.visit([&](const std::string& name, Matrix& m) {
    if (i >= values.size()) throw std::invalid_argument("unflatten: too few tensors");
    if (values[i].rows() != m.rows() || values[i].cols() != m.cols())
      throw std::invalid_argument("unflatten: shape mismatch for " + name);
    m = values[i++];
  });
  if (i != values.size()) throw std::invalid_argument("unflatten: too many tensors");
}

Model make_model(const ModelConfig& cfg, std::uint64_t seed) { return {cfg, init_params(cfg, seed)}; }

// ---------------------------------------------------------------------------

int GateSite::width(const ModelConfig& cfg) const { return location == GateLocation::MlpHidden ? cfg.mlp_dim : cfg.d; }

std::string GateSite::name() const {
  return (location == GateLocation::MlpHidden ? "mlp" : "attn") + std::to_string(layer);
}

GateSite GateSite::parse(const std::string& text, GateScope scope) {
  GateSite site;
  site.scope = scope;
  std::string digits;
  if (text.rfind("mlp", 0) == 0) {
    site.location = GateLocation::MlpHidden;
    digits = text.substr(3);
  } else if (text.rfind("attn", 0) == 0) {
    site.location = GateLocation::AttnHeads;
    digits = text.substr(4);
  } else {
    throw ConfigError("unknown gate site '" + text + "' (expected mlp<layer> or attn<layer>)");
  }
  if (digits.empty() || !std::all_of(digits.begin(), digits.end(), [](char c) { return c >= '0' && c <= '9'; }))
    throw ConfigError("gate site '" + text + "' has no layer index");
  site.layer = std::stoi(digits);
  return site;
}

// ---------------------------------------------------------------------------

ParamVars bind_params(Tape& tape, const ModelParams& p, bool trainable) {
  ParamVars v;
  v.layers.resize(p.layers.size());
  std::vector<Var*> slots;
  v.visit([&slots](const std::string&, Var& var) { slots.push_back(&var); });
  std::size_t i = 0;
  p.visit([&](const std::string&, const Matrix& m) {
    *slots[i++] = trainable ? tape.variable(m) : tape.constant(m);
  });
  return v;
}

namespace {

/// Places the CLS row ahead of each sequence's token rows: (B*T) x d tokens
/// become (B*(T+1)) x d.
Var prepend_cls(Var cls, Var tokens, Eigen::Index batch) {
  Tape& t = *tokens.tape();
  const Eigen::Index per = tokens.rows() / batch;
  const Eigen::Index d = tokens.cols();
  Matrix out(batch * (per + 1), d);
  for (Eigen::Index b = 0; b < batch; ++b) {
    out.row(b * (per + 1)) = cls.value().row(0);
    out.middleRows(b * (per + 1) + 1, per) = tokens.value().middleRows(b * per, per);
  }
  const bool rg = t.requires_grad(cls) || t.requires_grad(tokens);
  return t.push(std::move(out), rg, [cls, tokens, batch, per](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(cls)) {
      RowVector gc = RowVector::Zero(g.cols());
      for (Eigen::Index b = 0; b < batch; ++b) gc += g.row(b * (per + 1));
      tp.accumulate(cls, gc);
    }
    if (tp.requires_grad(tokens)) {
      Matrix gt(batch * per, g.cols());
      for (Eigen::Index b = 0; b < batch; ++b) gt.middleRows(b * per, per) = g.middleRows(b * (per + 1) + 1, per);
      tp.accumulate(tokens, gt);
    }
  });
}

struct TokenIndices {
  std::vector<int> character, cardinality, team;
};

TokenIndices token_indices(std::span<const Scenario> batch, const ModelConfig& cfg) {
  const std::size_t v = cfg.vocab.size();
  TokenIndices idx;
  idx.character.reserve(batch.size() * 2 * v);
  idx.cardinality.reserve(batch.size() * 2 * v);
  idx.team.reserve(batch.size() * 2 * v);
  for (const Scenario& s : batch) {
    int team = 0;
    for (const Outcome* o : {&s.outcome0, &s.outcome1}) {
      if (o->counts.size() != v) throw DataError("scenario does not match the model vocabulary");
      for (std::size_t c = 0; c < v; ++c) {
        const int n = o->counts[c];
        if (n < 0 || n > cfg.max_cardinality)
          throw DataError("count " + std::to_string(n) + " for " + cfg.vocab.name(c) + " exceeds max_cardinality " +
                          std::to_string(cfg.max_cardinality));
        idx.character.push_back(int(c));
        idx.cardinality.push_back(n);
        idx.team.push_back(team);
      }
      ++team;
    }
  }
  return idx;
}

Var embed(const ParamVars& vars, const ModelConfig& cfg, std::span<const Scenario> batch) {
  const TokenIndices idx = token_indices(batch, cfg);
  const Var parts[] = {gather_rows(vars.char_table, idx.character), gather_rows(vars.card_table, idx.cardinality),
                       gather_rows(vars.team_table, idx.team)};
  return prepend_cls(vars.cls, hcat(parts), Eigen::Index(batch.size()));
}

}  // namespace

Matrix embed_scenario(const Scenario& s, const Model& m) {
  Tape tape;
  const ParamVars vars = bind_params(tape, m.params, false);
  return embed(vars, m.config, std::span<const Scenario>(&s, 1)).value();
}

ForwardTrace forward_on_tape(Tape& tape, const ParamVars& vars, const ModelConfig& cfg,
                             std::span<const Scenario> batch, const ForwardOptions& opts) {
  if (batch.empty()) throw std::invalid_argument("forward: empty batch");
  const Eigen::Index B = Eigen::Index(batch.size());
  const Eigen::Index T = cfg.sequence_length();
  const int H = cfg.heads;
  const int dh = cfg.head_dim();
  const double inv_sqrt_dh = 1.0 / std::sqrt(double(dh));

  Var gate_mask;
  if (opts.gate) {
    if (opts.gate->site.layer < 0 || opts.gate->site.layer >= cfg.layers)
      throw ConfigError("gate layer " + std::to_string(opts.gate->site.layer) + " outside the model");
    if (opts.gate_mask) {
      gate_mask = *opts.gate_mask;
    } else {
      if (opts.gate->mask.size() != opts.gate->site.width(cfg)) throw ConfigError("gate mask has the wrong width");
      gate_mask = tape.constant(Matrix(opts.gate->mask));
    }
  }
  auto apply_gate = [&](Var x, int layer, GateLocation where, Eigen::Index rows_per_seq) {
    if (!opts.gate || opts.gate->site.layer != layer || opts.gate->site.location != where) return x;
    const Eigen::Index stride = opts.gate->site.scope == GateScope::ClsOnly ? rows_per_seq : 1;
    return mul_row(x, gate_mask, stride);
  };

  ForwardTrace trace;
  trace.attention.resize(std::size_t(cfg.layers));
  Var x = embed(vars, cfg, batch);
  Eigen::Index rows_per_seq = T;

  for (int li = 0; li < cfg.layers; ++li) {
    const auto& lp = vars.layers[std::size_t(li)];
    const bool last = li == cfg.layers - 1;
    const bool cls_only = last && !opts.full;
    const Eigen::Index q_rows = cls_only ? 1 : T;

    Var h = layer_norm(x, lp.ln1_gain, lp.ln1_bias);
    Var hq = cls_only ? strided_rows(h, 0, T, B) : h;
    Var q = add_row(matmul(hq, lp.wq), lp.bq);
    Var k = matmul(h, lp.wk);
    Var v = add_row(matmul(h, lp.wv), lp.bv);

    trace.attention[std::size_t(li)].assign(std::size_t(H), {});
    std::vector<Var> per_sequence;
    per_sequence.reserve(std::size_t(B));
    std::vector<Var> heads(static_cast<std::size_t>(H));
    for (Eigen::Index b = 0; b < B; ++b) {
      for (int hd = 0; hd < H; ++hd) {
        Var qb = block(q, b * q_rows, hd * dh, q_rows, dh);
        Var kb = block(k, b * T, hd * dh, T, dh);
        Var vb = block(v, b * T, hd * dh, T, dh);
        Var attn = softmax_rows(matmul_bt(qb, kb, inv_sqrt_dh));
        if (opts.full) trace.attention[std::size_t(li)][std::size_t(hd)].push_back(attn);
        heads[std::size_t(hd)] = matmul(attn, vb);
      }
      per_sequence.push_back(H == 1 ? heads[0] : hcat(heads));
    }
    Var concat = B == 1 ? per_sequence[0] : vcat(per_sequence);
    trace.head_concat.push_back(concat);
    concat = apply_gate(concat, li, GateLocation::AttnHeads, q_rows);
    Var attn_out = add_row(matmul(concat, lp.wo), lp.bo);
    x = add(cls_only ? strided_rows(x, 0, T, B) : x, attn_out);

    Var h2 = layer_norm(x, lp.ln2_gain, lp.ln2_bias);
    Var hidden = gelu(add_row(matmul(h2, lp.w1), lp.b1));
    trace.mlp_hidden.push_back(hidden);
    hidden = apply_gate(hidden, li, GateLocation::MlpHidden, q_rows);
    x = add(x, add_row(matmul(hidden, lp.w2), lp.b2));

    trace.rows_per_sequence.push_back(q_rows);
    rows_per_seq = q_rows;
  }

  Var cls = rows_per_seq == 1 ? x : strided_rows(x, 0, rows_per_seq, B);
  Var c = layer_norm(cls, vars.final_gain, vars.final_bias);
  Var hidden = gelu(add_row(matmul(c, vars.head_w1), vars.head_b1));
  trace.logits = add_row(matmul(hidden, vars.head_w2), vars.head_b2);
  return trace;
}

namespace {

RowVector cls_row(const Var& v, Eigen::Index rows_per_seq, Eigen::Index b = 0) {
  return v.value().row(b * rows_per_seq);
}

}  // namespace

double forward(const Model& m, const Scenario& s, const Gate* gate) {
  Tape tape;
  const ParamVars vars = bind_params(tape, m.params, false);
  ForwardOptions opts;
  opts.gate = gate;
  return forward_on_tape(tape, vars, m.config, std::span<const Scenario>(&s, 1), opts).logits.value()(0, 0);
}

double forward_capture(const Model& m, const Scenario& s, Capture& capture, bool with_grads, const Gate* gate) {
  Tape t;
  // Binding parameters as variables makes every attention node a gradient target.
  const ParamVars vars = bind_params(t, m.params, with_grads);
  ForwardOptions opts;
  opts.full = true;
  opts.gate = gate;
  const ForwardTrace trace = forward_on_tape(t, vars, m.config, std::span<const Scenario>(&s, 1), opts);

  const std::size_t L = std::size_t(m.config.layers);
  const std::size_t H = std::size_t(m.config.heads);
  capture.attention.assign(L, std::vector<Matrix>(H));
  capture.mlp_hidden.assign(L, RowVector());
  capture.head_concat.assign(L, RowVector());
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t h = 0; h < H; ++h) capture.attention[l][h] = trace.attention[l][h][0].value();
    capture.mlp_hidden[l] = cls_row(trace.mlp_hidden[l], trace.rows_per_sequence[l]);
    capture.head_concat[l] = cls_row(trace.head_concat[l], trace.rows_per_sequence[l]);
  }
  capture.attention_grad.clear();
  if (with_grads) {
    t.backward(trace.logits);
    capture.attention_grad.assign(L, std::vector<Matrix>(H));
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t h = 0; h < H; ++h) capture.attention_grad[l][h] = t.grad(trace.attention[l][h][0]);
  }
  return trace.logits.value()(0, 0);
}

namespace {

constexpr std::size_t kInferenceBatch = 128;

}  // namespace

std::vector<double> forward_logits(const Model& m, std::span<const Scenario> scenarios, const Gate* gate, int threads) {
  std::vector<double> out(scenarios.size());
  parallel_chunks(scenarios.size(), kInferenceBatch, threads, [&](std::size_t begin, std::size_t end) {
    Tape tape;
    const ParamVars vars = bind_params(tape, m.params, false);
    ForwardOptions opts;
    opts.gate = gate;
    const Var logits = forward_on_tape(tape, vars, m.config, scenarios.subspan(begin, end - begin), opts).logits;
    for (std::size_t i = begin; i < end; ++i) out[i] = logits.value()(Eigen::Index(i - begin), 0);
  });
  return out;
}

double symmetric_probability(double logit_forward, double logit_swapped) {
  // 1/2 [s(f) + 1 - s(g)] rearranged so that f == g gives exactly 1/2 and
  // p(s) + p(swap(s)) == 1 holds up to a single rounding.
  return 0.5 + 0.5 * (sigmoid(logit_forward) - sigmoid(logit_swapped));
}

double predict_symmetric(const Model& m, const Scenario& s, const Gate* gate) {
  const Scenario both[] = {s, swap_teams(s)};
  Tape tape;
  const ParamVars vars = bind_params(tape, m.params, false);
  ForwardOptions opts;
  opts.gate = gate;
  const Matrix& z = forward_on_tape(tape, vars, m.config, both, opts).logits.value();
  // Identical sides are evaluated in different batch rows, which GEMM may
  // round differently; reuse one logit so the result is exactly 1/2.
  if (s.outcome0 == s.outcome1) return symmetric_probability(z(0, 0), z(0, 0));
  return symmetric_probability(z(0, 0), z(1, 0));
}

std::vector<double> predict_symmetric(const Model& m, std::span<const Scenario> scenarios, const Gate* gate,
                                      int threads) {
  std::vector<Scenario> doubled;
  doubled.reserve(2 * scenarios.size());
  for (const Scenario& s : scenarios) {
    doubled.push_back(s);
    doubled.push_back(swap_teams(s));
  }
  const std::vector<double> z = forward_logits(m, doubled, gate, threads);
  std::vector<double> p(scenarios.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const bool mirrored = scenarios[i].outcome0 == scenarios[i].outcome1;
    p[i] = symmetric_probability(z[2 * i], z[mirrored ? 2 * i : 2 * i + 1]);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

nlohmann::json matrix_to_json(const Matrix& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::vector<double>(m.data(), m.data() + m.size())}};
}

Matrix matrix_from_json(const nlohmann::json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (rows < 0 || cols < 0 || Eigen::Index(data.size()) != rows * cols)
    throw DataError("tensor data length does not match its shape");
  Matrix m(rows, cols);
  std::copy(data.begin(), data.end(), m.data());
  return m;
}

nlohmann::json config_to_json(const ModelConfig& cfg) {
  return {{"d", cfg.d},
          {"heads", cfg.heads},
          {"layers", cfg.layers},
          {"mlp_dim", cfg.mlp_dim},
          {"head_hidden", cfg.head_hidden},
          {"max_cardinality", cfg.max_cardinality},
          {"vocab", cfg.vocab.names()}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.d = j.at("d").get<int>();
  cfg.heads = j.at("heads").get<int>();
  cfg.layers = j.at("layers").get<int>();
  cfg.mlp_dim = j.at("mlp_dim").get<int>();
  cfg.head_hidden = j.at("head_hidden").get<int>();
  cfg.max_cardinality = j.at("max_cardinality").get<int>();
  if (j.contains("vocab")) cfg.vocab = CharacterVocab(j.at("vocab").get<std::vector<std::string>>());
  return cfg;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  nlohmann::json j;
  j["format"] = "moralmech-checkpoint";
  j["version"] = kCheckpointVersion;
  j["config"] = config_to_json(ckpt.model.config);
  nlohmann::json tensors = nlohmann::json::array();
  ckpt.model.params.visit([&tensors](const std::string& name, const Matrix& m) {
    nlohmann::json t = matrix_to_json(m);
    t["name"] = name;
    tensors.push_back(std::move(t));
  });
  j["params"] = std::move(tensors);
  if (!ckpt.metrics.is_null()) j["metrics"] = ckpt.metrics;
  if (!ckpt.train_state.is_null()) j["train_state"] = ckpt.train_state;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out << j.dump() << '\n';
}

void save_checkpoint(const std::filesystem::path& path, const Model& m) { save_checkpoint(path, Checkpoint{m, {}, {}}); }

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("corrupt checkpoint " + path.string() + ": " + e.what());
  }
  try {
    if (j.value("format", "") != "moralmech-checkpoint") throw DataError("not a moralmech checkpoint: " + path.string());
    const int version = j.at("version").get<int>();
    if (version != kCheckpointVersion)
      throw DataError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
    Checkpoint ckpt;
    ckpt.model.config = config_from_json(j.at("config"));
    ckpt.model.params = zero_params(ckpt.model.config);
    const auto& tensors = j.at("params");
    std::size_t i = 0;
    ckpt.model.params.visit([&](const std::string& name, Matrix& m) {
      if (i >= tensors.size()) throw DataError("checkpoint is missing tensor " + name);
      const auto& t = tensors[i++];
      if (t.at("name").get<std::string>() != name)
        throw DataError("checkpoint tensor order mismatch at " + name);
      Matrix value = matrix_from_json(t);
      if (value.rows() != m.rows() || value.cols() != m.cols())
        throw DataError("shape mismatch for " + name + ": checkpoint has " + std::to_string(value.rows()) + "x" +
                        std::to_string(value.cols()) + ", config implies " + std::to_string(m.rows()) + "x" +
                        std::to_string(m.cols()));
      m = std::move(value);
    });
    if (i != tensors.size()) throw DataError("checkpoint has extra tensors");
    if (j.contains("metrics")) ckpt.metrics = j["metrics"];
    if (j.contains("train_state")) ckpt.train_state = j["train_state"];
    return ckpt;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("corrupt checkpoint " + path.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw DataError(std::string("checkpoint config invalid: ") + e.what());
  }
}

}  // namespace moralmech
