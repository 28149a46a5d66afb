#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "moralmech/numerics.hpp"
#include "moralmech/scenario.hpp"

namespace moralmech {

struct ModelConfig {
  int d = 64;
  int heads = 2;
  int layers = 2;
  int mlp_dim = 256;
  int head_hidden = 32;
  int max_cardinality = 10;
  CharacterVocab vocab = CharacterVocab::standard();

  /// Throws ConfigError when the dimensions are inconsistent.
  void validate() const;

  int char_dim() const { return d / 2; }
  int card_dim() const { return d / 4; }
  int team_dim() const { return d / 4; }
  int head_dim() const { return d / heads; }
  /// CLS followed by one token per vocabulary slot per outcome (47 by default).
  int sequence_length() const { return 2 * int(vocab.size()) + 1; }
};

/// Learnable tensors of one encoder layer. Templated on the element type so
/// the same layout holds both weights (Matrix) and their tape handles (Var).
template <typename T>
struct BasicLayerParams {
  T ln1_gain, ln1_bias;
  T wq, bq, wk, wv, bv, wo, bo;
  T ln2_gain, ln2_bias;
  T w1, b1, w2, b2;

  template <typename Self, typename F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "ln1_gain", self.ln1_gain);
    f(prefix + "ln1_bias", self.ln1_bias);
    f(prefix + "wq", self.wq);
    f(prefix + "bq", self.bq);
    f(prefix + "wk", self.wk);
    f(prefix + "wv", self.wv);
    f(prefix + "bv", self.bv);
    f(prefix + "wo", self.wo);
    f(prefix + "bo", self.bo);
    f(prefix + "ln2_gain", self.ln2_gain);
    f(prefix + "ln2_bias", self.ln2_bias);
    f(prefix + "w1", self.w1);
    f(prefix + "b1", self.b1);
    f(prefix + "w2", self.w2);
    f(prefix + "b2", self.b2);
  }
};

template <typename T>
struct BasicParams {
  T char_table;  ///< vocab x d/2
  T card_table;  ///< (max_cardinality + 1) x d/4
  T team_table;  ///< 2 x d/4
  T cls;         ///< 1 x d
  std::vector<BasicLayerParams<T>> layers;
  T final_gain, final_bias;
  T head_w1, head_b1, head_w2, head_b2;

  /// Calls f(name, tensor) for every tensor in a fixed order.
  template <typename F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <typename F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& self, F& f) {
    f(std::string("char_table"), self.char_table);
    f(std::string("card_table"), self.card_table);
    f(std::string("team_table"), self.team_table);
    f(std::string("cls"), self.cls);
    for (std::size_t i = 0; i < self.layers.size(); ++i)
      BasicLayerParams<T>::visit(self.layers[i], "layers." + std::to_string(i) + ".", f);
    f(std::string("final_gain"), self.final_gain);
    f(std::string("final_bias"), self.final_bias);
    f(std::string("head_w1"), self.head_w1);
    f(std::string("head_b1"), self.head_b1);
    f(std::string("head_w2"), self.head_w2);
    f(std::string("head_b2"), self.head_b2);
  }
};

using LayerParams = BasicLayerParams<Matrix>;
using ModelParams = BasicParams<Matrix>;
using ParamVars = BasicParams<Var>;

/// Zero-initialized tensors of the right shapes for `cfg`.
ModelParams zero_params(const ModelConfig& cfg);
/// Weights and biases uniform in +-1/sqrt(fan_in); embeddings and CLS use
/// fan_in = d; layer-norm gains 1 and biases 0.
ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed);
std::size_t parameter_count(const ModelParams& p);
/// Flattened copy of every tensor (visit order) and its inverse.
std::vector<Matrix> flatten(const ModelParams& p);
void unflatten(std::span<const Matrix> values, ModelParams& p);

struct Model {
  ModelConfig config;
  ModelParams params;
};

Model make_model(const ModelConfig& cfg, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Gating (used by circuit probing; identity when absent)
// ---------------------------------------------------------------------------

enum class GateLocation { MlpHidden, AttnHeads };
enum class GateScope { ClsOnly, AllPositions };

struct GateSite {
  GateLocation location = GateLocation::MlpHidden;
  int layer = 1;
  GateScope scope = GateScope::ClsOnly;

  /// mlp_dim for the MLP site, d for concatenated heads.
  int width(const ModelConfig& cfg) const;
  /// "mlp<layer>" or "attn<layer>".
  std::string name() const;
  /// Inverse of name(); throws ConfigError.
  static GateSite parse(const std::string& text, GateScope scope = GateScope::ClsOnly);
};

/// Multiplies the activations at `site` elementwise by `mask`.
struct Gate {
  GateSite site;
  RowVector mask;
};

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

/// Binds each parameter tensor to the tape, as variables when `trainable`.
ParamVars bind_params(Tape& tape, const ModelParams& p, bool trainable);

struct ForwardOptions {
  /// Compute every position of the last layer and record attention handles.
  /// Without it only the CLS row of the last layer is evaluated.
  bool full = false;
  const Gate* gate = nullptr;
  /// Optional mask variable overriding gate->mask (lets callers learn it).
  std::optional<Var> gate_mask;
};

struct ForwardTrace {
  Var logits;  ///< batch x 1
  /// [layer][head][batch] post-softmax attention; only filled with `full`.
  std::vector<std::vector<std::vector<Var>>> attention;
  /// [layer] feed-forward hidden after activation, before gating.
  std::vector<Var> mlp_hidden;
  /// [layer] concatenated head outputs, before gating.
  std::vector<Var> head_concat;
  /// [layer] rows per sequence in mlp_hidden/head_concat (47, or 1 when only
  /// the CLS row was computed).
  std::vector<Eigen::Index> rows_per_sequence;
};

/// Token embeddings (sequence_length x d) for one scenario: CLS, then the
/// outcome0 tokens, then the outcome1 tokens, each token the concatenation of
/// character, cardinality and team rows. Throws DataError when a count
/// exceeds max_cardinality.
Matrix embed_scenario(const Scenario& s, const Model& m);

ForwardTrace forward_on_tape(Tape& tape, const ParamVars& vars, const ModelConfig& cfg,
                             std::span<const Scenario> batch, const ForwardOptions& opts = {});

/// Recorded activations of one forward pass.
struct Capture {
  std::vector<std::vector<Matrix>> attention;       ///< [layer][head], L x L post-softmax
  std::vector<RowVector> mlp_hidden;                ///< [layer] CLS row, pre-gate
  std::vector<RowVector> head_concat;               ///< [layer] CLS row, pre-gate
  std::vector<std::vector<Matrix>> attention_grad;  ///< d logit / d attention (when requested)
};

/// Raw logit f(O0, O1) of one scenario.
double forward(const Model& m, const Scenario& s, const Gate* gate = nullptr);
/// Logit with a populated capture; `with_grads` also back-propagates the
/// logit to every attention matrix.
double forward_capture(const Model& m, const Scenario& s, Capture& capture, bool with_grads = false,
                       const Gate* gate = nullptr);
/// Raw logits for many scenarios, evaluated in batches.
std::vector<double> forward_logits(const Model& m, std::span<const Scenario> scenarios, const Gate* gate = nullptr,
                                   int threads = 1);

/// 1/2 [sigmoid(f(O0,O1)) + 1 - sigmoid(f(O1,O0))], evaluated so that the
/// result for a side-symmetric scenario is exactly 1/2.
double predict_symmetric(const Model& m, const Scenario& s, const Gate* gate = nullptr);
std::vector<double> predict_symmetric(const Model& m, std::span<const Scenario> scenarios, const Gate* gate = nullptr,
                                      int threads = 1);

/// Combines the two orderings' logits into the symmetric probability.
double symmetric_probability(double logit_forward, double logit_swapped);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  Model model;
  nlohmann::json metrics;      ///< null when absent
  nlohmann::json train_state;  ///< optimizer moments etc.; null when absent
};

nlohmann::json config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const nlohmann::json& j);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
void save_checkpoint(const std::filesystem::path& path, const Model& m);
/// Throws DataError on a corrupt file, version mismatch or shape mismatch.
Checkpoint load_checkpoint(const std::filesystem::path& path);

nlohmann::json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const nlohmann::json& j);

}  // namespace moralmech
