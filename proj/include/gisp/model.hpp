#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gisp/autodiff.hpp"
#include "gisp/tensor.hpp"

namespace gisp {

// Shape of the decoder. A dense model has uniform widths; a compacted model
// carries explicit per-layer head and MLP-channel counts.
struct ModelConfig {
  int n_layers = 6;
  int n_heads = 4;
  int d_model = 64;
  int d_head = 16;
  int d_ff = 256;
  int vocab_size = 256;
  int max_seq_len = 128;
  std::uint64_t rng_seed = 0;
  std::vector<int> layer_heads;  // empty: n_heads everywhere
  std::vector<int> layer_ff;     // empty: d_ff everywhere

  int heads_in(int layer) const { return layer_heads.empty() ? n_heads : layer_heads.at(layer); }
  int ff_in(int layer) const { return layer_ff.empty() ? d_ff : layer_ff.at(layer); }
  bool uniform() const { return layer_heads.empty() && layer_ff.empty(); }
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class StructureKind : std::uint8_t { AttnHead = 0, MlpChannel = 1 };

std::string_view kind_name(StructureKind kind);
StructureKind parse_kind(std::string_view text);

struct StructureId {
  int layer = 0;
  StructureKind kind = StructureKind::AttnHead;
  int unit = 0;

  friend auto operator<=>(const StructureId&, const StructureId&) = default;
};

std::string to_string(const StructureId& id);

struct LayerWeights {
  Tensor attn_norm;  // [d_model]
  Tensor wq, wk, wv;  // [heads*d_head, d_model]
  Tensor wo;          // [d_model, heads*d_head]
  Tensor mlp_norm;    // [d_model]
  Tensor w_gate, w_up;  // [ff, d_model]
  Tensor w_down;        // [d_model, ff]
};

struct TransformerWeights {
  Tensor tok_emb;     // [vocab, d_model]
  Tensor pos_emb;     // [max_seq_len, d_model]
  std::vector<LayerWeights> layers;
  Tensor final_norm;  // [d_model]
  Tensor lm_head;     // [vocab, d_model]

  // Visits every parameter in checkpoint order with its canonical name.
  void for_each(const std::function<void(const std::string&, Tensor&)>& fn);
  void for_each(const std::function<void(const std::string&, const Tensor&)>& fn) const;
  Tensor& param(std::string_view name);
  const Tensor& param(std::string_view name) const;
  std::size_t param_count() const;

  friend bool operator==(const TransformerWeights&, const TransformerWeights&) = default;
};

// Bitwise equality of every parameter (distinguishes -0.0 and NaN payloads).
bool bit_identical(const TransformerWeights& a, const TransformerWeights& b);

// Kept/removed status of every prunable structure.
class MaskState {
 public:
  MaskState() = default;
  explicit MaskState(const ModelConfig& config);

  int n_layers() const { return static_cast<int>(heads_.size()); }
  int head_slots(int layer) const { return static_cast<int>(heads_.at(layer).size()); }
  int channel_slots(int layer) const { return static_cast<int>(channels_.at(layer).size()); }

  bool kept(const StructureId& id) const;
  // Throws ConstraintError if the removal would empty the layer's pool
  // (floor rule) and UsageError if the structure is already removed.
  void remove(const StructureId& id);
  bool would_violate_floor(const StructureId& id) const;

  int heads_kept(int layer) const;
  int channels_kept(int layer) const;
  std::vector<std::size_t> kept_heads(int layer) const;
  std::vector<std::size_t> kept_channels(int layer) const;
  std::vector<StructureId> removed() const;
  std::size_t removed_count() const;
  bool all_kept() const { return removed_count() == 0; }
  // True when every structure removed in `this` is also removed in `other`.
  bool removed_subset_of(const MaskState& other) const;

  friend bool operator==(const MaskState&, const MaskState&) = default;

 private:
  std::vector<std::vector<char>> heads_;
  std::vector<std::vector<char>> channels_;
};

TransformerWeights init_weights(const ModelConfig& config);

// Stable order: layer-major, heads before channels, unit ascending.
std::vector<StructureId> enumerate_structures(const ModelConfig& config);
std::size_t structure_param_count(const ModelConfig& config, const StructureId& id);
// Embeddings, norm gains and the output head.
std::size_t unprunable_param_count(const ModelConfig& config);
std::size_t total_param_count(const ModelConfig& config);

// One sequence scored by the model: positions i >= first_target contribute
// weight * -log p(tokens[i] | tokens[<i]).
struct ScoredSequence {
  std::vector<int> tokens;
  std::size_t first_target = 1;
  double weight = 1.0;
};

// Graph handles for a built forward pass; node values are readable after
// evaluate().
struct ForwardGraph {
  ad::Graph graph;
  ad::Bindings bindings;
  ad::NodeId loss;
  ad::NodeId logits;
  struct LayerTaps {
    ad::NodeId attn_in;      // normalized input to Q/K/V   [N, d_model]
    ad::NodeId heads_out;    // kept heads concatenated      [N, kept*d_head]
    ad::NodeId mlp_in;       // normalized input to gate/up  [N, d_model]
    ad::NodeId mlp_hidden;   // kept channels, up*silu(gate) [N, kept_ff]
    ad::NodeId attn_out;     // attention block output       [N, d_model]
  };
  std::vector<LayerTaps> taps;
  std::vector<std::size_t> row_offsets;  // first row of each sequence
};

ForwardGraph build_forward(const TransformerWeights& weights, const ModelConfig& config, const MaskState& masks,
                           std::span<const ScoredSequence> batch);

// Mean next-token cross-entropy over positions 1..N-1 of one sequence.
double forward_loss(const TransformerWeights& weights, const ModelConfig& config, const MaskState& masks,
                    std::span<const int> tokens);
double forward_loss(const TransformerWeights& weights, const ModelConfig& config, std::span<const int> tokens);

struct LossAndGradient {
  double loss = 0.0;
  ad::GradientMap gradients;
};

// Weighted loss of the batch and its gradient on the masked model.
LossAndGradient loss_and_gradient(const TransformerWeights& weights, const ModelConfig& config,
                                  const MaskState& masks, std::span<const ScoredSequence> batch);
double batch_loss(const TransformerWeights& weights, const ModelConfig& config, const MaskState& masks,
                  std::span<const ScoredSequence> batch);

// Unweighted summed NLL over each sequence's target region, plus counts.
struct SequenceNll {
  double nll = 0.0;
  std::size_t tokens = 0;
};
std::vector<SequenceNll> sequence_nll(const TransformerWeights& weights, const ModelConfig& config,
                                      const MaskState& masks, std::span<const ScoredSequence> batch);

// Weight copy with the coupled slices of every removed structure zeroed.
TransformerWeights zero_masked(const TransformerWeights& weights, const ModelConfig& config, const MaskState& masks);

struct Compacted {
  TransformerWeights weights;
  ModelConfig config;
};
Compacted compact(const TransformerWeights& weights, const ModelConfig& config, const MaskState& masks);

struct TrainOptions {
  int steps = 2000;
  double learning_rate = 3e-3;
  int batch = 8;
  int seq_len = 0;  // 0: config.max_seq_len
  std::uint64_t seed = 0;
  int warmup = 100;
  double clip_norm = 1.0;
  int log_every = 0;  // 0: silent
};

struct TrainLog {
  std::vector<double> losses;
};

TransformerWeights train_dense(const ModelConfig& config, std::span<const int> corpus, const TrainOptions& options,
                               TrainLog* log = nullptr);

}  // namespace gisp
