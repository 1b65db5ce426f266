#pragma once

#include <set>
#include <span>
#include <string>
#include <vector>

#include "gisp/autodiff.hpp"
#include "gisp/data.hpp"
#include "gisp/model.hpp"

namespace gisp {

enum class ObjectiveKind { Perplexity, Margin };

std::string_view objective_name(ObjectiveKind kind);

struct Objective {
  ObjectiveKind kind = ObjectiveKind::Perplexity;
  CalibrationSet calibration;
  std::size_t micro_batch = 8;  // sequences per forward/backward pass
  double loss_scale = 1.0;      // multiplies the objective before differentiation
};

using ElementScores = ad::GradientMap;

// |grad * weight| element-wise, for every parameter present in `grads`.
ElementScores element_importance(const ad::GradientMap& grads, const TransformerWeights& weights);

// Perplexity: gradient of the mean token cross-entropy over all calibration
// sequences. Margin: grad(L+) - grad(L-), L+/L- the mean candidate loss over
// positive/negative candidates. Gradients are accumulated over micro-batches
// in a fixed order before any product with the weights.
ad::GradientMap gradients_for_objective(const TransformerWeights& weights, const ModelConfig& config,
                                        const MaskState& masks, const Objective& objective);

// Raw per-structure scores in enumerate_structures() order: the sum of
// element scores over each structure's coupled slices.
std::vector<double> aggregate(const ElementScores& scores, const ModelConfig& config);

struct ScoredStructure {
  StructureId id;
  double raw = 0.0;
  double normalized = 0.0;

  friend bool operator==(const ScoredStructure&, const ScoredStructure&) = default;
};

struct ImportanceReport {
  int iteration = 0;
  std::vector<ScoredStructure> entries;  // kept structures, enumerate order
  double attn_pool_mean = 0.0;           // raw means before normalization
  double mlp_pool_mean = 0.0;

  friend bool operator==(const ImportanceReport&, const ImportanceReport&) = default;
};

// Divides each kept structure's raw score by the mean raw score of its pool
// (all kept heads model-wide, or all kept channels model-wide).
ImportanceReport normalize_pools(std::span<const double> raw, const ModelConfig& config, const MaskState& masks);

// Kept structures outside protected layers whose removal would not empty
// their pool, ascending by normalized score, ties by (layer, kind, unit).
std::vector<StructureId> rank_prunable(const ImportanceReport& report, const MaskState& masks,
                                       const std::set<int>& protected_layers);

// Convenience: gradients -> element scores -> aggregate -> normalize.
ImportanceReport compute_importance(const TransformerWeights& weights, const ModelConfig& config,
                                    const MaskState& masks, const Objective& objective, int iteration = 0);

std::string report_to_jsonl(const ImportanceReport& report);

}  // namespace gisp
