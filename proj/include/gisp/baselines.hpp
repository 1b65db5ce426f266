#pragma once

#include <set>
#include <vector>

#include "gisp/data.hpp"
#include "gisp/engine.hpp"
#include "gisp/model.hpp"

namespace gisp {

// L2 norm over all calibration tokens of every input feature of each
// prunable projection, measured on the dense model.
struct ActivationStats {
  struct Layer {
    std::vector<double> attn_in;     // feeds wq, wk, wv   [d_model]
    std::vector<double> heads_out;   // feeds wo           [heads*d_head]
    std::vector<double> mlp_in;      // feeds w_gate, w_up [d_model]
    std::vector<double> mlp_hidden;  // feeds w_down       [d_ff]
  };
  std::vector<Layer> layers;
  std::size_t tokens = 0;
};

ActivationStats collect_activation_stats(const TransformerWeights& weights, const ModelConfig& config,
                                         const CalibrationSet& calibration, std::size_t micro_batch = 16);

// Per-structure sum of |W_ij| * ||X_j|| over the coupled slices, in
// enumerate_structures() order.
std::vector<double> wanda_scores(const TransformerWeights& weights, const ModelConfig& config,
                                 const ActivationStats& stats);

// Uniform local pruning: in every unprotected layer, removes the
// round(ratio * count) lowest-scored heads and, separately, channels.
MaskState wanda_sp(const TransformerWeights& weights, const ModelConfig& config, const ActivationStats& stats,
                   double ratio, const std::set<int>& protected_layers);

// Per-structure sum of |W| over the coupled slices, enumerate order.
std::vector<double> magnitude_scores(const TransformerWeights& weights, const ModelConfig& config);

// Global ascending removal by magnitude score until ratio * B is met.
MaskState magnitude_global(const TransformerWeights& weights, const ModelConfig& config, double ratio,
                           const std::set<int>& protected_layers,
                           BudgetMode mode = BudgetMode::ParameterFraction);

}  // namespace gisp
