#include "gisp/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gisp/error.hpp"

namespace gisp {

namespace {

void add_squares(std::vector<double>& acc, const Tensor& x) {
  const std::size_t c = x.cols();
  if (acc.empty()) acc.assign(c, 0.0);
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t j = 0; j < c; ++j) acc[j] += x[r * c + j] * x[r * c + j];
}

void take_sqrt(std::vector<double>& v) {
  for (auto& x : v) x = std::sqrt(x);
}

// sum_{rows r0..r0+n, j} |W_rj| * s_j
double rows_weighted(const Tensor& w, std::size_t r0, std::size_t n, const std::vector<double>& s) {
  const std::size_t c = w.cols();
  double total = 0.0;
  for (std::size_t r = r0; r < r0 + n; ++r)
    for (std::size_t j = 0; j < c; ++j) total += std::abs(w[r * c + j]) * s[j];
  return total;
}

// sum_{i, cols c0..c0+n} |W_ij| * s_j
double cols_weighted(const Tensor& w, std::size_t c0, std::size_t n, const std::vector<double>& s) {
  const std::size_t c = w.cols();
  double total = 0.0;
  for (std::size_t i = 0; i < w.rows(); ++i)
    for (std::size_t j = c0; j < c0 + n; ++j) total += std::abs(w[i * c + j]) * s[j];
  return total;
}

void check_ratio(double ratio) {
  if (!(ratio >= 0.0 && ratio < 1.0)) throw UsageError("ratio must lie in [0, 1), got " + std::to_string(ratio));
}

}  // namespace

ActivationStats collect_activation_stats(const TransformerWeights& weights, const ModelConfig& config,
                                         const CalibrationSet& calibration, std::size_t micro_batch) {
  if (calibration.kind != CalibrationKind::Perplexity) {
    throw UsageError("activation statistics need token-sequence calibration");
  }
  if (calibration.sequences.empty()) throw UsageError("calibration set is empty");
  const MaskState dense(config);
  ActivationStats stats;
  stats.layers.resize(static_cast<std::size_t>(config.n_layers));
  const std::size_t mb = std::max<std::size_t>(1, micro_batch);
  const auto& seqs = calibration.sequences;
  for (std::size_t b = 0; b < seqs.size(); b += mb) {
    std::vector<ScoredSequence> batch;
    for (std::size_t i = b; i < std::min(seqs.size(), b + mb); ++i) {
      batch.push_back({seqs[i], 1, 1.0});
      stats.tokens += seqs[i].size();
    }
    auto fg = build_forward(weights, config, dense, batch);
    fg.graph.evaluate(fg.bindings);
    for (std::size_t l = 0; l < stats.layers.size(); ++l) {
      auto& s = stats.layers[l];
      const auto& t = fg.taps[l];
      add_squares(s.attn_in, fg.graph.value(t.attn_in));
      add_squares(s.heads_out, fg.graph.value(t.heads_out));
      add_squares(s.mlp_in, fg.graph.value(t.mlp_in));
      add_squares(s.mlp_hidden, fg.graph.value(t.mlp_hidden));
    }
  }
  for (auto& s : stats.layers) {
    take_sqrt(s.attn_in);
    take_sqrt(s.heads_out);
    take_sqrt(s.mlp_in);
    take_sqrt(s.mlp_hidden);
  }
  return stats;
}

std::vector<double> wanda_scores(const TransformerWeights& weights, const ModelConfig& config,
                                 const ActivationStats& stats) {
  if (stats.layers.size() != static_cast<std::size_t>(config.n_layers)) {
    throw ShapeError("activation statistics cover " + std::to_string(stats.layers.size()) + " layers, model has " +
                     std::to_string(config.n_layers));
  }
  std::vector<double> out;
  const auto dh = static_cast<std::size_t>(config.d_head);
  for (int l = 0; l < config.n_layers; ++l) {
    const auto& w = weights.layers[l];
    const auto& s = stats.layers[l];
    for (int h = 0; h < config.heads_in(l); ++h) {
      const auto r0 = static_cast<std::size_t>(h) * dh;
      out.push_back(rows_weighted(w.wq, r0, dh, s.attn_in) + rows_weighted(w.wk, r0, dh, s.attn_in) +
                    rows_weighted(w.wv, r0, dh, s.attn_in) + cols_weighted(w.wo, r0, dh, s.heads_out));
    }
    for (int c = 0; c < config.ff_in(l); ++c) {
      const auto u = static_cast<std::size_t>(c);
      out.push_back(rows_weighted(w.w_gate, u, 1, s.mlp_in) + rows_weighted(w.w_up, u, 1, s.mlp_in) +
                    cols_weighted(w.w_down, u, 1, s.mlp_hidden));
    }
  }
  return out;
}

MaskState wanda_sp(const TransformerWeights& weights, const ModelConfig& config, const ActivationStats& stats,
                   double ratio, const std::set<int>& protected_layers) {
  check_ratio(ratio);
  const auto scores = wanda_scores(weights, config, stats);
  const auto ids = enumerate_structures(config);
  MaskState masks(config);
  std::size_t i = 0;
  while (i < ids.size()) {
    // One (layer, kind) group is a contiguous run of the enumeration.
    std::size_t j = i;
    while (j < ids.size() && ids[j].layer == ids[i].layer && ids[j].kind == ids[i].kind) ++j;
    if (!protected_layers.contains(ids[i].layer)) {
      const std::size_t n = j - i;
      const auto remove = static_cast<std::size_t>(std::lround(ratio * static_cast<double>(n)));
      if (remove >= n) {
        throw ConstraintError("ratio " + std::to_string(ratio) + " would remove every " +
                              std::string(kind_name(ids[i].kind)) + " of layer " + std::to_string(ids[i].layer));
      }
      std::vector<std::size_t> order(n);
      std::iota(order.begin(), order.end(), i);
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
      for (std::size_t r = 0; r < remove; ++r) masks.remove(ids[order[r]]);
    }
    i = j;
  }
  return masks;
}

std::vector<double> magnitude_scores(const TransformerWeights& weights, const ModelConfig& config) {
  std::vector<double> out;
  const auto dh = static_cast<std::size_t>(config.d_head);
  for (int l = 0; l < config.n_layers; ++l) {
    const auto& w = weights.layers[l];
    const std::vector<double> ones_d(static_cast<std::size_t>(config.d_model), 1.0);
    const std::vector<double> ones_h(static_cast<std::size_t>(config.heads_in(l)) * dh, 1.0);
    const std::vector<double> ones_f(static_cast<std::size_t>(config.ff_in(l)), 1.0);
    for (int h = 0; h < config.heads_in(l); ++h) {
      const auto r0 = static_cast<std::size_t>(h) * dh;
      out.push_back(rows_weighted(w.wq, r0, dh, ones_d) + rows_weighted(w.wk, r0, dh, ones_d) +
                    rows_weighted(w.wv, r0, dh, ones_d) + cols_weighted(w.wo, r0, dh, ones_h));
    }
    for (int c = 0; c < config.ff_in(l); ++c) {
      const auto u = static_cast<std::size_t>(c);
      out.push_back(rows_weighted(w.w_gate, u, 1, ones_d) + rows_weighted(w.w_up, u, 1, ones_d) +
                    cols_weighted(w.w_down, u, 1, ones_f));
    }
  }
  return out;
}

MaskState magnitude_global(const TransformerWeights& weights, const ModelConfig& config, double ratio,
                           const std::set<int>& protected_layers, BudgetMode mode) {
  check_ratio(ratio);
  const auto scores = magnitude_scores(weights, config);
  const auto ids = enumerate_structures(config);
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (!protected_layers.contains(ids[i].layer)) order.push_back(i);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  MaskState masks(config);
  const double budget = prunable_budget(config, protected_layers, mode);
  const double target = ratio * budget;
  double cum = 0.0;
  for (std::size_t i : order) {
    if (cum + 1e-9 * budget >= target) break;
    if (masks.would_violate_floor(ids[i])) continue;
    masks.remove(ids[i]);
    cum += structure_cost(config, ids[i], mode);
  }
  if (cum + 1e-9 * budget < target) {
    throw ConstraintError("magnitude pruning cannot reach ratio " + std::to_string(ratio) +
                          " under the floor rule outside the protected layers");
  }
  return masks;
}

}  // namespace gisp
