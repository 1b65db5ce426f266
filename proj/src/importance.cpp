#include "gisp/importance.hpp"

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>

#include "gisp/error.hpp"

namespace gisp {

namespace {

void accumulate(ad::GradientMap& into, const ad::GradientMap& add) {
  if (into.empty()) {
    into = add;
    return;
  }
  for (auto& [name, t] : into) {
    const auto& a = add.find(name)->second;
    for (std::size_t i = 0; i < t.size(); ++i) t[i] += a[i];
  }
}

ad::GradientMap batch_gradient(const TransformerWeights& weights, const ModelConfig& config, const MaskState& masks,
                               std::span<const ScoredSequence> seqs, std::size_t micro_batch) {
  ad::GradientMap total;
  const std::size_t mb = std::max<std::size_t>(1, micro_batch);
  for (std::size_t b = 0; b < seqs.size(); b += mb) {
    const auto n = std::min(mb, seqs.size() - b);
    accumulate(total, loss_and_gradient(weights, config, masks, seqs.subspan(b, n)).gradients);
  }
  return total;
}

double sum_rows(const Tensor& t, std::size_t r0, std::size_t n) {
  double s = 0.0;
  const std::size_t c = t.cols();
  for (std::size_t i = r0 * c; i < (r0 + n) * c; ++i) s += t[i];
  return s;
}

double sum_cols(const Tensor& t, std::size_t c0, std::size_t n) {
  double s = 0.0;
  const std::size_t c = t.cols();
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = c0; j < c0 + n; ++j) s += t[i * c + j];
  return s;
}

const Tensor& score_tensor(const ElementScores& scores, int layer, const char* field) {
  const auto name = "layers." + std::to_string(layer) + "." + field;
  auto it = scores.find(name);
  if (it == scores.end()) throw UsageError("element scores missing " + name);
  return it->second;
}

}  // namespace

std::string_view objective_name(ObjectiveKind kind) {
  return kind == ObjectiveKind::Perplexity ? "perplexity" : "margin";
}

ElementScores element_importance(const ad::GradientMap& grads, const TransformerWeights& weights) {
  ElementScores out;
  for (const auto& [name, g] : grads) {
    const Tensor& w = weights.param(name);
    if (w.shape() != g.shape()) {
      throw ShapeError("gradient/weight shape mismatch for " + name + ": " + shape_string(g.shape()) + " vs " +
                       shape_string(w.shape()));
    }
    Tensor s(g.shape());
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = std::abs(g[i] * w[i]);
    out.emplace(name, std::move(s));
  }
  return out;
}

ad::GradientMap gradients_for_objective(const TransformerWeights& weights, const ModelConfig& config,
                                        const MaskState& masks, const Objective& objective) {
  const auto& cal = objective.calibration;
  if (cal.empty()) throw UsageError("calibration set is empty");

  if (objective.kind == ObjectiveKind::Perplexity) {
    if (cal.kind != CalibrationKind::Perplexity) throw UsageError("perplexity objective needs token sequences");
    std::size_t targets = 0;
    for (const auto& s : cal.sequences) {
      if (s.size() < 2) throw UsageError("calibration sequence shorter than 2 tokens");
      targets += s.size() - 1;
    }
    const double w = objective.loss_scale / static_cast<double>(targets);
    std::vector<ScoredSequence> seqs;
    seqs.reserve(cal.sequences.size());
    for (const auto& s : cal.sequences) seqs.push_back(ScoredSequence{s, 1, w});
    return batch_gradient(weights, config, masks, seqs, objective.micro_batch);
  }

  if (cal.kind != CalibrationKind::Margin) throw UsageError("margin objective needs QA items");
  for (const auto& it : cal.items) {
    if (it.negatives.empty()) throw UsageError("margin item lacks negatives");
  }
  auto batches = build_margin_batches(cal.items);
  for (auto* side : {&batches.positive, &batches.negative})
    for (auto& s : *side) s.weight *= objective.loss_scale;
  auto grad = batch_gradient(weights, config, masks, batches.positive, objective.micro_batch);
  const auto neg = batch_gradient(weights, config, masks, batches.negative, objective.micro_batch);
  for (auto& [name, t] : grad) {
    const auto& n = neg.find(name)->second;
    for (std::size_t i = 0; i < t.size(); ++i) t[i] -= n[i];
  }
  return grad;
}

std::vector<double> aggregate(const ElementScores& scores, const ModelConfig& config) {
  std::vector<double> out;
  const auto dh = static_cast<std::size_t>(config.d_head);
  for (int l = 0; l < config.n_layers; ++l) {
    const auto& q = score_tensor(scores, l, "wq");
    const auto& k = score_tensor(scores, l, "wk");
    const auto& v = score_tensor(scores, l, "wv");
    const auto& o = score_tensor(scores, l, "wo");
    for (int h = 0; h < config.heads_in(l); ++h) {
      const auto r0 = static_cast<std::size_t>(h) * dh;
      out.push_back(sum_rows(q, r0, dh) + sum_rows(k, r0, dh) + sum_rows(v, r0, dh) +
                    sum_cols(o, r0, dh));
    }
    const auto& gate = score_tensor(scores, l, "w_gate");
    const auto& up = score_tensor(scores, l, "w_up");
    const auto& down = score_tensor(scores, l, "w_down");
    for (int c = 0; c < config.ff_in(l); ++c) {
      const auto u = static_cast<std::size_t>(c);
      out.push_back(sum_rows(gate, u, 1) + sum_rows(up, u, 1) + sum_cols(down, u, 1));
    }
  }
  return out;
}

ImportanceReport normalize_pools(std::span<const double> raw, const ModelConfig& config, const MaskState& masks) {
  const auto ids = enumerate_structures(config);
  if (raw.size() != ids.size()) throw ShapeError("raw score count does not match the structure list");
  double sum[2] = {0.0, 0.0};
  std::size_t count[2] = {0, 0};
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (!masks.kept(ids[i])) continue;
    const auto p = static_cast<std::size_t>(ids[i].kind);
    sum[p] += raw[i];
    ++count[p];
  }
  ImportanceReport rep;
  double mean[2];
  for (std::size_t p = 0; p < 2; ++p) {
    const char* pool = p == 0 ? "attention" : "MLP";
    if (count[p] == 0) throw UsageError(std::string("no kept structures in the ") + pool + " pool");
    mean[p] = sum[p] / static_cast<double>(count[p]);
    if (!(mean[p] > 0.0) || !std::isfinite(mean[p])) {
      throw NumericError(std::string("degenerate importance: ") + pool + " pool mean is " + std::to_string(mean[p]) +
                         " (calibration produced no gradient signal)");
    }
  }
  rep.attn_pool_mean = mean[0];
  rep.mlp_pool_mean = mean[1];
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (!masks.kept(ids[i])) continue;
    rep.entries.push_back({ids[i], raw[i], raw[i] / mean[static_cast<std::size_t>(ids[i].kind)]});
  }
  return rep;
}

std::vector<StructureId> rank_prunable(const ImportanceReport& report, const MaskState& masks,
                                       const std::set<int>& protected_layers) {
  std::vector<const ScoredStructure*> pool;
  for (const auto& e : report.entries) {
    if (protected_layers.contains(e.id.layer)) continue;
    if (!masks.kept(e.id) || masks.would_violate_floor(e.id)) continue;
    pool.push_back(&e);
  }
  std::sort(pool.begin(), pool.end(), [](const ScoredStructure* a, const ScoredStructure* b) {
    if (a->normalized != b->normalized) return a->normalized < b->normalized;
    return a->id < b->id;
  });
  std::vector<StructureId> out;
  out.reserve(pool.size());
  for (const auto* e : pool) out.push_back(e->id);
  return out;
}

ImportanceReport compute_importance(const TransformerWeights& weights, const ModelConfig& config,
                                    const MaskState& masks, const Objective& objective, int iteration) {
  const auto grads = gradients_for_objective(weights, config, masks, objective);
  const auto raw = aggregate(element_importance(grads, weights), config);
  auto rep = normalize_pools(raw, config, masks);
  rep.iteration = iteration;
  return rep;
}

std::string report_to_jsonl(const ImportanceReport& report) {
  nlohmann::json j;
  j["iteration"] = report.iteration;
  j["attn_pool_mean"] = report.attn_pool_mean;
  j["mlp_pool_mean"] = report.mlp_pool_mean;
  auto& arr = j["scores"] = nlohmann::json::array();
  for (const auto& e : report.entries) {
    arr.push_back({{"layer", e.id.layer},
                   {"kind", kind_name(e.id.kind)},
                   {"unit", e.id.unit},
                   {"raw", e.raw},
                   {"normalized", e.normalized}});
  }
  return j.dump() + "\n";
}

}  // namespace gisp
