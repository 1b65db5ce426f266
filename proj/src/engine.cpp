#include "gisp/engine.hpp"

#include <chrono>
#include <cmath>
#include <nlohmann/json.hpp>

#include "gisp/checkpoint.hpp"
#include "gisp/error.hpp"

namespace gisp {

namespace {

using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Absorbs rounding in k/n * rho * B so exact quotas are met, not missed by an ulp.
constexpr double kQuotaSlack = 1e-9;

}  // namespace

std::string_view budget_mode_name(BudgetMode mode) {
  return mode == BudgetMode::ParameterFraction ? "parameter" : "structure";
}

BudgetMode parse_budget_mode(std::string_view text) {
  if (text == "parameter") return BudgetMode::ParameterFraction;
  if (text == "structure") return BudgetMode::StructureFraction;
  throw UsageError("unknown budget mode: " + std::string(text) + " (expected parameter or structure)");
}

void ScheduleSpec::validate() const {
  if (!(target_ratio >= 0.0 && target_ratio < 1.0)) {
    throw UsageError("target ratio must lie in [0, 1), got " + std::to_string(target_ratio));
  }
  if (n_iterations < 1) throw UsageError("n_iterations must be >= 1, got " + std::to_string(n_iterations));
}

std::set<int> default_protected_layers(int n_layers) {
  std::set<int> out;
  const int first = static_cast<int>(std::ceil(0.1 * n_layers));
  for (int l = 0; l < first && l < n_layers; ++l) out.insert(l);
  if (n_layers > 0) out.insert(n_layers - 1);
  return out;
}

double structure_cost(const ModelConfig& config, const StructureId& id, BudgetMode mode) {
  if (mode == BudgetMode::StructureFraction) return 1.0;
  return static_cast<double>(structure_param_count(config, id));
}

double prunable_budget(const ModelConfig& config, const std::set<int>& protected_layers, BudgetMode mode) {
  double b = 0.0;
  for (const auto& id : enumerate_structures(config)) {
    if (!protected_layers.contains(id.layer)) b += structure_cost(config, id, mode);
  }
  return b;
}

double quota(const ScheduleSpec& schedule, double budget, int k) {
  if (k < 1 || k > schedule.n_iterations) {
    throw UsageError("iteration " + std::to_string(k) + " outside 1.." + std::to_string(schedule.n_iterations));
  }
  return static_cast<double>(k) / schedule.n_iterations * schedule.target_ratio * budget;
}

double removed_fraction(const MaskState& masks, const ModelConfig& config, const std::set<int>& protected_layers,
                        BudgetMode mode) {
  const double b = prunable_budget(config, protected_layers, mode);
  if (b == 0.0) return 0.0;
  double removed = 0.0;
  for (const auto& id : masks.removed()) removed += structure_cost(config, id, mode);
  return removed / b;
}

// ---- trace ----------------------------------------------------------------

std::string serialize_trace(const PruneTrace& trace) {
  const auto& h = trace.header;
  json head = {{"model_fingerprint", h.model_fingerprint},
               {"schedule",
                {{"target_ratio", h.schedule.target_ratio},
                 {"n_iterations", h.schedule.n_iterations},
                 {"budget_mode", budget_mode_name(h.schedule.budget_mode)}}},
               {"objective", h.objective},
               {"protected_layers", h.protected_layers},
               {"seed", h.seed},
               {"tool_version", h.tool_version}};
  std::string out = head.dump() + "\n";
  for (const auto& r : trace.records) {
    json removed = json::array();
    for (const auto& id : r.removed) removed.push_back({{"layer", id.layer}, {"kind", kind_name(id.kind)}, {"unit", id.unit}});
    json rec = {{"k", r.k}, {"removed", std::move(removed)}, {"cum_fraction", r.cum_fraction}};
    if (!r.metrics.empty()) rec["metrics"] = r.metrics;
    out += rec.dump() + "\n";
  }
  return out;
}

PruneTrace parse_trace(std::string_view text) {
  PruneTrace trace;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  bool have_header = false;
  while (pos < text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    const auto line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = json::parse(line);
      if (!have_header) {
        auto& h = trace.header;
        h.model_fingerprint = j.at("model_fingerprint").get<std::string>();
        const auto& s = j.at("schedule");
        h.schedule.target_ratio = s.at("target_ratio").get<double>();
        h.schedule.n_iterations = s.at("n_iterations").get<int>();
        h.schedule.budget_mode = parse_budget_mode(s.at("budget_mode").get<std::string>());
        h.objective = j.at("objective").get<std::string>();
        h.protected_layers = j.at("protected_layers").get<std::vector<int>>();
        h.seed = j.at("seed").get<std::uint64_t>();
        h.tool_version = j.at("tool_version").get<std::string>();
        have_header = true;
        continue;
      }
      TraceRecord r;
      r.k = j.at("k").get<int>();
      for (const auto& e : j.at("removed")) {
        r.removed.push_back(
            {e.at("layer").get<int>(), parse_kind(e.at("kind").get<std::string>()), e.at("unit").get<int>()});
      }
      r.cum_fraction = j.at("cum_fraction").get<double>();
      if (j.contains("metrics")) r.metrics = j.at("metrics").get<std::map<std::string, double>>();
      trace.records.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw UsageError("trace line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!have_header) throw UsageError("trace has no header line");
  return trace;
}

PruneTrace load_trace(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return parse_trace(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

void save_trace(const std::filesystem::path& path, const PruneTrace& trace) {
  write_file_atomic(path, serialize_trace(trace));
}

NestedCheck nested_check(const PruneTrace& trace) {
  std::map<StructureId, int> seen;
  double prev = 0.0;
  int prev_k = 0;
  for (const auto& r : trace.records) {
    if (r.k != prev_k + 1) {
      return {false, "record k=" + std::to_string(r.k) + " follows k=" + std::to_string(prev_k)};
    }
    for (const auto& id : r.removed) {
      auto [it, fresh] = seen.emplace(id, r.k);
      if (!fresh) {
        return {false, "structure " + to_string(id) + " removed at k=" + std::to_string(it->second) +
                           " and again at k=" + std::to_string(r.k)};
      }
    }
    if (r.cum_fraction < prev) {
      return {false, "cumulative fraction decreases at k=" + std::to_string(r.k)};
    }
    prev = r.cum_fraction;
    prev_k = r.k;
  }
  return {};
}

// ---- run ------------------------------------------------------------------

RunResult gisp_run(const TransformerWeights& weights, const ModelConfig& config, const Objective& objective,
                   const ScheduleSpec& schedule, const std::set<int>& protected_layers, std::uint64_t seed,
                   const RunOptions& options) {
  schedule.validate();
  for (int l : protected_layers) {
    if (l < 0 || l >= config.n_layers) throw UsageError("protected layer " + std::to_string(l) + " out of range");
  }

  RunResult res;
  res.masks = options.start ? *options.start : MaskState(config);
  auto& h = res.trace.header;
  h.model_fingerprint = fingerprint_hex(model_fingerprint(weights, config));
  h.schedule = schedule;
  h.objective = std::string(objective_name(objective.kind));
  h.protected_layers.assign(protected_layers.begin(), protected_layers.end());
  h.seed = seed;

  const BudgetMode mode = schedule.budget_mode;
  const double budget = prunable_budget(config, protected_layers, mode);
  double cum = 0.0;
  for (const auto& id : res.masks.removed()) cum += structure_cost(config, id, mode);

  if (schedule.target_ratio > 0.0) {
    if (budget == 0.0) throw ConstraintError("every layer is protected; nothing can be pruned");
    Objective obj = objective;
    for (int k = 1; k <= schedule.n_iterations; ++k) {
      const double target = quota(schedule, budget, k);
      TraceRecord rec;
      rec.k = k;
      if (cum + kQuotaSlack * budget < target) {
        if (options.resample) obj.calibration = options.resample(k, seed);

        auto t0 = Clock::now();
        auto report = compute_importance(weights, config, res.masks, obj, k);
        res.timing.importance += seconds_since(t0);

        t0 = Clock::now();
        const auto order = rank_prunable(report, res.masks, protected_layers);
        res.timing.ranking += seconds_since(t0);

        t0 = Clock::now();
        for (const auto& id : order) {
          if (cum + kQuotaSlack * budget >= target) break;
          if (res.masks.would_violate_floor(id)) continue;
          res.masks.remove(id);
          rec.removed.push_back(id);
          cum += structure_cost(config, id, mode);
        }
        res.timing.masking += seconds_since(t0);

        if (cum + kQuotaSlack * budget < target) {
          throw ConstraintError("quota unreachable at iteration " + std::to_string(k) + ": need " +
                                std::to_string(target / budget) + " of the prunable budget but the floor rule " +
                                "(one head and one channel per layer) caps removal at " +
                                std::to_string(cum / budget) + " outside the protected layers");
        }
        if (options.keep_reports) res.reports.push_back(std::move(report));
      }
      rec.cum_fraction = cum / budget;
      if (options.metrics) rec.metrics = options.metrics(k, res.masks);
      if (options.on_iteration) options.on_iteration(rec, res.masks);
      res.trace.records.push_back(std::move(rec));
    }
  }
  res.compacted = compact(weights, config, res.masks);
  return res;
}

RunResult one_shot(const TransformerWeights& weights, const ModelConfig& config, const Objective& objective,
                   double ratio, const std::set<int>& protected_layers, std::uint64_t seed, BudgetMode mode,
                   const RunOptions& options) {
  return gisp_run(weights, config, objective, ScheduleSpec{ratio, 1, mode}, protected_layers, seed, options);
}

int resolve_target(const PruneTrace& trace, const ReconstructTarget& target) {
  const int last = static_cast<int>(trace.records.size());
  if (target.iteration && target.ratio) throw UsageError("give an iteration or a ratio, not both");
  if (!target.iteration && !target.ratio) return last;
  if (target.iteration) {
    const int k = *target.iteration;
    if (k < 0) throw UsageError("iteration must be >= 0");
    if (k > last) {
      throw UsageError("iteration " + std::to_string(k) + " is beyond the trace end (" + std::to_string(last) + ")");
    }
    return k;
  }
  const double r = *target.ratio;
  if (r <= 0.0) return 0;
  for (const auto& rec : trace.records) {
    if (rec.cum_fraction + kQuotaSlack >= r) return rec.k;
  }
  const double end = trace.records.empty() ? 0.0 : trace.records.back().cum_fraction;
  throw UsageError("ratio " + std::to_string(r) + " is beyond the trace end (" + std::to_string(end) + ")");
}

MaskState replay(const PruneTrace& trace, const ModelConfig& config, int k) {
  MaskState masks(config);
  for (const auto& rec : trace.records) {
    if (rec.k > k) break;
    for (const auto& id : rec.removed) {
      if (id.layer < 0 || id.layer >= config.n_layers || id.unit < 0 ||
          id.unit >= (id.kind == StructureKind::AttnHead ? config.heads_in(id.layer) : config.ff_in(id.layer))) {
        throw UsageError("trace names " + to_string(id) + ", which the model does not have");
      }
      masks.remove(id);
    }
  }
  return masks;
}

Reconstruction reconstruct(const PruneTrace& trace, const TransformerWeights& dense, const ModelConfig& config,
                           const ReconstructTarget& target) {
  const auto fp = fingerprint_hex(model_fingerprint(dense, config));
  if (fp != trace.header.model_fingerprint) {
    throw UsageError("model fingerprint " + fp + " does not match the trace (" + trace.header.model_fingerprint + ")");
  }
  Reconstruction out;
  out.iteration = resolve_target(trace, target);
  out.masks = replay(trace, config, out.iteration);
  out.compacted = compact(dense, config, out.masks);
  return out;
}

std::vector<LayerSparsity> sparsity_profile(const MaskState& masks, const ModelConfig& config) {
  std::vector<LayerSparsity> out;
  for (int l = 0; l < config.n_layers; ++l) {
    out.push_back({l, static_cast<double>(masks.heads_kept(l)) / config.heads_in(l),
                   static_cast<double>(masks.channels_kept(l)) / config.ff_in(l)});
  }
  return out;
}

}  // namespace gisp
