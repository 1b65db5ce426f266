#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "gisp/importance.hpp"
#include "gisp/model.hpp"

namespace gisp {

inline constexpr const char* kToolVersion = "gisp-lab 0.1.0";

enum class BudgetMode { ParameterFraction, StructureFraction };

std::string_view budget_mode_name(BudgetMode mode);
BudgetMode parse_budget_mode(std::string_view text);

struct ScheduleSpec {
  double target_ratio = 0.5;
  int n_iterations = 1;
  BudgetMode budget_mode = BudgetMode::ParameterFraction;

  void validate() const;
  friend bool operator==(const ScheduleSpec&, const ScheduleSpec&) = default;
};

// First ceil(0.1 * n_layers) layers plus the last layer.
std::set<int> default_protected_layers(int n_layers);

// Budget units a structure costs: its parameter count, or 1 per structure.
double structure_cost(const ModelConfig& config, const StructureId& id, BudgetMode mode);
// B: total cost of every structure outside the protected layers.
double prunable_budget(const ModelConfig& config, const std::set<int>& protected_layers, BudgetMode mode);
// Cumulative budget after iteration k: (k / n) * rho * B.
double quota(const ScheduleSpec& schedule, double budget, int k);
// Removed cost / B for the given masks.
double removed_fraction(const MaskState& masks, const ModelConfig& config, const std::set<int>& protected_layers,
                        BudgetMode mode);

// ---- trace ----------------------------------------------------------------

struct TraceHeader {
  std::string model_fingerprint;  // 16 hex digits
  ScheduleSpec schedule;
  std::string objective;
  std::vector<int> protected_layers;
  std::uint64_t seed = 0;
  std::string tool_version = kToolVersion;

  friend bool operator==(const TraceHeader&, const TraceHeader&) = default;
};

struct TraceRecord {
  int k = 0;
  std::vector<StructureId> removed;  // removal order
  double cum_fraction = 0.0;
  std::map<std::string, double> metrics;  // empty: omitted from the file

  friend bool operator==(const TraceRecord&, const TraceRecord&) = default;
};

struct PruneTrace {
  TraceHeader header;
  std::vector<TraceRecord> records;

  friend bool operator==(const PruneTrace&, const PruneTrace&) = default;
};

// JSON-lines: header object, then one object per iteration.
std::string serialize_trace(const PruneTrace& trace);
PruneTrace parse_trace(std::string_view text);
PruneTrace load_trace(const std::filesystem::path& path);
void save_trace(const std::filesystem::path& path, const PruneTrace& trace);

struct NestedCheck {
  bool nested = true;
  std::string violation;  // empty when nested
};
NestedCheck nested_check(const PruneTrace& trace);

// ---- run ------------------------------------------------------------------

struct PhaseTimes {
  double importance = 0.0;
  double ranking = 0.0;
  double masking = 0.0;
};

struct RunOptions {
  bool keep_reports = false;
  // Called after each iteration with the updated masks.
  std::function<void(const TraceRecord&, const MaskState&)> on_iteration;
  // Optional per-iteration metrics stored in the trace record.
  std::function<std::map<std::string, double>(int k, const MaskState&)> metrics;
  // Draws a fresh calibration set for iteration k (seeded by the run seed);
  // unset keeps the objective's fixed calibration.
  std::function<CalibrationSet(int k, std::uint64_t seed)> resample;
  std::optional<MaskState> start;
};

struct RunResult {
  MaskState masks;
  PruneTrace trace;
  std::vector<ImportanceReport> reports;
  Compacted compacted;
  PhaseTimes timing;
};

RunResult gisp_run(const TransformerWeights& weights, const ModelConfig& config, const Objective& objective,
                   const ScheduleSpec& schedule, const std::set<int>& protected_layers, std::uint64_t seed,
                   const RunOptions& options = {});

RunResult one_shot(const TransformerWeights& weights, const ModelConfig& config, const Objective& objective,
                   double ratio, const std::set<int>& protected_layers, std::uint64_t seed,
                   BudgetMode mode = BudgetMode::ParameterFraction, const RunOptions& options = {});

// Target for reconstruction: an iteration index, or the first iteration
// whose cumulative fraction reaches a ratio.
struct ReconstructTarget {
  std::optional<int> iteration;
  std::optional<double> ratio;
};

// Iteration index a target resolves to; errors past the trace end. An empty
// target is the trace end.
int resolve_target(const PruneTrace& trace, const ReconstructTarget& target);

// Masks after replaying records 1..k.
MaskState replay(const PruneTrace& trace, const ModelConfig& config, int k);

struct Reconstruction {
  int iteration = 0;
  MaskState masks;
  Compacted compacted;
};
// Checks the dense model's fingerprint against the trace header.
Reconstruction reconstruct(const PruneTrace& trace, const TransformerWeights& dense, const ModelConfig& config,
                           const ReconstructTarget& target);

struct LayerSparsity {
  int layer = 0;
  double attn_kept = 1.0;
  double mlp_kept = 1.0;
};
std::vector<LayerSparsity> sparsity_profile(const MaskState& masks, const ModelConfig& config);

}  // namespace gisp
