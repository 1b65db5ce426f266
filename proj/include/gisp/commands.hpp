#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "gisp/config.hpp"
#include "gisp/engine.hpp"
#include "gisp/eval.hpp"

namespace gisp {

// Data loaded once per command: corpus split, held-out evaluation windows
// and the QA file split into a calibration pool and an evaluation tail.
struct Workspace {
  RunConfig config;
  CorpusSplit split;
  std::vector<std::vector<int>> eval_sequences;
  std::vector<QAItem> qa_pool;
  std::vector<QAItem> qa_eval;
};

Workspace open_workspace(const RunConfig& config);

// Consecutive non-overlapping windows from the start of `tokens`.
std::vector<std::vector<int>> heldout_windows(std::span<const int> tokens, std::size_t count, std::size_t seq_len);

// Calibration drawn for one seed according to config.calibration.
CalibrationSet draw_calibration(const Workspace& ws, std::uint64_t seed);
Objective make_objective(const Workspace& ws, std::uint64_t seed);
// Per-iteration resampler, or an empty function when resampling is off.
std::function<CalibrationSet(int, std::uint64_t)> make_resampler(const Workspace& ws);

// Writes corpus.txt, qa_facts.jsonl and qa_words.jsonl into `dir`.
void make_data_files(const std::filesystem::path& dir, std::size_t corpus_bytes, std::size_t qa_items,
                     std::uint64_t seed);

struct TrainResult {
  TransformerWeights weights;
  TrainLog log;
  std::string fingerprint;
  double seconds = 0.0;
};
// Writes the checkpoint and `<checkpoint>.manifest.json`, which echoes the
// config document it was given.
TrainResult cmd_train(const Workspace& ws, const nlohmann::json& config_doc, const std::filesystem::path& out);

enum class PruneMethod { Gisp, OneShot, WandaSp, Magnitude };
std::string_view method_name(PruneMethod method);
PruneMethod parse_method(std::string_view text);

struct PruneRequest {
  PruneMethod method = PruneMethod::Gisp;
  std::uint64_t seed = 0;
  std::optional<double> ratio;       // unset: config schedule ratio
  std::vector<double> milestones;    // cumulative ratios, gisp/oneshot only
  std::filesystem::path out_dir;     // empty: nothing written
};

struct PruneResult {
  MaskState masks;
  std::optional<PruneTrace> trace;  // gisp and oneshot only
  Compacted compacted;
  double pruned_fraction = 0.0;
  std::map<std::string, double> timing;
  std::vector<std::filesystem::path> written;
};

// Writes trace.jsonl (gisp/oneshot), masks.json, pruned.ckpt,
// milestone_<pct>.ckpt and timing.json into out_dir.
PruneResult cmd_prune(const Workspace& ws, const TransformerWeights& dense, const ModelConfig& config,
                      const PruneRequest& request);

nlohmann::json masks_to_json(const MaskState& masks);
MaskState masks_from_json(const nlohmann::json& doc, const ModelConfig& config);

struct EvalOutput {
  EvalReport report;
  std::string model_fingerprint;
  std::size_t params = 0;
};
// Evaluates a compacted (dense-shaped) model on the workspace's held-out
// windows and QA tail.
EvalOutput cmd_eval(const Workspace& ws, const TransformerWeights& weights, const ModelConfig& config);
nlohmann::json eval_to_json(const EvalOutput& out, const std::string& source);
std::string eval_csv_header();
std::string eval_csv_row(const EvalOutput& out, const std::string& source);

struct SweepRequest {
  std::vector<PruneMethod> methods;
  std::vector<double> ratios;
  std::vector<std::uint64_t> seeds;
  bool once_for_all = false;
  std::filesystem::path out_dir;
};

struct SweepRow {
  std::string method;
  double ratio = 0.0;
  std::uint64_t seed = 0;
  double perplexity = 0.0;
  double acc = 0.0;
  double acc_norm = 0.0;
  double pruned_fraction = 0.0;
  double seconds = 0.0;
};

std::vector<SweepRow> cmd_sweep(const Workspace& ws, const TransformerWeights& dense, const ModelConfig& config,
                                const SweepRequest& request);
std::string sweep_csv(const std::vector<SweepRow>& rows);
std::string sparsity_csv(const std::vector<LayerSparsity>& profile);

// RFC-4180 style: fields containing a comma, quote, CR or LF are quoted,
// embedded quotes doubled, rows end with CRLF.
std::string csv_field(std::string_view field);
std::string csv_line(const std::vector<std::string>& fields);
std::vector<std::vector<std::string>> parse_csv(std::string_view text);

// Shortest decimal form that parses back to the same double.
std::string format_double(double v);

}  // namespace gisp
