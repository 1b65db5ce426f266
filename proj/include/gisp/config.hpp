#pragma once

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "gisp/data.hpp"
#include "gisp/engine.hpp"
#include "gisp/importance.hpp"
#include "gisp/model.hpp"

namespace gisp {

enum class CalibrationSource { Corpus, QaText, QaMargin };

std::string_view calibration_source_name(CalibrationSource source);

struct CalibrationSpec {
  CalibrationSource source = CalibrationSource::Corpus;
  std::size_t samples = 256;  // corpus windows, or QA items for qa sources
  std::size_t seq_len = 128;
  bool resample = false;  // draw a fresh set every iteration
  std::size_t micro_batch = 8;
};

struct EvalSpec {
  std::size_t sequences = 64;  // held-out windows
  std::size_t seq_len = 128;
  std::size_t qa_items = 200;  // last items of the QA file, never used for calibration
};

// One experiment. Every field has a default; `gisp defaults` prints them.
struct RunConfig {
  ModelConfig model;
  std::string corpus = "data/corpus.txt";
  double heldout_fraction = 0.1;
  std::string qa_file = "data/qa_facts.jsonl";
  TrainOptions train;
  CalibrationSpec calibration;
  ScheduleSpec schedule{0.5, 32, BudgetMode::ParameterFraction};
  std::optional<std::vector<int>> protected_layers;  // unset: default rule
  std::vector<std::uint64_t> seeds{0};  // calibration sampling seeds
  EvalSpec eval;
  std::string output_dir = "runs/default";

  std::set<int> protected_set() const;
  // Cross-field consistency; throws UsageError before any compute.
  void validate() const;
};

nlohmann::json config_to_json(const RunConfig& config);
// Unknown keys are rejected; missing keys keep their defaults.
RunConfig config_from_json(const nlohmann::json& doc);
RunConfig load_config(const std::filesystem::path& path);

}  // namespace gisp
