#include "gisp/config.hpp"

#include <fstream>

#include "gisp/checkpoint.hpp"
#include "gisp/error.hpp"

namespace gisp {

namespace {

using json = nlohmann::json;

void reject_unknown(const json& obj, std::initializer_list<std::string_view> keys, const std::string& where) {
  if (!obj.is_object()) throw UsageError(where + " must be a JSON object");
  for (const auto& [k, v] : obj.items()) {
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) throw UsageError("unknown key " + where + "." + k);
  }
}

template <typename T>
void read(const json& obj, const char* key, T& out, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw UsageError("bad value for " + where + "." + key + ": " + obj.at(key).dump());
  }
}

CalibrationSource parse_source(const std::string& s) {
  if (s == "corpus") return CalibrationSource::Corpus;
  if (s == "qa_text") return CalibrationSource::QaText;
  if (s == "qa_margin") return CalibrationSource::QaMargin;
  throw UsageError("unknown calibration source " + s + " (expected corpus, qa_text or qa_margin)");
}

}  // namespace

std::string_view calibration_source_name(CalibrationSource source) {
  switch (source) {
    case CalibrationSource::Corpus: return "corpus";
    case CalibrationSource::QaText: return "qa_text";
    case CalibrationSource::QaMargin: return "qa_margin";
  }
  return "corpus";
}

std::set<int> RunConfig::protected_set() const {
  if (!protected_layers) return default_protected_layers(model.n_layers);
  return {protected_layers->begin(), protected_layers->end()};
}

void RunConfig::validate() const {
  model.validate();
  schedule.validate();
  if (heldout_fraction <= 0.0 || heldout_fraction >= 1.0) throw UsageError("heldout_fraction must lie in (0, 1)");
  if (corpus.empty()) throw UsageError("corpus path is empty");
  if (calibration.source != CalibrationSource::Corpus && qa_file.empty()) {
    throw UsageError("calibration source " + std::string(calibration_source_name(calibration.source)) +
                     " requires qa_file");
  }
  if (calibration.samples == 0) throw UsageError("calibration.samples must be >= 1");
  if (calibration.seq_len < 2 || calibration.seq_len > static_cast<std::size_t>(model.max_seq_len)) {
    throw UsageError("calibration.seq_len must lie in [2, model.max_seq_len]");
  }
  if (eval.seq_len < 2 || eval.seq_len > static_cast<std::size_t>(model.max_seq_len)) {
    throw UsageError("eval.seq_len must lie in [2, model.max_seq_len]");
  }
  if (train.steps < 0 || train.batch < 1 || train.learning_rate <= 0.0) throw UsageError("bad training options");
  if (train.seq_len < 0 || train.seq_len > model.max_seq_len) throw UsageError("train.seq_len exceeds max_seq_len");
  if (seeds.empty()) throw UsageError("seeds must not be empty");
  for (int l : protected_set()) {
    if (l < 0 || l >= model.n_layers) throw UsageError("protected layer " + std::to_string(l) + " out of range");
  }
}

json config_to_json(const RunConfig& c) {
  const auto& m = c.model;
  json j;
  j["model"] = {{"n_layers", m.n_layers}, {"n_heads", m.n_heads},         {"d_model", m.d_model},
                {"d_head", m.d_head},     {"d_ff", m.d_ff},               {"vocab_size", m.vocab_size},
                {"max_seq_len", m.max_seq_len}, {"rng_seed", m.rng_seed}};
  j["corpus"] = c.corpus;
  j["heldout_fraction"] = c.heldout_fraction;
  j["qa_file"] = c.qa_file;
  const auto& t = c.train;
  j["train"] = {{"steps", t.steps}, {"learning_rate", t.learning_rate}, {"batch", t.batch},
                {"seq_len", t.seq_len}, {"seed", t.seed}, {"warmup", t.warmup}, {"clip_norm", t.clip_norm},
                {"log_every", t.log_every}};
  const auto& cal = c.calibration;
  j["calibration"] = {{"source", calibration_source_name(cal.source)}, {"samples", cal.samples},
                      {"seq_len", cal.seq_len}, {"resample", cal.resample},
                      {"micro_batch", cal.micro_batch}};
  j["schedule"] = {{"target_ratio", c.schedule.target_ratio},
                   {"n_iterations", c.schedule.n_iterations},
                   {"budget_mode", budget_mode_name(c.schedule.budget_mode)}};
  j["protected_layers"] = c.protected_layers ? json(*c.protected_layers) : json("default");
  j["seeds"] = c.seeds;
  j["eval"] = {{"sequences", c.eval.sequences}, {"seq_len", c.eval.seq_len}, {"qa_items", c.eval.qa_items}};
  j["output_dir"] = c.output_dir;
  return j;
}

RunConfig config_from_json(const json& doc) {
  RunConfig c;
  reject_unknown(doc,
                 {"model", "corpus", "heldout_fraction", "qa_file", "train", "calibration", "schedule",
                  "protected_layers", "seeds", "eval", "output_dir"},
                 "config");
  if (doc.contains("model")) {
    const auto& m = doc["model"];
    reject_unknown(m, {"n_layers", "n_heads", "d_model", "d_head", "d_ff", "vocab_size", "max_seq_len", "rng_seed"},
                   "model");
    read(m, "n_layers", c.model.n_layers, "model");
    read(m, "n_heads", c.model.n_heads, "model");
    read(m, "d_model", c.model.d_model, "model");
    read(m, "d_head", c.model.d_head, "model");
    read(m, "d_ff", c.model.d_ff, "model");
    read(m, "vocab_size", c.model.vocab_size, "model");
    read(m, "max_seq_len", c.model.max_seq_len, "model");
    read(m, "rng_seed", c.model.rng_seed, "model");
  }
  read(doc, "corpus", c.corpus, "config");
  read(doc, "heldout_fraction", c.heldout_fraction, "config");
  read(doc, "qa_file", c.qa_file, "config");
  if (doc.contains("train")) {
    const auto& t = doc["train"];
    reject_unknown(t, {"steps", "learning_rate", "batch", "seq_len", "seed", "warmup", "clip_norm", "log_every"},
                   "train");
    read(t, "steps", c.train.steps, "train");
    read(t, "learning_rate", c.train.learning_rate, "train");
    read(t, "batch", c.train.batch, "train");
    read(t, "seq_len", c.train.seq_len, "train");
    read(t, "seed", c.train.seed, "train");
    read(t, "warmup", c.train.warmup, "train");
    read(t, "clip_norm", c.train.clip_norm, "train");
    read(t, "log_every", c.train.log_every, "train");
  }
  if (doc.contains("calibration")) {
    const auto& k = doc["calibration"];
    reject_unknown(k, {"source", "samples", "seq_len", "resample", "micro_batch"}, "calibration");
    std::string source(calibration_source_name(c.calibration.source));
    read(k, "source", source, "calibration");
    c.calibration.source = parse_source(source);
    read(k, "samples", c.calibration.samples, "calibration");
    read(k, "seq_len", c.calibration.seq_len, "calibration");
    read(k, "resample", c.calibration.resample, "calibration");
    read(k, "micro_batch", c.calibration.micro_batch, "calibration");
  }
  if (doc.contains("schedule")) {
    const auto& s = doc["schedule"];
    reject_unknown(s, {"target_ratio", "n_iterations", "budget_mode"}, "schedule");
    read(s, "target_ratio", c.schedule.target_ratio, "schedule");
    read(s, "n_iterations", c.schedule.n_iterations, "schedule");
    std::string mode(budget_mode_name(c.schedule.budget_mode));
    read(s, "budget_mode", mode, "schedule");
    c.schedule.budget_mode = parse_budget_mode(mode);
  }
  if (doc.contains("protected_layers")) {
    const auto& p = doc["protected_layers"];
    if (p.is_string() && p.get<std::string>() == "default") {
      c.protected_layers.reset();
    } else {
      std::vector<int> layers;
      read(doc, "protected_layers", layers, "config");
      c.protected_layers = layers;
    }
  }
  read(doc, "seeds", c.seeds, "config");
  if (doc.contains("eval")) {
    const auto& e = doc["eval"];
    reject_unknown(e, {"sequences", "seq_len", "qa_items"}, "eval");
    read(e, "sequences", c.eval.sequences, "eval");
    read(e, "seq_len", c.eval.seq_len, "eval");
    read(e, "qa_items", c.eval.qa_items, "eval");
  }
  read(doc, "output_dir", c.output_dir, "config");
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  json doc;
  try {
    doc = json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw UsageError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return config_from_json(doc);
}

}  // namespace gisp
