#include "gisp/commands.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <random>

#include "gisp/baselines.hpp"
#include "gisp/checkpoint.hpp"
#include "gisp/error.hpp"

namespace gisp {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::string percent_label(double ratio) {
  const double pct = ratio * 100.0;
  if (std::abs(pct - std::round(pct)) < 1e-9) return std::to_string(static_cast<long long>(std::lround(pct)));
  return format_double(pct);
}

void write_json(const fs::path& path, const json& doc) { write_file_atomic(path, doc.dump(2) + "\n"); }

}  // namespace

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

// ---- workspace -------------------------------------------------------------

std::vector<std::vector<int>> heldout_windows(std::span<const int> tokens, std::size_t count, std::size_t seq_len) {
  std::vector<std::vector<int>> out;
  for (std::size_t o = 0; out.size() < count && o + seq_len <= tokens.size(); o += seq_len) {
    out.emplace_back(tokens.begin() + static_cast<std::ptrdiff_t>(o),
                     tokens.begin() + static_cast<std::ptrdiff_t>(o + seq_len));
  }
  return out;
}

Workspace open_workspace(const RunConfig& config) {
  config.validate();
  Workspace ws;
  ws.config = config;
  const auto corpus = load_corpus(config.corpus);
  ws.split = split_corpus(corpus, config.heldout_fraction);
  ws.eval_sequences = heldout_windows(ws.split.heldout, config.eval.sequences, config.eval.seq_len);
  if (ws.eval_sequences.empty()) throw UsageError("held-out split is shorter than one evaluation window");
  if (!config.qa_file.empty()) {
    auto items = load_qa(config.qa_file);
    const std::size_t tail = std::min(config.eval.qa_items, items.size());
    ws.qa_eval.assign(items.end() - static_cast<std::ptrdiff_t>(tail), items.end());
    items.resize(items.size() - tail);
    ws.qa_pool = std::move(items);
  }
  return ws;
}

CalibrationSet draw_calibration(const Workspace& ws, std::uint64_t seed) {
  const auto& cal = ws.config.calibration;
  if (cal.source == CalibrationSource::Corpus) {
    return sample_calibration(ws.split.train, cal.samples, cal.seq_len, seed);
  }
  if (ws.qa_pool.empty()) throw UsageError("QA calibration pool is empty (all items are reserved for evaluation)");
  std::vector<std::size_t> idx(ws.qa_pool.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min(cal.samples, idx.size()));
  std::vector<QAItem> items;
  for (auto i : idx) items.push_back(ws.qa_pool[i]);
  if (cal.source == CalibrationSource::QaText) return qa_text_calibration(items);
  CalibrationSet set;
  set.kind = CalibrationKind::Margin;
  set.items = std::move(items);
  return set;
}

Objective make_objective(const Workspace& ws, std::uint64_t seed) {
  Objective obj;
  obj.kind = ws.config.calibration.source == CalibrationSource::QaMargin ? ObjectiveKind::Margin
                                                                         : ObjectiveKind::Perplexity;
  obj.calibration = draw_calibration(ws, seed);
  obj.micro_batch = ws.config.calibration.micro_batch;
  return obj;
}

std::function<CalibrationSet(int, std::uint64_t)> make_resampler(const Workspace& ws) {
  if (!ws.config.calibration.resample) return {};
  return [&ws](int k, std::uint64_t seed) { return draw_calibration(ws, mix_seed(seed, static_cast<std::uint64_t>(k))); };
}

// ---- train -----------------------------------------------------------------

void make_data_files(const fs::path& dir, std::size_t corpus_bytes, std::size_t qa_items, std::uint64_t seed) {
  fs::create_directories(dir);
  WorldSpec world;
  const auto text = make_synthetic_corpus(world, corpus_bytes, seed);
  write_file_atomic(dir / "corpus.txt", text);
  QASpec facts;
  facts.world = world;
  write_file_atomic(dir / "qa_facts.jsonl", qa_to_jsonl(make_synthetic_qa(facts, qa_items, seed + 1)));
  QASpec words = facts;
  words.kind = QASpec::Kind::WordCloze;
  write_file_atomic(dir / "qa_words.jsonl", qa_to_jsonl(make_synthetic_qa(words, qa_items, seed + 2, tokenize(text))));
}

TrainResult cmd_train(const Workspace& ws, const json& config_doc, const fs::path& out) {
  TrainResult res;
  const auto t0 = Clock::now();
  res.weights = train_dense(ws.config.model, ws.split.train, ws.config.train, &res.log);
  res.seconds = seconds_since(t0);
  const auto bytes = serialize_checkpoint(res.weights, ws.config.model);
  res.fingerprint = fingerprint_hex(fnv1a64(bytes));
  if (!out.empty()) {
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    write_file_atomic(out, bytes);
    json manifest = {{"config", config_doc},
                     {"effective_config", config_to_json(ws.config)},
                     {"fingerprint", res.fingerprint},
                     {"parameters", total_param_count(ws.config.model)},
                     {"final_loss", res.log.losses.empty() ? 0.0 : res.log.losses.back()},
                     {"tool_version", kToolVersion}};
    write_json(out.string() + ".manifest.json", manifest);
  }
  return res;
}

// ---- prune -----------------------------------------------------------------

std::string_view method_name(PruneMethod method) {
  switch (method) {
    case PruneMethod::Gisp: return "gisp";
    case PruneMethod::OneShot: return "oneshot";
    case PruneMethod::WandaSp: return "wanda_sp";
    case PruneMethod::Magnitude: return "magnitude";
  }
  return "gisp";
}

PruneMethod parse_method(std::string_view text) {
  if (text == "gisp") return PruneMethod::Gisp;
  if (text == "oneshot") return PruneMethod::OneShot;
  if (text == "wanda_sp") return PruneMethod::WandaSp;
  if (text == "magnitude") return PruneMethod::Magnitude;
  throw UsageError("unknown method " + std::string(text) + " (expected gisp, oneshot, wanda_sp or magnitude)");
}

json masks_to_json(const MaskState& masks) {
  json removed = json::array();
  for (const auto& id : masks.removed()) {
    removed.push_back({{"layer", id.layer}, {"kind", kind_name(id.kind)}, {"unit", id.unit}});
  }
  return {{"removed", std::move(removed)}};
}

MaskState masks_from_json(const json& doc, const ModelConfig& config) {
  MaskState masks(config);
  try {
    for (const auto& e : doc.at("removed")) {
      masks.remove({e.at("layer").get<int>(), parse_kind(e.at("kind").get<std::string>()), e.at("unit").get<int>()});
    }
  } catch (const json::exception& e) {
    throw UsageError(std::string("bad masks document: ") + e.what());
  }
  return masks;
}

PruneResult cmd_prune(const Workspace& ws, const TransformerWeights& dense, const ModelConfig& config,
                      const PruneRequest& request) {
  const auto& cfg = ws.config;
  const auto protected_layers = cfg.protected_set();
  ScheduleSpec schedule = cfg.schedule;
  if (request.ratio) schedule.target_ratio = *request.ratio;
  if (request.method == PruneMethod::OneShot) schedule.n_iterations = 1;
  schedule.validate();

  const bool traced = request.method == PruneMethod::Gisp || request.method == PruneMethod::OneShot;
  if (!traced && !request.milestones.empty()) {
    throw UsageError(std::string(method_name(request.method)) +
                     " produces no trace; milestones need gisp or oneshot (run once per ratio instead)");
  }
  for (double m : request.milestones) {
    if (!(m > 0.0 && m <= schedule.target_ratio + 1e-12)) {
      throw UsageError("milestone " + format_double(m) + " outside (0, target ratio]");
    }
  }
  if (!request.out_dir.empty()) fs::create_directories(request.out_dir);

  PruneResult res;
  const auto t_all = Clock::now();
  if (traced) {
    RunOptions opts;
    opts.resample = make_resampler(ws);
    std::vector<double> pending = request.milestones;
    std::sort(pending.begin(), pending.end());
    if (!request.out_dir.empty() && !pending.empty()) {
      opts.on_iteration = [&](const TraceRecord& rec, const MaskState& masks) {
        while (!pending.empty() && rec.cum_fraction + 1e-9 >= pending.front()) {
          const auto path = request.out_dir / ("milestone_" + percent_label(pending.front()) + ".ckpt");
          const auto c = compact(dense, config, masks);
          save_checkpoint(path, c.weights, c.config);
          res.written.push_back(path);
          pending.erase(pending.begin());
        }
      };
    }
    auto run = gisp_run(dense, config, make_objective(ws, request.seed), schedule, protected_layers, request.seed,
                        opts);
    res.masks = std::move(run.masks);
    res.trace = std::move(run.trace);
    res.compacted = std::move(run.compacted);
    res.timing = {{"importance", run.timing.importance}, {"ranking", run.timing.ranking},
                  {"masking", run.timing.masking}};
  } else if (request.method == PruneMethod::WandaSp) {
    const auto t0 = Clock::now();
    const auto cal = sample_calibration(ws.split.train, cfg.calibration.samples, cfg.calibration.seq_len, request.seed);
    const auto stats = collect_activation_stats(dense, config, cal, cfg.calibration.micro_batch);
    res.timing["importance"] = seconds_since(t0);
    const auto t1 = Clock::now();
    res.masks = wanda_sp(dense, config, stats, schedule.target_ratio, protected_layers);
    res.timing["ranking"] = seconds_since(t1);
    res.compacted = compact(dense, config, res.masks);
  } else {
    const auto t0 = Clock::now();
    res.masks = magnitude_global(dense, config, schedule.target_ratio, protected_layers, schedule.budget_mode);
    res.timing["ranking"] = seconds_since(t0);
    res.compacted = compact(dense, config, res.masks);
  }
  res.timing["total"] = seconds_since(t_all);
  res.pruned_fraction = removed_fraction(res.masks, config, protected_layers, BudgetMode::ParameterFraction);

  if (!request.out_dir.empty()) {
    const auto& dir = request.out_dir;
    if (res.trace) {
      save_trace(dir / "trace.jsonl", *res.trace);
      res.written.push_back(dir / "trace.jsonl");
    }
    auto masks_doc = masks_to_json(res.masks);
    masks_doc["method"] = method_name(request.method);
    masks_doc["pruned_fraction"] = res.pruned_fraction;
    write_json(dir / "masks.json", masks_doc);
    save_checkpoint(dir / "pruned.ckpt", res.compacted.weights, res.compacted.config);
    write_json(dir / "timing.json", json(res.timing));
    for (const char* f : {"masks.json", "pruned.ckpt", "timing.json"}) res.written.push_back(dir / f);
  }
  return res;
}

// ---- eval ------------------------------------------------------------------

EvalOutput cmd_eval(const Workspace& ws, const TransformerWeights& weights, const ModelConfig& config) {
  EvalOutput out;
  out.report = evaluate_model(weights, config, MaskState(config), ws.eval_sequences, ws.qa_eval);
  out.model_fingerprint = fingerprint_hex(model_fingerprint(weights, config));
  out.params = weights.param_count();
  return out;
}

json eval_to_json(const EvalOutput& out, const std::string& source) {
  const auto& r = out.report;
  return {{"source", source},
          {"model_fingerprint", out.model_fingerprint},
          {"parameters", out.params},
          {"perplexity", r.perplexity},
          {"accuracy", r.accuracy},
          {"accuracy_norm", r.accuracy_norm},
          {"qa_items", r.qa_items},
          {"decisions_acc", r.decisions_acc},
          {"decisions_acc_norm", r.decisions_acc_norm}};
}

std::string eval_csv_header() {
  return csv_line({"source", "model_fingerprint", "parameters", "perplexity", "accuracy", "accuracy_norm"});
}

std::string eval_csv_row(const EvalOutput& out, const std::string& source) {
  const auto& r = out.report;
  return csv_line({source, out.model_fingerprint, std::to_string(out.params), format_double(r.perplexity),
                   format_double(r.accuracy), format_double(r.accuracy_norm)});
}

// ---- sweep -----------------------------------------------------------------

std::vector<SweepRow> cmd_sweep(const Workspace& ws, const TransformerWeights& dense, const ModelConfig& config,
                                const SweepRequest& request) {
  std::vector<SweepRow> rows;
  const auto protected_layers = ws.config.protected_set();
  for (double r : request.ratios) {
    if (!(r >= 0.0 && r < 1.0)) throw UsageError("sweep ratio " + format_double(r) + " outside [0, 1)");
  }
  if (!request.out_dir.empty()) fs::create_directories(request.out_dir / "sparsity");

  auto record = [&](PruneMethod m, double ratio, std::uint64_t seed, const MaskState& masks, double seconds) {
    const auto c = compact(dense, config, masks);
    const auto ev = evaluate_model(c.weights, c.config, MaskState(c.config), ws.eval_sequences, ws.qa_eval);
    rows.push_back({std::string(method_name(m)), ratio, seed, ev.perplexity, ev.accuracy, ev.accuracy_norm,
                    removed_fraction(masks, config, protected_layers, BudgetMode::ParameterFraction), seconds});
    if (!request.out_dir.empty()) {
      const auto name = std::string(method_name(m)) + "_r" + percent_label(ratio) + "_s" + std::to_string(seed) + ".csv";
      write_file_atomic(request.out_dir / "sparsity" / name, sparsity_csv(sparsity_profile(masks, config)));
    }
  };

  for (auto method : request.methods) {
    for (auto seed : request.seeds) {
      const bool shared = request.once_for_all && method == PruneMethod::Gisp && !request.ratios.empty();
      if (shared) {
        // One trace at the largest ratio; every smaller ratio is a replayed prefix.
        const auto t0 = Clock::now();
        ScheduleSpec s = ws.config.schedule;
        s.target_ratio = *std::max_element(request.ratios.begin(), request.ratios.end());
        RunOptions opts;
        opts.resample = make_resampler(ws);
        const auto run = gisp_run(dense, config, make_objective(ws, seed), s, protected_layers, seed, opts);
        const double run_seconds = seconds_since(t0);
        for (double ratio : request.ratios) {
          const int k = resolve_target(run.trace, ReconstructTarget{std::nullopt, ratio});
          record(method, ratio, seed, replay(run.trace, config, k), run_seconds);
        }
        continue;
      }
      for (double ratio : request.ratios) {
        const auto t0 = Clock::now();
        PruneRequest req;
        req.method = method;
        req.seed = seed;
        req.ratio = ratio;
        const auto res = cmd_prune(ws, dense, config, req);
        record(method, ratio, seed, res.masks, seconds_since(t0));
      }
    }
  }
  if (!request.out_dir.empty()) write_file_atomic(request.out_dir / "sweep.csv", sweep_csv(rows));
  return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out =
      csv_line({"method", "ratio", "seed", "perplexity", "acc", "acc_norm", "pruned_fraction", "seconds"});
  for (const auto& r : rows) {
    out += csv_line({r.method, format_double(r.ratio), std::to_string(r.seed), format_double(r.perplexity),
                     format_double(r.acc), format_double(r.acc_norm), format_double(r.pruned_fraction),
                     format_double(r.seconds)});
  }
  return out;
}

std::string sparsity_csv(const std::vector<LayerSparsity>& profile) {
  std::string out = csv_line({"layer", "attn_kept", "mlp_kept"});
  for (const auto& p : profile) {
    out += csv_line({std::to_string(p.layer), format_double(p.attn_kept), format_double(p.mlp_kept)});
  }
  return out;
}

// ---- csv -------------------------------------------------------------------

std::string csv_field(std::string_view field) {
  if (field.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(field);
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string csv_line(const std::vector<std::string>& fields) {
  std::string out;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out += ',';
    out += csv_field(fields[i]);
  }
  return out + "\r\n";
}

std::vector<std::vector<std::string>> parse_csv(std::string_view text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false;
  bool row_open = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
      continue;
    }
    row_open = true;
    if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
    } else if (c == '\r' || c == '\n') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      row.push_back(std::move(field));
      field.clear();
      rows.push_back(std::move(row));
      row.clear();
      row_open = false;
    } else {
      field += c;
    }
  }
  if (quoted) throw UsageError("unterminated quoted CSV field");
  if (row_open) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace gisp
