// gisp: command-line front end. Exit codes: 0 success, 1 numeric or
// constraint failure, 2 usage or configuration error.

#include <CLI11.hpp>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <nlohmann/json.hpp>

#include "gisp/checkpoint.hpp"
#include "gisp/commands.hpp"
#include "gisp/error.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace gisp;

namespace {

struct ConfigArgs {
  std::string path;

  json document() const {
    if (path.empty()) return json::object();
    const auto bytes = read_file_bytes(path);
    try {
      return json::parse(bytes.begin(), bytes.end());
    } catch (const json::exception& e) {
      throw UsageError("config " + path + " is not valid JSON: " + e.what());
    }
  }
  RunConfig load() const {
    auto c = config_from_json(document());
    c.validate();
    return c;
  }
};

// Accepts ratios either as fractions (0.2) or percentages (20).
std::vector<double> parse_ratios(const std::string& text) {
  std::vector<double> out;
  if (text.empty()) return out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto end = text.find(',', pos);
    if (end == std::string::npos) end = text.size();
    const auto item = text.substr(pos, end - pos);
    double v = 0.0;
    try {
      std::size_t used = 0;
      v = std::stod(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError("bad ratio '" + item + "'");
    }
    out.push_back(v > 1.0 ? v / 100.0 : v);
    pos = end + 1;
  }
  return out;
}

ReconstructTarget target_from(const std::optional<int>& iteration, const std::string& ratio) {
  ReconstructTarget t;
  t.iteration = iteration;
  if (!ratio.empty()) t.ratio = parse_ratios(ratio).at(0);
  return t;
}

void log(const std::string& msg) { std::cerr << "gisp: " << msg << "\n"; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Global iterative structured pruning lab"};
  app.require_subcommand(1);
  ConfigArgs cfg;

  auto* defaults = app.add_subcommand("defaults", "Print the default configuration as JSON");

  auto* make_data = app.add_subcommand("make-data", "Generate the synthetic corpus and QA files");
  std::string data_dir = "data";
  std::size_t data_bytes = 1000000;
  std::size_t qa_count = 600;
  std::uint64_t data_seed = 0;
  make_data->add_option("--out-dir", data_dir, "Output directory")->capture_default_str();
  make_data->add_option("--bytes", data_bytes, "Corpus size in bytes")->capture_default_str();
  make_data->add_option("--qa-items", qa_count, "Items per QA file")->capture_default_str();
  make_data->add_option("--seed", data_seed, "Generator seed")->capture_default_str();

  auto* train = app.add_subcommand("train", "Train the dense model");
  std::string train_out;
  train->add_option("--config", cfg.path, "RunConfig JSON");
  train->add_option("--out", train_out, "Checkpoint path")->required();

  auto* prune = app.add_subcommand("prune", "Prune a dense checkpoint");
  std::string prune_ckpt, prune_method = "gisp", prune_out, prune_milestones, prune_ratio;
  std::uint64_t prune_seed = 0;
  prune->add_option("--config", cfg.path, "RunConfig JSON");
  prune->add_option("--checkpoint", prune_ckpt, "Dense checkpoint")->required();
  prune->add_option("--method", prune_method, "gisp, oneshot, wanda_sp or magnitude")->capture_default_str();
  prune->add_option("--ratio", prune_ratio, "Target ratio (overrides the config)");
  prune->add_option("--seed", prune_seed, "Calibration seed")->capture_default_str();
  prune->add_option("--milestones", prune_milestones, "Comma-separated ratios to export, e.g. 20,30,40,50");
  prune->add_option("--out-dir", prune_out, "Output directory (default: config output_dir)");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint, or a trace prefix of a dense checkpoint");
  std::string eval_ckpt, eval_trace, eval_ratio, eval_out, eval_csv;
  std::optional<int> eval_iteration;
  eval->add_option("--config", cfg.path, "RunConfig JSON");
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint (dense when --trace is given)")->required();
  eval->add_option("--trace", eval_trace, "Trace to reconstruct from");
  eval->add_option("--iteration", eval_iteration, "Trace iteration");
  eval->add_option("--ratio", eval_ratio, "Trace cumulative ratio");
  eval->add_option("--out", eval_out, "Report JSON path (default: stdout)");
  eval->add_option("--csv", eval_csv, "CSV path for the header and one row");

  auto* sweep = app.add_subcommand("sweep", "Evaluate a grid of methods, ratios and seeds");
  std::string sweep_ckpt, sweep_methods = "gisp,oneshot,wanda_sp,magnitude", sweep_ratios = "0.2,0.3,0.4,0.5",
                          sweep_seeds, sweep_out;
  bool once_for_all = false;
  sweep->add_option("--config", cfg.path, "RunConfig JSON");
  sweep->add_option("--checkpoint", sweep_ckpt, "Dense checkpoint")->required();
  sweep->add_option("--methods", sweep_methods, "Comma-separated methods")->capture_default_str();
  sweep->add_option("--ratios", sweep_ratios, "Comma-separated ratios (may be empty)")->capture_default_str();
  sweep->add_option("--seeds", sweep_seeds, "Comma-separated seeds (default: config seeds)");
  sweep->add_flag("--once-for-all", once_for_all, "Serve all gisp ratios from one trace per seed");
  sweep->add_option("--out-dir", sweep_out, "Output directory (default: config output_dir)");

  auto* trace = app.add_subcommand("trace", "Inspect a pruning trace");
  trace->require_subcommand(1);
  std::string tr_path, tr_ckpt, tr_ratio, tr_out;
  std::optional<int> tr_iteration;
  auto* tr_check = trace->add_subcommand("check", "Verify nestedness");
  tr_check->add_option("--trace", tr_path)->required();
  auto* tr_profile = trace->add_subcommand("profile", "Per-layer kept fractions as CSV");
  auto* tr_recon = trace->add_subcommand("reconstruct", "Export the compacted model at a trace point");
  for (auto* sub : {tr_profile, tr_recon}) {
    sub->add_option("--trace", tr_path)->required();
    sub->add_option("--checkpoint", tr_ckpt, "Dense checkpoint the trace was made from")->required();
    sub->add_option("--iteration", tr_iteration, "Trace iteration (default: last)");
    sub->add_option("--ratio", tr_ratio, "Trace cumulative ratio");
  }
  tr_profile->add_option("--out", tr_out, "CSV path (default: stdout)");
  tr_recon->add_option("--out", tr_out, "Checkpoint path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (defaults->parsed()) {
      std::cout << config_to_json(RunConfig{}).dump(2) << "\n";
      return 0;
    }

    if (make_data->parsed()) {
      make_data_files(data_dir, data_bytes, qa_count, data_seed);
      log("wrote " + data_dir + "/{corpus.txt,qa_facts.jsonl,qa_words.jsonl}");
      return 0;
    }

    if (train->parsed()) {
      const auto ws = open_workspace(cfg.load());
      auto res = cmd_train(ws, cfg.document(), train_out);
      log("trained " + std::to_string(ws.config.train.steps) + " steps in " + format_double(res.seconds) +
          " s, final loss " + format_double(res.log.losses.empty() ? 0.0 : res.log.losses.back()) +
          ", fingerprint " + res.fingerprint);
      return 0;
    }

    if (prune->parsed()) {
      const auto ws = open_workspace(cfg.load());
      const auto ck = load_checkpoint(prune_ckpt);
      PruneRequest req;
      req.method = parse_method(prune_method);
      req.seed = prune_seed;
      if (!prune_ratio.empty()) req.ratio = parse_ratios(prune_ratio).at(0);
      req.milestones = parse_ratios(prune_milestones);
      if (prune_out.empty()) prune_out = ws.config.output_dir;
      req.out_dir = prune_out;
      const auto res = cmd_prune(ws, ck.weights, ck.config, req);
      log(std::string(method_name(req.method)) + ": pruned fraction " + format_double(res.pruned_fraction) +
          ", wrote " + std::to_string(res.written.size()) + " files to " + prune_out);
      return 0;
    }

    if (eval->parsed()) {
      const auto ws = open_workspace(cfg.load());
      const auto ck = load_checkpoint(eval_ckpt);
      EvalOutput out;
      std::string source = eval_ckpt;
      if (!eval_trace.empty()) {
        const auto tr = load_trace(eval_trace);
        const auto target = target_from(eval_iteration, eval_ratio);
        const auto rec = reconstruct(tr, ck.weights, ck.config, target);
        out = cmd_eval(ws, rec.compacted.weights, rec.compacted.config);
        out.report.masks_fingerprint = masks_fingerprint(rec.masks);
        source = eval_trace + "@" + std::to_string(rec.iteration);
      } else {
        if (eval_iteration || !eval_ratio.empty()) throw UsageError("--iteration/--ratio need --trace");
        out = cmd_eval(ws, ck.weights, ck.config);
      }
      const auto doc = eval_to_json(out, source).dump(2) + "\n";
      if (eval_out.empty()) {
        std::cout << doc;
      } else {
        write_file_atomic(eval_out, doc);
      }
      if (!eval_csv.empty()) write_file_atomic(eval_csv, eval_csv_header() + eval_csv_row(out, source));
      return 0;
    }

    if (sweep->parsed()) {
      const auto ws = open_workspace(cfg.load());
      const auto ck = load_checkpoint(sweep_ckpt);
      SweepRequest req;
      std::size_t pos = 0;
      while (pos < sweep_methods.size()) {
        auto end = sweep_methods.find(',', pos);
        if (end == std::string::npos) end = sweep_methods.size();
        req.methods.push_back(parse_method(sweep_methods.substr(pos, end - pos)));
        pos = end + 1;
      }
      req.ratios = parse_ratios(sweep_ratios);
      if (sweep_seeds.empty()) {
        req.seeds = ws.config.seeds;
      } else {
        for (double s : parse_ratios(sweep_seeds)) req.seeds.push_back(static_cast<std::uint64_t>(s));
      }
      req.once_for_all = once_for_all;
      if (sweep_out.empty()) sweep_out = ws.config.output_dir;
      req.out_dir = sweep_out;
      const auto rows = cmd_sweep(ws, ck.weights, ck.config, req);
      log("sweep: " + std::to_string(rows.size()) + " rows written to " + sweep_out + "/sweep.csv");
      return 0;
    }

    if (tr_check->parsed()) {
      const auto res = nested_check(load_trace(tr_path));
      if (res.nested) {
        std::cout << "nested: true\n";
        return 0;
      }
      std::cout << "nested: false (" << res.violation << ")\n";
      return 1;
    }

    if (tr_profile->parsed() || tr_recon->parsed()) {
      const auto tr = load_trace(tr_path);
      const auto ck = load_checkpoint(tr_ckpt);
      const auto target = target_from(tr_iteration, tr_ratio);
      const auto rec = reconstruct(tr, ck.weights, ck.config, target);
      if (tr_profile->parsed()) {
        const auto csv = sparsity_csv(sparsity_profile(rec.masks, ck.config));
        if (tr_out.empty()) {
          std::cout << csv;
        } else {
          write_file_atomic(tr_out, csv);
        }
      } else {
        save_checkpoint(tr_out, rec.compacted.weights, rec.compacted.config);
        log("reconstructed iteration " + std::to_string(rec.iteration) + " to " + tr_out);
      }
      return 0;
    }
  } catch (const UsageError& e) {
    log("error: " + std::string(e.what()));
    return 2;
  } catch (const NumericError& e) {
    log("numeric error: " + std::string(e.what()));
    return 1;
  } catch (const ConstraintError& e) {
    log("constraint error: " + std::string(e.what()));
    return 1;
  } catch (const fs::filesystem_error& e) {
    log("error: " + std::string(e.what()));
    return 2;
  } catch (const std::exception& e) {
    log("error: " + std::string(e.what()));
    return 1;
  }
  return 0;
}
