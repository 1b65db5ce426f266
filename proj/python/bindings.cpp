// Python bindings. Structured values cross the boundary as JSON text; the
// gisp package wraps them into dicts.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <nlohmann/json.hpp>

#include "gisp/checkpoint.hpp"
#include "gisp/commands.hpp"
#include "gisp/error.hpp"

namespace py = pybind11;
using json = nlohmann::json;
using namespace gisp;

namespace {

json parse_doc(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw UsageError(std::string("config is not valid JSON: ") + e.what());
  }
}

Workspace workspace(const std::string& config_json) {
  auto c = config_from_json(parse_doc(config_json));
  c.validate();
  return open_workspace(c);
}

std::string effective_config(const std::string& config_json) {
  auto c = config_from_json(parse_doc(config_json));
  c.validate();
  return config_to_json(c).dump();
}

std::string train(const std::string& config_json, const std::string& out) {
  const auto ws = workspace(config_json);
  py::gil_scoped_release release;
  const auto res = cmd_train(ws, parse_doc(config_json), out);
  return json{{"fingerprint", res.fingerprint},
              {"final_loss", res.log.losses.empty() ? 0.0 : res.log.losses.back()},
              {"losses", res.log.losses},
              {"seconds", res.seconds}}
      .dump();
}

std::string prune(const std::string& config_json, const std::string& checkpoint, const std::string& method,
                  std::optional<double> ratio, std::uint64_t seed, const std::vector<double>& milestones,
                  const std::string& out_dir) {
  const auto ws = workspace(config_json);
  const auto ck = load_checkpoint(checkpoint);
  PruneRequest req{parse_method(method), seed, ratio, milestones, out_dir};
  PruneResult res;
  {
    py::gil_scoped_release release;
    res = cmd_prune(ws, ck.weights, ck.config, req);
  }
  json written = json::array();
  for (const auto& p : res.written) written.push_back(p.string());
  return json{{"pruned_fraction", res.pruned_fraction},
              {"masks", masks_to_json(res.masks)},
              {"trace", res.trace ? json(serialize_trace(*res.trace)) : json(nullptr)},
              {"params", res.compacted.weights.param_count()},
              {"timing", res.timing},
              {"written", written}}
      .dump();
}

std::string evaluate(const std::string& config_json, const std::string& checkpoint, const std::string& trace,
                     std::optional<int> iteration, std::optional<double> ratio) {
  const auto ws = workspace(config_json);
  const auto ck = load_checkpoint(checkpoint);
  py::gil_scoped_release release;
  if (trace.empty()) {
    if (iteration || ratio) throw UsageError("iteration/ratio need a trace");
    return eval_to_json(cmd_eval(ws, ck.weights, ck.config), checkpoint).dump();
  }
  const auto rec = reconstruct(load_trace(trace), ck.weights, ck.config, {iteration, ratio});
  auto out = cmd_eval(ws, rec.compacted.weights, rec.compacted.config);
  out.report.masks_fingerprint = masks_fingerprint(rec.masks);
  return eval_to_json(out, trace + "@" + std::to_string(rec.iteration)).dump();
}

std::string sweep(const std::string& config_json, const std::string& checkpoint, const std::vector<std::string>& methods,
                  const std::vector<double>& ratios, const std::vector<std::uint64_t>& seeds, bool once_for_all,
                  const std::string& out_dir) {
  const auto ws = workspace(config_json);
  const auto ck = load_checkpoint(checkpoint);
  SweepRequest req;
  for (const auto& m : methods) req.methods.push_back(parse_method(m));
  req.ratios = ratios;
  req.seeds = seeds.empty() ? ws.config.seeds : seeds;
  req.once_for_all = once_for_all;
  req.out_dir = out_dir;
  std::vector<SweepRow> rows;
  {
    py::gil_scoped_release release;
    rows = cmd_sweep(ws, ck.weights, ck.config, req);
  }
  json out = json::array();
  for (const auto& r : rows) {
    out.push_back({{"method", r.method}, {"ratio", r.ratio}, {"seed", r.seed}, {"perplexity", r.perplexity},
                   {"acc", r.acc}, {"acc_norm", r.acc_norm}, {"pruned_fraction", r.pruned_fraction},
                   {"seconds", r.seconds}});
  }
  return out.dump();
}

py::tuple trace_check(const std::string& path) {
  const auto res = nested_check(load_trace(path));
  return py::make_tuple(res.nested, res.violation);
}

std::string profile(const std::string& trace, const std::string& checkpoint, std::optional<int> iteration,
                    std::optional<double> ratio) {
  const auto ck = load_checkpoint(checkpoint);
  const auto rec = reconstruct(load_trace(trace), ck.weights, ck.config, {iteration, ratio});
  json out = json::array();
  for (const auto& l : sparsity_profile(rec.masks, ck.config))
    out.push_back({{"layer", l.layer}, {"attn_kept", l.attn_kept}, {"mlp_kept", l.mlp_kept}});
  return out.dump();
}

int reconstruct_to(const std::string& trace, const std::string& checkpoint, const std::string& out,
                   std::optional<int> iteration, std::optional<double> ratio) {
  const auto ck = load_checkpoint(checkpoint);
  const auto rec = reconstruct(load_trace(trace), ck.weights, ck.config, {iteration, ratio});
  save_checkpoint(out, rec.compacted.weights, rec.compacted.config);
  return rec.iteration;
}

std::string canonical_trace(const std::string& text) { return serialize_trace(parse_trace(text)); }

std::string checkpoint_info(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  const auto ck = parse_checkpoint(bytes);
  const auto& c = ck.config;
  json heads = json::array(), ff = json::array();
  for (int l = 0; l < c.n_layers; ++l) {
    heads.push_back(c.heads_in(l));
    ff.push_back(c.ff_in(l));
  }
  return json{{"fingerprint", fingerprint_hex(fnv1a64(bytes))},
              {"n_layers", c.n_layers},
              {"d_model", c.d_model},
              {"d_head", c.d_head},
              {"heads", heads},
              {"channels", ff},
              {"params", ck.weights.param_count()}}
      .dump();
}

}  // namespace

PYBIND11_MODULE(_gisp, m) {
  m.doc() = "Global iterative structured pruning lab (native core)";
  m.attr("version") = kToolVersion;

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<UsageError>(m, "UsageError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());
  py::register_exception<ConstraintError>(m, "ConstraintError", base.ptr());

  m.def("default_config", [] { return config_to_json(RunConfig{}).dump(); });
  m.def("effective_config", &effective_config, py::arg("config_json"));
  m.def("make_data", &make_data_files, py::arg("out_dir"), py::arg("corpus_bytes") = 1000000,
        py::arg("qa_items") = 600, py::arg("seed") = 0);
  m.def("train", &train, py::arg("config_json"), py::arg("out"));
  m.def("prune", &prune, py::arg("config_json"), py::arg("checkpoint"), py::arg("method") = "gisp",
        py::arg("ratio") = py::none(), py::arg("seed") = 0, py::arg("milestones") = std::vector<double>{},
        py::arg("out_dir") = "");
  m.def("evaluate", &evaluate, py::arg("config_json"), py::arg("checkpoint"), py::arg("trace") = "",
        py::arg("iteration") = py::none(), py::arg("ratio") = py::none());
  m.def("sweep", &sweep, py::arg("config_json"), py::arg("checkpoint"), py::arg("methods"), py::arg("ratios"),
        py::arg("seeds") = std::vector<std::uint64_t>{}, py::arg("once_for_all") = false, py::arg("out_dir") = "");
  m.def("trace_check", &trace_check, py::arg("path"));
  m.def("sparsity_profile", &profile, py::arg("trace"), py::arg("checkpoint"), py::arg("iteration") = py::none(),
        py::arg("ratio") = py::none());
  m.def("reconstruct", &reconstruct_to, py::arg("trace"), py::arg("checkpoint"), py::arg("out"),
        py::arg("iteration") = py::none(), py::arg("ratio") = py::none());
  m.def("canonical_trace", &canonical_trace, py::arg("text"));
  m.def("checkpoint_info", &checkpoint_info, py::arg("path"));
}
