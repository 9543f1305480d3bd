#pragma once
// Experiment configs, runs that persist results with a manifest, and the
// consolidated report over a results directory.

#include <climits>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "wcn/arch_io.hpp"
#include "wcn/dataset.hpp"
#include "wcn/feynman.hpp"
#include "wcn/lab.hpp"
#include "wcn/linear_oracle.hpp"
#include "wcn/training.hpp"

namespace wcn {

inline constexpr const char* artifact_version = "wcn 0.1.0";

struct ExperimentConfig {
  std::string kind;  // ntk-stats | dtheta0 | drift | lossgap | exponent | oracle
  std::string output_dir;
  std::uint64_t root_seed = 0;
  unsigned workers = 1;
  std::string precision = "double";

  std::optional<NetworkSpec> architecture;
  std::optional<DatasetRequest> dataset;
  std::vector<int> widths;
  int seeds = 0;
  FitRange fit_range{};
  /// 0 means every train example.
  int probe_count = 0;
  std::size_t max_parameters = 50'000'000;

  double fd_step = 0.01;   // dtheta0
  double lr = 0.0;         // drift, lossgap; 0 = stability_lr per seed
  long step_cap = 10000;   // drift
  long snapshot_stride = 10;
  long horizon = 0;        // lossgap
  long log_stride = 1;
  long late_factor = 30;

  std::optional<CorrelationSpec> spec;  // exponent, oracle (mc)
  std::vector<int> depths{1, 2, 3, 4};
  bool mixed = false;
  std::uint64_t diagram_cap = default_diagram_cap;

  std::string op = "all";  // oracle: pair | ntk | mc | all
  std::map<std::string, std::vector<double>> inputs;
  std::uint64_t input_seed = 0;
  int samples = 1000;
};

namespace detail {

inline const std::vector<std::string>& experiment_kinds() {
  static const std::vector<std::string> k{"ntk-stats", "dtheta0", "drift", "lossgap", "exponent", "oracle"};
  return k;
}

inline bool measured_kind(const std::string& k) {
  return k == "ntk-stats" || k == "dtheta0" || k == "drift" || k == "lossgap";
}

struct Fields {
  const nlohmann::json& j;
  std::set<std::string> allowed;

  bool has(const std::string& k) {
    allowed.insert(k);
    return j.contains(k);
  }
  const nlohmann::json& at(const std::string& k) { return j.at(k); }

  long integer(const std::string& k, long lo, long dflt) {
    if (!has(k)) return dflt;
    const auto& v = j[k];
    if (!v.is_number_integer() || v.get<long long>() < lo)
      throw SchemaError(k + ": expected an integer >= " + std::to_string(lo));
    return long(v.get<long long>());
  }
  double positive(const std::string& k, double dflt) {
    if (!has(k)) return dflt;
    const auto& v = j[k];
    if (!v.is_number() || !(v.get<double>() > 0.0)) throw SchemaError(k + ": expected a positive number");
    return v.get<double>();
  }
  std::uint64_t seed(const std::string& k) {
    if (!has(k)) return 0;
    const auto& v = j[k];
    if (v.is_number_unsigned()) return v.get<std::uint64_t>();
    if (v.is_number_integer() && v.get<long long>() >= 0) return std::uint64_t(v.get<long long>());
    throw SchemaError(k + ": expected a nonnegative integer");
  }
  void finish() {
    for (auto it = j.begin(); it != j.end(); ++it)
      if (!allowed.count(it.key())) throw SchemaError(it.key() + ": unknown field");
  }
};

inline double parse_lr(Fields& f, double dflt) {
  if (!f.has("lr")) return dflt;
  const auto& v = f.at("lr");
  if (v.is_string() && v.get<std::string>() == "stability") return 0.0;
  if (v.is_number() && v.get<double>() > 0.0) return v.get<double>();
  throw SchemaError("lr: expected \"stability\" or a positive number");
}

}  // namespace detail

inline ExperimentConfig parse_config(const nlohmann::json& j) {
  if (!j.is_object()) throw SchemaError("<root>: expected an object");
  detail::Fields f{j, {}};
  ExperimentConfig c;
  if (!f.has("kind") || !j["kind"].is_string()) throw SchemaError("kind: required string");
  c.kind = j["kind"].get<std::string>();
  const auto& kinds = detail::experiment_kinds();
  if (std::find(kinds.begin(), kinds.end(), c.kind) == kinds.end())
    throw SchemaError("kind: expected one of ntk-stats, dtheta0, drift, lossgap, exponent, oracle, got '" + c.kind +
                      "'");
  if (f.has("output_dir")) {
    if (!j["output_dir"].is_string()) throw SchemaError("output_dir: expected a string");
    c.output_dir = j["output_dir"].get<std::string>();
  } else {
    c.output_dir = "results/" + c.kind;
  }
  c.root_seed = f.seed("root_seed");
  c.workers = unsigned(f.integer("workers", 1, 1));
  if (f.has("precision")) {
    if (!j["precision"].is_string() || (j["precision"] != "double" && j["precision"] != "float"))
      throw SchemaError("precision: expected \"double\" or \"float\"");
    c.precision = j["precision"].get<std::string>();
  }

  if (detail::measured_kind(c.kind) || c.kind == "oracle") {
    if (!f.has("architecture")) throw SchemaError("architecture: required");
    c.architecture = parse_network_spec(j["architecture"], "architecture");
  }
  if (detail::measured_kind(c.kind) || (c.kind == "oracle" && j.contains("widths"))) {
    if (!f.has("widths") || !j["widths"].is_array() || j["widths"].empty())
      throw SchemaError("widths: required nonempty array");
    for (std::size_t k = 0; k < j["widths"].size(); ++k) {
      const auto& w = j["widths"][k];
      const std::string p = "widths[" + std::to_string(k) + "]";
      if (!w.is_number_integer() || w.get<long long>() <= 0) throw SchemaError(p + ": expected a positive integer");
      if (!c.widths.empty() && w.get<int>() <= c.widths.back()) throw SchemaError(p + ": widths must increase");
      c.widths.push_back(w.get<int>());
    }
  }
  if (detail::measured_kind(c.kind)) {
    if (!f.has("dataset")) throw SchemaError("dataset: required");
    try {
      c.dataset = parse_dataset_request(j["dataset"], "dataset");
    } catch (const DataError& e) {
      throw SchemaError(e.what());
    }
    if (!f.has("seeds")) throw SchemaError("seeds: required");
    c.seeds = int(f.integer("seeds", 2, 2));
    if (f.has("fit_range")) {
      const auto& r = j["fit_range"];
      if (!r.is_array() || r.size() != 2) throw SchemaError("fit_range: expected [n_min, n_max or null]");
      if (!r[0].is_number_integer()) throw SchemaError("fit_range[0]: expected an integer");
      c.fit_range.n_min = r[0].get<int>();
      if (r[1].is_null())
        c.fit_range.n_max = INT_MAX;
      else if (r[1].is_number_integer())
        c.fit_range.n_max = r[1].get<int>();
      else
        throw SchemaError("fit_range[1]: expected an integer or null");
    }
    c.probe_count = int(f.integer("probe_count", 0, 0));
    c.max_parameters = std::size_t(f.integer("max_parameters", 1, 50'000'000));
  }
  if (c.kind == "dtheta0") c.fd_step = f.positive("fd_step", 0.01);
  if (c.kind == "drift") {
    c.lr = detail::parse_lr(f, 0.0);
    c.step_cap = f.integer("step_cap", 1, 10000);
    c.snapshot_stride = f.integer("snapshot_stride", 1, 10);
  }
  if (c.kind == "lossgap") {
    c.lr = detail::parse_lr(f, 0.5);
    c.horizon = f.integer("horizon", 1, 0);
    if (c.horizon == 0) throw SchemaError("horizon: required");
    c.log_stride = f.integer("log_stride", 1, 1);
    c.late_factor = f.integer("late_factor", 2, 30);
  }
  if (c.kind == "exponent" || c.kind == "oracle") {
    const bool need = c.kind == "exponent";
    if (f.has("spec")) {
      try {
        c.spec = parse_spec(j["spec"]);
      } catch (const SpecError& e) {
        throw SchemaError(std::string("spec.") + e.what());
      }
    } else if (need) {
      throw SchemaError("spec: required");
    }
  }
  if (c.kind == "exponent") {
    if (f.has("depths")) {
      const auto& d = j["depths"];
      if (!d.is_array() || d.empty()) throw SchemaError("depths: expected a nonempty array");
      c.depths.clear();
      for (std::size_t k = 0; k < d.size(); ++k) {
        if (!d[k].is_number_integer() || d[k].get<int>() < 1)
          throw SchemaError("depths[" + std::to_string(k) + "]: expected a positive integer");
        c.depths.push_back(d[k].get<int>());
      }
    }
    if (f.has("mixed")) {
      if (!j["mixed"].is_boolean()) throw SchemaError("mixed: expected a boolean");
      c.mixed = j["mixed"].get<bool>();
      if (c.mixed && !c.spec->has_mixed_depths()) throw SchemaError("mixed: spec has no depths or chains");
    }
    c.diagram_cap = std::uint64_t(f.integer("diagram_cap", 1, long(default_diagram_cap)));
  }
  if (c.kind == "oracle") {
    if (f.has("op")) {
      const auto& o = j["op"];
      if (!o.is_string() || (o != "pair" && o != "ntk" && o != "mc" && o != "all"))
        throw SchemaError("op: expected pair, ntk, mc or all");
      c.op = o.get<std::string>();
    }
    if ((c.op == "mc" || c.op == "all") && !c.spec) throw SchemaError("spec: required for op " + c.op);
    if (f.has("inputs")) {
      const auto& in = j["inputs"];
      if (!in.is_object()) throw SchemaError("inputs: expected an object of name -> values");
      for (auto it = in.begin(); it != in.end(); ++it) {
        const std::string p = "inputs." + it.key();
        if (!it->is_array() || it->size() != c.architecture->input.size())
          throw SchemaError(p + ": expected " + std::to_string(c.architecture->input.size()) + " numbers");
        std::vector<double> v;
        for (const auto& x : *it) {
          if (!x.is_number()) throw SchemaError(p + ": expected numbers");
          v.push_back(x.get<double>());
        }
        c.inputs[it.key()] = std::move(v);
      }
    }
    c.input_seed = f.seed("input_seed");
    c.samples = int(f.integer("samples", 2, 1000));
  }
  f.finish();
  return c;
}

/// Normalized form: every field the kind uses, defaults filled in.
inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json j{{"kind", c.kind},
                   {"output_dir", c.output_dir},
                   {"root_seed", c.root_seed},
                   {"workers", c.workers},
                   {"precision", c.precision}};
  if (c.architecture) j["architecture"] = to_json(*c.architecture);
  if (!c.widths.empty()) j["widths"] = c.widths;
  if (detail::measured_kind(c.kind)) {
    j["dataset"] = to_json(*c.dataset);
    j["seeds"] = c.seeds;
    j["fit_range"] = {c.fit_range.n_min, c.fit_range.n_max == INT_MAX ? nlohmann::json() : nlohmann::json(c.fit_range.n_max)};
    j["probe_count"] = c.probe_count;
    j["max_parameters"] = c.max_parameters;
  }
  auto lr = [&]() -> nlohmann::json { return c.lr > 0.0 ? nlohmann::json(c.lr) : nlohmann::json("stability"); };
  if (c.kind == "dtheta0") j["fd_step"] = c.fd_step;
  if (c.kind == "drift") {
    j["lr"] = lr();
    j["step_cap"] = c.step_cap;
    j["snapshot_stride"] = c.snapshot_stride;
  }
  if (c.kind == "lossgap") {
    j["lr"] = lr();
    j["horizon"] = c.horizon;
    j["log_stride"] = c.log_stride;
    j["late_factor"] = c.late_factor;
  }
  if (c.spec) j["spec"] = to_json(*c.spec);
  if (c.kind == "exponent") {
    j["depths"] = c.depths;
    j["mixed"] = c.mixed;
    j["diagram_cap"] = c.diagram_cap;
  }
  if (c.kind == "oracle") {
    j["op"] = c.op;
    j["inputs"] = c.inputs;
    j["input_seed"] = c.input_seed;
    j["samples"] = c.samples;
  }
  return j;
}

/// SHA-256 of the normalized config.
inline std::string config_digest(const ExperimentConfig& c) { return sha256_hex(to_json(c).dump()); }

inline ExperimentConfig load_config(const std::filesystem::path& file) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(file));
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError(file.string() + ": " + e.what());
  } catch (const DataError& e) {
    throw SchemaError(e.what());
  }
  return parse_config(j);
}

struct RunResult {
  std::string observable;
  std::optional<PowerLawFit> fit;
  std::string fit_error;
  std::vector<int> widths;
  int seeds = 0;
  int excluded = 0;
};

struct RunSummary {
  std::string digest;
  std::vector<RunResult> results;
  std::vector<std::string> outputs;
  /// Human-readable lines for stdout.
  std::vector<std::string> messages;
  nlohmann::json extra = nlohmann::json::object();
};

namespace detail {

inline Dataset probe_subset(const Dataset& train, int count) {
  if (count <= 0 || std::size_t(count) >= train.size()) return train;
  Dataset p = train;
  p.inputs.resize(std::size_t(count));
  p.labels.resize(std::size_t(count));
  p.digest = p.compute_digest();
  return p;
}

inline RunResult series_result(const ScalingSeries& s, FitRange range) {
  RunResult r;
  r.observable = s.observable;
  r.widths = s.widths;
  r.seeds = s.samples.empty() ? 0 : int(s.samples.front().size() + std::size_t(s.excluded.front()));
  r.excluded = s.total_excluded();
  try {
    r.fit = fit_power_law(s, range);
  } catch (const FitError& e) {
    r.fit_error = e.what();
  }
  return r;
}

inline void emit_series(const ExperimentConfig& c, RunSummary& sum, const ScalingSeries& s) {
  RunResult r = series_result(s, c.fit_range);
  r.seeds = c.seeds;
  write_series_files(c.output_dir, s.observable, s, r.fit, sum.digest, r.fit_error);
  for (const char* ext : {".json", ".csv", "_plot.csv"}) sum.outputs.push_back(s.observable + ext);
  std::ostringstream msg;
  msg << s.observable << ": ";
  if (r.fit)
    msg << "alpha = " << r.fit->alpha << ", r^2 = " << r.fit->r_squared;
  else
    msg << "no fit (" << r.fit_error << ")";
  sum.messages.push_back(msg.str());
  sum.results.push_back(std::move(r));
}

template <typename T>
void run_measured(const ExperimentConfig& c, const DatasetPair& data, RunSummary& sum) {
  LabOptions opt;
  opt.widths = c.widths;
  opt.seeds = c.seeds;
  opt.root_seed = c.root_seed;
  opt.workers = c.workers;
  opt.max_parameters = c.max_parameters;
  const Dataset probe = probe_subset(data.train, c.probe_count);
  const NetworkSpec& arch = *c.architecture;
  if (c.kind == "ntk-stats") {
    const auto [mean, var] = measure_ntk_stats<T>(arch, probe, opt);
    emit_series(c, sum, mean);
    emit_series(c, sum, var);
  } else if (c.kind == "dtheta0") {
    emit_series(c, sum, measure_dtheta_dt0<T>(arch, data.train, probe, opt, c.fd_step));
  } else if (c.kind == "drift") {
    const auto r = measure_kernel_drift<T>(arch, data.train, probe, opt, {c.lr, c.step_cap, c.snapshot_stride});
    emit_series(c, sum, r.series);
    nlohmann::json details = nlohmann::json::array();
    for (const auto& w : r.details) {
      nlohmann::json seeds = nlohmann::json::array();
      for (const auto& s : w.seeds)
        seeds.push_back({{"perfect_step", s.perfect_step ? nlohmann::json(*s.perfect_step) : nlohmann::json()},
                         {"capped", s.capped},
                         {"instability", s.instability ? nlohmann::json(*s.instability) : nlohmann::json()},
                         {"lr", s.lr},
                         {"loss_increases", s.loss_increases}});
      details.push_back({{"width", w.width}, {"measure_step", w.measure_step}, {"seeds", seeds}});
    }
    std::ofstream(std::filesystem::path(c.output_dir) / "drift_details.json")
        << nlohmann::json{{"config_digest", sum.digest}, {"widths", details}}.dump(2) << '\n';
    sum.outputs.push_back("drift_details.json");
    sum.extra["drift"] = details;
  } else if (c.kind == "lossgap") {
    GapOptions g;
    g.widths = c.widths;
    g.seeds = c.seeds;
    g.root_seed = c.root_seed;
    g.lr = c.lr;
    g.horizon = c.horizon;
    g.log_stride = c.log_stride;
    g.workers = c.workers;
    const GapSeries gs = loss_gap_experiment<T>(arch, data.train, data.test, g);
    std::ofstream jl(std::filesystem::path(c.output_dir) / "loss_gap.jsonl");
    for (const auto& w : gs.widths)
      for (std::size_t k = 0; k < w.steps.size(); ++k)
        jl << nlohmann::json{{"config_digest", sum.digest},
                             {"width", w.width},
                             {"step", w.steps[k]},
                             {"full_test_loss", w.full_test_loss[k]},
                             {"linear_test_loss", w.linear_test_loss[k]},
                             {"loss_gap", w.loss_gap(k)},
                             {"accuracy_gap", w.full_test_accuracy[k] - w.linear_test_accuracy[k]}}
                  .dump()
           << '\n';
    sum.outputs.push_back("loss_gap.jsonl");
    const long early = gs.early_stopping_step();
    const long late = early * c.late_factor;
    RunResult r;
    r.observable = "loss_gap";
    r.widths = c.widths;
    r.seeds = c.seeds;
    for (const auto& w : gs.widths) r.excluded += w.excluded;
    nlohmann::json out{{"config_digest", sum.digest}, {"early_step", early}, {"late_step", late},
                       {"gaps_early", gs.gaps_at(early)}};
    try {
      r.fit = gs.fit_at(early);
      out["fit_early"] = to_json(*r.fit);
    } catch (const FitError& e) {
      r.fit_error = e.what();
      out["fit_early"] = {{"error", r.fit_error}};
    }
    if (late <= c.horizon && late % c.log_stride == 0) {
      const auto ge = gs.gaps_at(early), gl = gs.gaps_at(late);
      bool flips = true;
      for (std::size_t k = 0; k < ge.size(); ++k) flips = flips && (ge[k] * gl[k] < 0.0);
      out["gaps_late"] = gl;
      out["sign_flip"] = flips;
    } else {
      out["gaps_late"] = nullptr;
      out["sign_flip"] = nullptr;
      out["late_note"] = "late step beyond horizon";
    }
    std::ofstream(std::filesystem::path(c.output_dir) / "loss_gap.json") << out.dump(2) << '\n';
    sum.outputs.push_back("loss_gap.json");
    sum.extra["lossgap"] = out;
    std::ostringstream msg;
    msg << "loss_gap: early step " << early << ", late step " << late;
    if (r.fit) msg << ", alpha = " << r.fit->alpha << ", r^2 = " << r.fit->r_squared;
    if (!out["sign_flip"].is_null()) msg << ", sign flip " << (out["sign_flip"].get<bool>() ? "yes" : "no");
    sum.messages.push_back(msg.str());
    sum.results.push_back(std::move(r));
  }
}

inline std::map<std::string, Tensor> oracle_inputs(const ExperimentConfig& c) {
  const Shape s = c.architecture->input;
  std::map<std::string, Tensor> out;
  for (const auto& [k, v] : c.inputs) out.emplace(k, Tensor(s, v));
  std::set<std::string> names{"x1", "x2"};
  if (c.spec)
    for (const auto& f : c.spec->factors) names.insert(f.input);
  std::mt19937_64 gen(c.input_seed);
  std::normal_distribution<double> normal;
  for (const auto& name : names)
    if (!out.count(name)) {
      Tensor t(s);
      for (double& x : t.data) x = normal(gen);
      out.emplace(name, std::move(t));
    }
  return out;
}

}  // namespace detail

/// JSON lines for the oracle subcommand and the oracle experiment kind.
inline std::vector<nlohmann::json> oracle_records(const ExperimentConfig& c) {
  std::vector<nlohmann::json> out;
  const NetworkSpec& arch = *c.architecture;
  const auto in = detail::oracle_inputs(c);
  const Tensor &x1 = in.at("x1"), &x2 = in.at("x2");
  if (c.op == "pair" || c.op == "all")
    out.push_back({{"op", "pair"}, {"x1", "x1"}, {"x2", "x2"}, {"value", wick_pair(arch, x1, x2)}});
  if (c.op == "ntk" || c.op == "all")
    out.push_back({{"op", "ntk"}, {"x1", "x1"}, {"x2", "x2"}, {"value", wick_ntk(arch, x1, x2)}});
  if (c.op == "mc" || c.op == "all") {
    const std::vector<int> widths = c.widths.empty() ? std::vector<int>{arch.width} : c.widths;
    std::vector<double> means;
    for (int n : widths) {
      const auto e = mc_oracle(arch.with_width(n), *c.spec, in, std::size_t(c.samples), c.root_seed, c.workers);
      out.push_back({{"op", "mc"}, {"width", n}, {"mean", e.mean}, {"stderr", e.std_error}, {"samples", e.samples}});
      means.push_back(std::abs(e.mean));
    }
    if (widths.size() >= 3) {
      const auto fit = fit_power_law(widths, means, FitRange::all());
      out.push_back({{"op", "mc_fit"}, {"alpha", fit.alpha}, {"r_squared", fit.r_squared}});
    }
  }
  return out;
}

inline std::vector<nlohmann::json> exponent_records(const CorrelationSpec& spec, const std::vector<int>& depths,
                                                    bool mixed, std::uint64_t cap = default_diagram_cap) {
  std::vector<nlohmann::json> out;
  auto record = [&](const std::vector<Chain>& chains, nlohmann::json depth) {
    const Prediction p = predict(spec, chains, cap);
    nlohmann::json j{{"depth", depth},
                     {"conjecture", to_string(p.conjecture)},
                     {"deep_linear", to_string(p.deep_linear)},
                     {"diagrams", p.deep_linear.diagrams},
                     {"unfiltered", p.unfiltered},
                     {"component_bound", p.bound.enumerated ? to_string(*p.bound.enumerated) : "vanishes"},
                     {"cluster_bound", to_string(p.bound.cluster)},
                     {"max_chi", p.deep_linear.diagrams ? nlohmann::json(p.max_chi) : nlohmann::json()},
                     {"chi_ok", p.chi_ok}};
    if (p.deep_linear.vanishes()) j["diagnostic"] = p.deep_linear.diagnostic;
    out.push_back(std::move(j));
  };
  if (mixed)
    record(mixed_chains(spec), "mixed");
  else
    for (int d : depths) record(uniform_chains(spec.m(), d), d);
  return out;
}

/// Runs `c`, writing results, plot data and manifest.json into c.output_dir.
/// Real datasets are read from `data_root_dir`, or WCN_DATA_ROOT when empty.
inline RunSummary run_experiment(const ExperimentConfig& c, const std::filesystem::path& data_root_dir = {}) {
  RunSummary sum;
  sum.digest = config_digest(c);
  std::filesystem::create_directories(c.output_dir);
  nlohmann::json manifest{{"artifact_version", artifact_version},
                          {"experiment", c.kind},
                          {"config_digest", sum.digest},
                          {"config", to_json(c)}};
  if (detail::measured_kind(c.kind)) {
    const bool needs_root = c.dataset->source != "synthetic" && data_root_dir.empty();
    const DatasetPair data = load_dataset(*c.dataset, needs_root ? data_root() : data_root_dir);
    manifest["dataset"] = data.manifest();
    if (c.precision == "float")
      detail::run_measured<float>(c, data, sum);
    else
      detail::run_measured<double>(c, data, sum);
  } else if (c.kind == "exponent") {
    const auto recs = exponent_records(*c.spec, c.depths, c.mixed, c.diagram_cap);
    std::ofstream(std::filesystem::path(c.output_dir) / "exponent.json")
        << nlohmann::json{{"config_digest", sum.digest}, {"records", recs}}.dump(2) << '\n';
    sum.outputs.push_back("exponent.json");
    sum.messages.push_back("conjecture s_C = " + recs.front()["conjecture"].get<std::string>());
    for (const auto& r : recs)
      sum.messages.push_back("deep-linear s (depth " + r["depth"].dump() + ") = " + r["deep_linear"].get<std::string>());
    sum.extra["exponent"] = recs;
  } else if (c.kind == "oracle") {
    const auto recs = oracle_records(c);
    std::ofstream(std::filesystem::path(c.output_dir) / "oracle.json")
        << nlohmann::json{{"config_digest", sum.digest}, {"records", recs}}.dump(2) << '\n';
    sum.outputs.push_back("oracle.json");
    for (const auto& r : recs) sum.messages.push_back(r.dump());
    sum.extra["oracle"] = recs;
  }
  nlohmann::json results = nlohmann::json::array();
  for (const auto& r : sum.results) {
    nlohmann::json row{{"observable", r.observable}, {"widths", r.widths}, {"seeds", r.seeds}, {"excluded", r.excluded}};
    if (r.fit) {
      row["alpha"] = r.fit->alpha;
      row["r_squared"] = r.fit->r_squared;
    } else {
      row["alpha"] = nullptr;
      row["r_squared"] = nullptr;
      row["fit_error"] = r.fit_error;
    }
    results.push_back(std::move(row));
  }
  manifest["results"] = results;
  manifest["outputs"] = sum.outputs;
  std::ofstream(std::filesystem::path(c.output_dir) / "manifest.json") << manifest.dump(2) << '\n';
  return sum;
}

class ReportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ReportRow {
  std::string experiment, observable, digest;
  std::optional<double> alpha, r_squared;
  std::vector<int> widths;
  int seeds = 0, excluded = 0;
  bool digest_mismatch = false;
};

namespace detail {

/// Config digest recorded in a result file, or "" if none is found.
inline std::string file_digest(const std::filesystem::path& p) {
  const std::string text = read_file(p);
  const std::string ext = p.extension().string();
  if (ext == ".csv") {
    const std::string tag = "# config_digest ";
    if (text.rfind(tag, 0) != 0) return "";
    return text.substr(tag.size(), text.find('\n') - tag.size());
  }
  if (ext == ".jsonl") {
    std::istringstream in(text);
    std::string line, digest;
    while (std::getline(in, line)) {
      const auto j = nlohmann::json::parse(line);
      const std::string d = j.value("config_digest", "");
      if (digest.empty()) digest = d;
      if (d != digest) return "<mixed>";
    }
    return digest;
  }
  return nlohmann::json::parse(text).value("config_digest", "");
}

/// True for files that carry a config digest.
inline bool looks_like_result(const std::filesystem::path& p) {
  const std::string e = p.extension().string();
  if (e != ".json" && e != ".csv" && e != ".jsonl") return false;
  try {
    return !file_digest(p).empty();
  } catch (const std::exception&) {
    return false;
  }
}

}  // namespace detail

/// One row per (run, observable) for every manifest.json under `dir`.
/// Output files whose digest differs from their manifest raise a
/// ReportError unless `force`; digest-carrying files without a manifest
/// always do.
inline std::vector<ReportRow> collect_report(const std::filesystem::path& dir, bool force = false) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw ReportError(dir.string() + ": not a directory");
  std::vector<fs::path> dirs{dir};
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_directory()) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  std::vector<ReportRow> rows;
  for (const auto& d : dirs) {
    const fs::path mpath = d / "manifest.json";
    if (!fs::exists(mpath)) {
      for (const auto& e : fs::directory_iterator(d))
        if (e.is_regular_file() && detail::looks_like_result(e.path()))
          throw ReportError(d.string() + ": missing manifest (found " + e.path().filename().string() + ")");
      continue;
    }
    const auto m = nlohmann::json::parse(read_file(mpath));
    const std::string digest = m.value("config_digest", "");
    bool mismatch = false;
    for (const auto& name : m.value("outputs", std::vector<std::string>{})) {
      const fs::path p = d / name;
      const std::string got = fs::exists(p) ? detail::file_digest(p) : "<missing>";
      if (got != digest) {
        if (!force)
          throw ReportError(p.string() + ": config digest " + got + " does not match manifest " + digest +
                            " (use --force to report anyway)");
        mismatch = true;
      }
    }
    const auto results = m.value("results", nlohmann::json::array());
    auto base = [&] {
      ReportRow r;
      r.experiment = m.value("experiment", "?");
      r.digest = digest;
      r.digest_mismatch = mismatch;
      return r;
    };
    if (results.empty()) {
      ReportRow r = base();
      r.observable = "-";
      rows.push_back(r);
    }
    for (const auto& res : results) {
      ReportRow r = base();
      r.observable = res.value("observable", "?");
      if (res["alpha"].is_number()) r.alpha = res["alpha"].get<double>();
      if (res["r_squared"].is_number()) r.r_squared = res["r_squared"].get<double>();
      r.widths = res.value("widths", std::vector<int>{});
      r.seeds = res.value("seeds", 0);
      r.excluded = res.value("excluded", 0);
      rows.push_back(r);
    }
  }
  return rows;
}

inline void print_report(std::ostream& os, const std::vector<ReportRow>& rows) {
  auto num = [](const std::optional<double>& v) {
    if (!v) return std::string("-");
    std::ostringstream s;
    s << std::fixed << std::setprecision(4) << *v;
    return s.str();
  };
  auto widths = [](const std::vector<int>& w) {
    std::string s;
    for (std::size_t k = 0; k < w.size(); ++k) s += (k ? "," : "") + std::to_string(w[k]);
    return s.empty() ? std::string("-") : s;
  };
  os << std::left << std::setw(11) << "experiment" << std::setw(15) << "observable" << std::setw(9) << "alpha"
     << std::setw(8) << "r2" << std::setw(26) << "widths" << std::setw(7) << "seeds" << std::setw(9) << "excluded"
     << "digest\n";
  for (const auto& r : rows)
    os << std::left << std::setw(11) << r.experiment << std::setw(15) << r.observable << std::setw(9) << num(r.alpha)
       << std::setw(8) << num(r.r_squared) << std::setw(26) << widths(r.widths) << std::setw(7) << r.seeds
       << std::setw(9) << r.excluded << r.digest.substr(0, 12) << (r.digest_mismatch ? " MISMATCH" : "") << '\n';
}

}  // namespace wcn
