// wcn: experiment runner, report, exponent prediction and linear oracle.

#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>

#include "wcn/experiment.hpp"

namespace {

int fail(const std::string& what, const std::string& msg) {
  std::cerr << "wcn " << what << ": " << msg << '\n';
  return 1;
}

nlohmann::json load_json(const std::string& file) {
  try {
    return nlohmann::json::parse(wcn::read_file(file));
  } catch (const nlohmann::json::parse_error& e) {
    throw wcn::SchemaError(file + ": " + e.what());
  } catch (const wcn::DataError& e) {
    throw wcn::SchemaError(e.what());
  }
}

int cmd_run(const std::string& config_path, int workers) {
  wcn::ExperimentConfig c;
  try {
    c = wcn::load_config(config_path);
  } catch (const wcn::SchemaError& e) {
    return fail("run", std::string("schema error: ") + e.what());
  }
  if (workers > 0) c.workers = unsigned(workers);
  try {
    const auto sum = wcn::run_experiment(c);
    std::cout << "experiment " << c.kind << " (config digest " << sum.digest << ")\n";
    for (const auto& m : sum.messages) std::cout << m << '\n';
    std::cout << "wrote " << sum.outputs.size() + 1 << " files to " << c.output_dir << '\n';
  } catch (const wcn::DataError& e) {
    return fail("run", std::string("data-io: ") + e.what());
  } catch (const wcn::SpecError& e) {
    return fail("run", std::string("graph-scaling: ") + e.what());
  } catch (const wcn::ResourceError& e) {
    return fail("run", std::string("correlation-lab: ") + e.what());
  } catch (const wcn::SeriesError& e) {
    return fail("run", std::string("correlation-lab: ") + e.what());
  } catch (const wcn::FitError& e) {
    return fail("run", std::string("power-law fit: ") + e.what());
  } catch (const wcn::KernelError& e) {
    return fail("run", std::string("train-harness: ") + e.what());
  } catch (const std::exception& e) {
    return fail("run", e.what());
  }
  return 0;
}

int cmd_report(const std::string& dir, bool force) {
  try {
    wcn::print_report(std::cout, wcn::collect_report(dir, force));
  } catch (const std::exception& e) {
    return fail("report", e.what());
  }
  return 0;
}

int cmd_predict(const std::string& spec_file, int depth, bool mixed) {
  try {
    const auto spec = wcn::load_spec(spec_file);
    if (mixed && !spec.has_mixed_depths()) return fail("predict-exponent", "--mixed needs depths or chains in the correlation spec");
    const std::vector<int> depths = depth > 0 ? std::vector<int>{depth} : std::vector<int>{1, 2, 3, 4};
    for (const auto& r : wcn::exponent_records(spec, depths, mixed)) std::cout << r.dump() << '\n';
  } catch (const std::exception& e) {
    return fail("predict-exponent", e.what());
  }
  return 0;
}

int cmd_oracle(const std::string& arch_file, const std::string& op, const std::string& spec_file,
               const std::vector<int>& widths, int samples, std::uint64_t seed, std::uint64_t input_seed,
               const std::string& inputs_file, int workers) {
  try {
    nlohmann::json cfg{{"kind", "oracle"}, {"architecture", load_json(arch_file)}, {"op", op},
                       {"samples", samples}, {"root_seed", seed}, {"input_seed", input_seed},
                       {"workers", std::max(workers, 1)}};
    if (!spec_file.empty()) cfg["spec"] = load_json(spec_file);
    if (!widths.empty()) cfg["widths"] = widths;
    if (!inputs_file.empty()) cfg["inputs"] = load_json(inputs_file);
    const auto c = wcn::parse_config(cfg);
    for (const auto& r : wcn::oracle_records(c)) std::cout << r.dump() << '\n';
  } catch (const std::exception& e) {
    return fail("oracle", e.what());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Width-scaling of network correlation functions"};
  app.require_subcommand(1);

  std::string config_path;
  int workers = 0;
  auto* run = app.add_subcommand("run", "Run an experiment config and write results with a manifest");
  run->add_option("config", config_path, "Experiment config (JSON)")->required();
  run->add_option("--workers", workers, "Override the worker count");

  std::string dir;
  bool force = false;
  auto* report = app.add_subcommand("report", "Summarize every run under a results directory");
  report->add_option("dir", dir, "Results directory")->required();
  report->add_flag("--force", force, "Report runs whose output digests disagree with their manifest");

  std::string spec_file;
  int depth = 0;
  bool mixed = false;
  auto* predict = app.add_subcommand("predict-exponent", "Predicted width exponents for a correlation spec");
  predict->add_option("--spec", spec_file, "Correlation spec (JSON)")->required();
  auto* depth_opt = predict->add_option("--depth", depth, "Hidden layers per factor (default: 1 to 4)")
                        ->check(CLI::PositiveNumber);
  predict->add_flag("--mixed", mixed, "Use the per-factor depths or chains in the correlation spec")->excludes(depth_opt);

  std::string arch_file, op, oracle_spec, inputs_file;
  std::vector<int> widths;
  int samples = 1000;
  std::uint64_t seed = 0, input_seed = 0;
  auto* oracle = app.add_subcommand("oracle", "Exact and Monte Carlo values for deep linear networks");
  oracle->add_option("--arch", arch_file, "Architecture (JSON)")->required();
  oracle->add_option("--op", op, "pair, ntk or mc")->required()->check(CLI::IsMember({"pair", "ntk", "mc"}));
  oracle->add_option("--spec", oracle_spec, "Correlation spec for --op mc");
  oracle->add_option("--widths", widths, "Widths for --op mc (default: the architecture width)")
      ->delimiter(',');
  oracle->add_option("--samples", samples, "Monte Carlo seeds")->check(CLI::Range(2, 100000000));
  oracle->add_option("--seed", seed, "Root seed for --op mc");
  oracle->add_option("--input-seed", input_seed, "Seed for generated inputs");
  oracle->add_option("--inputs", inputs_file, "JSON object mapping input names to flat values");
  oracle->add_option("--workers", workers, "Worker threads");

  CLI11_PARSE(app, argc, argv);

  if (*run) return cmd_run(config_path, workers);
  if (*report) return cmd_report(dir, force);
  if (*predict) return cmd_predict(spec_file, depth, mixed);
  return cmd_oracle(arch_file, op, oracle_spec, widths, samples, seed, input_seed, inputs_file, workers);
}
