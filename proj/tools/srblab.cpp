// srblab: build, check and report finite-horizon approximations of SRB
// measures for the built-in partially hyperbolic attractors.

#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "srblab/pipeline.hpp"

namespace {

using namespace srblab;

int report_error(const Error& e) {
  std::cerr << "srblab: " << to_string(e.kind()) << " error: " << e.what() << "\n";
  return exit_code_for(e.kind());
}

int cmd_validate(const std::string& config_path, unsigned workers) {
  const RunConfig cfg = load_config(config_path);
  const SystemPtr sys = builtin_system(cfg.system, cfg.parameters, cfg.norm);
  if (cfg.k && *cfg.k != sys->unstable_dim())
    fail(ErrorKind::config, "k does not match the unstable dimension of " + cfg.system);
  ValidationOptions vo;
  vo.seed = cfg.seed;
  vo.workers = workers;
  const auto rep = validate_conditions(*sys, vo);
  for (const auto& c : rep.checks)
    std::cout << (c.passed ? "PASS " : "FAIL ") << c.name << " value=" << format_double(c.value)
              << " threshold=" << format_double(c.threshold) << (c.detail.empty() ? "" : "  " + c.detail) << "\n";
  for (const auto& n : rep.notes) std::cout << "note: " << n << "\n";
  for (const auto& v : rep.violations) std::cout << "violation: " << v << "\n";
  std::cout << (rep.passed() ? "valid" : "invalid") << "\n";
  return rep.passed() ? kExitOk : kExitValidation;
}

struct RunOverrides {
  std::optional<std::size_t> particles;
  std::optional<int> horizon;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> workers;
  std::optional<std::string> output;
};

int cmd_run(const std::string& config_path, const RunOverrides& o) {
  RunConfig cfg = load_config(config_path);
  if (o.particles) cfg.particles = *o.particles;
  if (o.horizon) cfg.horizon = *o.horizon;
  if (o.seed) cfg.seed = *o.seed;
  if (o.workers) cfg.workers = *o.workers;
  if (o.output) cfg.output = *o.output;
  validate_config(cfg);
  const auto dir = resolve_output(cfg.output);
  const auto out = run_pipeline(cfg, dir, &std::cerr);
  if (out.status == "complete") {
    for (const auto& c : out.summary["checks"])
      std::cout << (c["passed"].get<bool>() ? "PASS " : "FAIL ") << c["name"].get<std::string>()
                << " value=" << format_double(c["value"].get<double>()) << " "
                << c["relation"].get<std::string>() << " " << format_double(c["threshold"].get<double>()) << "\n";
    std::cout << "verdict: " << out.verdict << "\n";
  } else {
    std::cout << "run " << out.status << " at stage " << out.failed_stage << ": " << out.message << "\n";
  }
  std::cout << "output: " << dir.string() << "\n";
  return out.exit_code;
}

int cmd_report(const std::string& run_dir, const std::string& format) {
  for (const auto& p : emit_report(resolve_output(run_dir), format)) std::cout << p.string() << "\n";
  return kExitOk;
}

int cmd_distances(const std::string& run_dir, unsigned workers) {
  const auto dir = resolve_output(run_dir);
  const auto j = compute_distances(dir, workers);
  for (const auto& p : j["pairs"])
    std::cout << p["first"].get<std::string>() << " -> " << p["second"].get<std::string>()
              << "  LP=" << format_double(p["levy_prokhorov"]["value"].get<double>())
              << " (grid " << format_double(p["levy_prokhorov"]["grid_diameter"].get<double>()) << ")"
              << "  W1=" << format_double(p["w1"].get<double>()) << "\n";
  std::cout << (dir / "distances.json").string() << "\n" << (dir / "distances.csv").string() << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"srblab: numerical SRB measure construction and checks"};
  app.require_subcommand(1);

  std::string config_path, run_dir, format = "md";
  unsigned workers = 1;
  RunOverrides o;

  auto* validate = app.add_subcommand("validate", "check the standing assumptions for a configured system");
  validate->add_option("--config", config_path, "JSON configuration")->required();
  validate->add_option("--workers", workers, "worker threads")->check(CLI::PositiveNumber);

  auto* run = app.add_subcommand("run", "run the construction and write a run directory");
  run->add_option("--config", config_path, "JSON configuration")->required();
  run->add_option("--particles", o.particles, "total particle count N");
  run->add_option("--horizon", o.horizon, "Cesaro horizon n");
  run->add_option("--seed", o.seed, "random seed");
  run->add_option("--workers", o.workers, "worker threads (results do not depend on it)");
  run->add_option("--output", o.output, "run directory (relative paths resolve against SRBLAB_OUTPUT_ROOT)");

  auto* report = app.add_subcommand("report", "render the tables of a completed run");
  report->add_option("--run", run_dir, "run directory")->required();
  report->add_option("--format", format, "md, json or csv")->check(CLI::IsMember({"md", "json", "csv"}));

  auto* distances = app.add_subcommand("distances", "weak-* distances between Cesaro averages of a run");
  distances->add_option("--run", run_dir, "run directory")->required();
  distances->add_option("--workers", workers, "worker threads")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (*validate) return cmd_validate(config_path, workers);
    if (*run) return cmd_run(config_path, o);
    if (*report) return cmd_report(run_dir, format);
    if (*distances) return cmd_distances(run_dir, workers);
  } catch (const Error& e) {
    return report_error(e);
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "srblab: io error: malformed run file: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "srblab: " << e.what() << "\n";
    return kExitNumerical;
  }
  return kExitValidation;
}
