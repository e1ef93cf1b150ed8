#pragma once

// Run configuration, the end-to-end construction pipeline, and the files it
// leaves behind (measures, run record, summary verdict, reports, distances).
// The srblab CLI is a thin wrapper over this header.

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "srblab/cocycle.hpp"
#include "srblab/manifolds.hpp"
#include "srblab/srb.hpp"
#include "srblab/system.hpp"
#include "srblab/weakstar.hpp"

namespace srblab {

inline constexpr const char* kConfigSchema = "srblab-config 1";
inline constexpr const char* kRunSchema = "srblab-run 1";
inline constexpr const char* kSummarySchema = "srblab-summary 1";
inline constexpr const char* kReportSchema = "srblab-report 1";
inline constexpr const char* kDistancesSchema = "srblab-distances 1";

/// Exit statuses of the CLI.
enum ExitCode : int { kExitOk = 0, kExitValidation = 2, kExitNumerical = 3, kExitVerdict = 4 };

inline int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config:
    case ErrorKind::parameter:
    case ErrorKind::unknown_system:
    case ErrorKind::invalid_input:
    case ErrorKind::missing_stage:
    case ErrorKind::io:
      return kExitValidation;
    default:
      return kExitNumerical;
  }
}

struct Tolerances {
  double portmanteau = 1e-2;        ///< tail fluctuation and boundary mass on V
  double portmanteau_shell = 1e-3;  ///< width of the inner/outer shells of V
  double marginal_tv = 1e-2;        ///< marginal against the Ulam density
  double invariance = 1e-6;         ///< disc invariance residual
  double cauchy_tail = 1e-6;        ///< distortion product tails
  double coherence = 1e-6;          ///< disc coherence at rho = delta / 4
  double linear_density = 1e-10;    ///< |p_n - 1| for the linear model
};

struct RunConfig {
  std::string system = "solenoid";
  SystemParameters parameters;
  NormDescriptor norm = NormDescriptor::sup();
  std::optional<Eigen::Index> k;
  double seed_delta = 0.1;   ///< radius of the seed disc L
  double disc_delta = 0.25;  ///< radius of the discs building the box
  double rho0 = 0.1;
  double epsilon = 0.05;     ///< transversal radius of the box
  double box_search_radius = 0.3;
  LeakParameters leak;
  int horizon = 60;
  std::size_t particles = 1000000;
  std::uint64_t seed = 1;
  unsigned workers = 1;
  std::size_t sample_points = 400;
  std::size_t transient = 200;
  std::size_t history = 160;
  std::size_t distortion_chains = 20;
  std::size_t pairs_per_chain = 5;
  int distortion_horizon = 30;
  std::size_t density_particles = 25;
  int cylinders = 100;
  int leak_generations = 30;
  int lp_resolution = 128;   ///< grid cells per axis for Levy-Prokhorov estimates
  std::string output = "runs/default";
  Tolerances tol;
};

// ---------------------------------------------------------------------------
// Configuration

namespace detail {

inline NormDescriptor parse_norm(const nlohmann::json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "sup" || s == "inf") return NormDescriptor::sup();
    if (s.rfind("p=", 0) == 0) return NormDescriptor::lp(std::stod(s.substr(2)));
    fail(ErrorKind::config, "unknown norm '" + s + "'");
  }
  require(j.is_object(), ErrorKind::config, "norm must be a string or an object");
  if (j.contains("weights")) {
    const auto w = j.at("weights").get<std::vector<double>>();
    return NormDescriptor::weighted(Eigen::Map<const Vec>(w.data(), static_cast<Eigen::Index>(w.size())));
  }
  require(j.contains("p"), ErrorKind::config, "norm object needs 'p' or 'weights'");
  if (j.at("p").is_string() && j.at("p").get<std::string>() == "inf") return NormDescriptor::sup();
  return NormDescriptor::lp(j.at("p").get<double>());
}

inline nlohmann::json norm_json(const NormDescriptor& n) {
  if (n.kind == NormKind::weighted_sup) {
    std::vector<double> w(n.weights.data(), n.weights.data() + n.weights.size());
    return {{"weights", w}};
  }
  if (std::isinf(n.p)) return "sup";
  return {{"p", n.p}};
}

template <typename T>
void take(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::config, std::string("config key '") + key + "': " + e.what());
  }
}

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> keys, const std::string& where) {
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* k : keys) ok = ok || key == k;
    require(ok, ErrorKind::config, "unknown config key '" + where + key + "'");
  }
}

}  // namespace detail

/// Checks the invariants of a configuration; system-specific parameter
/// checks happen when the system is built.
inline void validate_config(const RunConfig& c) {
  auto positive = [](double v, const char* name) {
    require(std::isfinite(v) && v > 0.0, ErrorKind::config, std::string(name) + " must be positive");
  };
  bool known = false;
  for (const auto& n : builtin_system_names()) known = known || n == c.system;
  require(known, ErrorKind::unknown_system, "no built-in system named '" + c.system + "'");
  positive(c.seed_delta, "delta");
  positive(c.disc_delta, "disc_delta");
  positive(c.rho0, "rho0");
  positive(c.epsilon, "epsilon");
  positive(c.box_search_radius, "box_search_radius");
  positive(c.leak.gamma0, "gamma0");
  positive(c.leak.lambda0, "lambda0");
  positive(c.leak.eps0, "eps0");
  require(c.leak.eps0 < c.leak.lambda0, ErrorKind::config, "eps0 must be smaller than lambda0");
  require(c.rho0 < c.disc_delta, ErrorKind::config, "rho0 must be smaller than disc_delta");
  require(c.horizon >= 1, ErrorKind::config, "horizon must be at least 1");
  require(c.particles >= static_cast<std::size_t>(c.horizon), ErrorKind::config, "fewer particles than generations");
  require(c.workers >= 1, ErrorKind::config, "workers must be at least 1");
  require(c.sample_points >= c.distortion_chains + 2, ErrorKind::config, "sample too small for the disc chains");
  require(c.history <= c.transient, ErrorKind::config, "history cannot exceed the transient");
  require(c.distortion_horizon >= 1, ErrorKind::config, "distortion horizon must be positive");
  require(c.history >= static_cast<std::size_t>(c.distortion_horizon) + 60, ErrorKind::config,
          "history must exceed the distortion horizon by at least 60 steps");
  require(c.distortion_chains >= 1 && c.pairs_per_chain >= 1, ErrorKind::config, "need at least one distortion pair");
  require(c.leak_generations >= 2, ErrorKind::config, "leak_generations must be at least 2");
  require(c.cylinders >= 0, ErrorKind::config, "cylinders must be nonnegative");
  require(c.lp_resolution >= 64, ErrorKind::config, "lp_resolution must be at least 64");
  const auto& t = c.tol;
  for (double v : {t.portmanteau, t.portmanteau_shell, t.marginal_tv, t.invariance, t.cauchy_tail, t.coherence,
                   t.linear_density})
    positive(v, "every tolerance");
}

inline RunConfig parse_config(const nlohmann::json& j) {
  require(j.is_object(), ErrorKind::config, "config must be a JSON object");
  if (j.contains("schema"))
    require(j.at("schema") == kConfigSchema, ErrorKind::config, std::string("config schema must be '") + kConfigSchema + "'");
  detail::reject_unknown(j,
                         {"schema", "system", "norm", "k", "delta", "disc_delta", "rho0", "epsilon",
                          "box_search_radius", "lambda0", "gamma0", "eps0", "horizon", "particles", "seed", "workers",
                          "sample", "distortion", "density_particles", "cylinders", "leak_generations", "lp_resolution", "output",
                          "tolerances"},
                         "");
  RunConfig c;
  require(j.contains("system"), ErrorKind::config, "config needs a 'system'");
  const auto& s = j.at("system");
  if (s.is_string()) {
    c.system = s.get<std::string>();
  } else {
    require(s.is_object() && s.contains("name"), ErrorKind::config, "system needs a 'name'");
    detail::reject_unknown(s, {"name", "parameters"}, "system.");
    c.system = s.at("name").get<std::string>();
    if (s.contains("parameters")) {
      require(s.at("parameters").is_object(), ErrorKind::config, "system.parameters must be an object");
      for (const auto& [key, value] : s.at("parameters").items()) {
        if (value.is_number())
          c.parameters.set(key, {value.get<double>()});
        else if (value.is_array())
          c.parameters.set(key, value.get<std::vector<double>>());
        else
          fail(ErrorKind::config, "parameter '" + key + "' must be a number or a list of numbers");
      }
    }
  }
  if (j.contains("norm")) c.norm = detail::parse_norm(j.at("norm"));
  if (j.contains("k")) c.k = j.at("k").get<Eigen::Index>();
  detail::take(j, "delta", c.seed_delta);
  detail::take(j, "disc_delta", c.disc_delta);
  detail::take(j, "rho0", c.rho0);
  detail::take(j, "epsilon", c.epsilon);
  detail::take(j, "box_search_radius", c.box_search_radius);
  detail::take(j, "lambda0", c.leak.lambda0);
  detail::take(j, "gamma0", c.leak.gamma0);
  detail::take(j, "eps0", c.leak.eps0);
  detail::take(j, "horizon", c.horizon);
  detail::take(j, "particles", c.particles);
  detail::take(j, "seed", c.seed);
  detail::take(j, "workers", c.workers);
  detail::take(j, "density_particles", c.density_particles);
  detail::take(j, "cylinders", c.cylinders);
  detail::take(j, "leak_generations", c.leak_generations);
  detail::take(j, "lp_resolution", c.lp_resolution);
  detail::take(j, "output", c.output);
  if (j.contains("sample")) {
    const auto& sj = j.at("sample");
    detail::reject_unknown(sj, {"points", "transient", "history"}, "sample.");
    detail::take(sj, "points", c.sample_points);
    detail::take(sj, "transient", c.transient);
    detail::take(sj, "history", c.history);
  }
  if (j.contains("distortion")) {
    const auto& dj = j.at("distortion");
    detail::reject_unknown(dj, {"chains", "pairs_per_chain", "horizon"}, "distortion.");
    detail::take(dj, "chains", c.distortion_chains);
    detail::take(dj, "pairs_per_chain", c.pairs_per_chain);
    detail::take(dj, "horizon", c.distortion_horizon);
  }
  if (j.contains("tolerances")) {
    const auto& tj = j.at("tolerances");
    detail::reject_unknown(tj,
                           {"portmanteau", "portmanteau_shell", "marginal_tv", "invariance", "cauchy_tail", "coherence",
                            "linear_density"},
                           "tolerances.");
    detail::take(tj, "portmanteau", c.tol.portmanteau);
    detail::take(tj, "portmanteau_shell", c.tol.portmanteau_shell);
    detail::take(tj, "marginal_tv", c.tol.marginal_tv);
    detail::take(tj, "invariance", c.tol.invariance);
    detail::take(tj, "cauchy_tail", c.tol.cauchy_tail);
    detail::take(tj, "coherence", c.tol.coherence);
    detail::take(tj, "linear_density", c.tol.linear_density);
  }
  validate_config(c);
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::io, "cannot read config " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::config, "config " + path + " is not valid JSON: " + e.what());
  }
  return parse_config(j);
}

/// Everything that determines the results (no output location, no worker
/// count), in a canonical key order.
inline nlohmann::json config_json(const RunConfig& c) {
  nlohmann::json params = nlohmann::json::object();
  for (const auto& [key, v] : c.parameters.values()) params[key] = v;
  nlohmann::json j = {
      {"schema", kConfigSchema},
      {"system", {{"name", c.system}, {"parameters", params}}},
      {"norm", detail::norm_json(c.norm)},
      {"delta", c.seed_delta},
      {"disc_delta", c.disc_delta},
      {"rho0", c.rho0},
      {"epsilon", c.epsilon},
      {"box_search_radius", c.box_search_radius},
      {"lambda0", c.leak.lambda0},
      {"gamma0", c.leak.gamma0},
      {"eps0", c.leak.eps0},
      {"horizon", c.horizon},
      {"particles", c.particles},
      {"seed", c.seed},
      {"sample", {{"points", c.sample_points}, {"transient", c.transient}, {"history", c.history}}},
      {"distortion",
       {{"chains", c.distortion_chains}, {"pairs_per_chain", c.pairs_per_chain}, {"horizon", c.distortion_horizon}}},
      {"density_particles", c.density_particles},
      {"cylinders", c.cylinders},
      {"leak_generations", c.leak_generations},
      {"lp_resolution", c.lp_resolution},
      {"tolerances",
       {{"portmanteau", c.tol.portmanteau},
        {"portmanteau_shell", c.tol.portmanteau_shell},
        {"marginal_tv", c.tol.marginal_tv},
        {"invariance", c.tol.invariance},
        {"cauchy_tail", c.tol.cauchy_tail},
        {"coherence", c.tol.coherence},
        {"linear_density", c.tol.linear_density}}}};
  if (c.k) j["k"] = *c.k;
  return j;
}

/// Relative output paths resolve against $SRBLAB_OUTPUT_ROOT when it is set.
inline std::filesystem::path resolve_output(const std::string& output) {
  std::filesystem::path p(output);
  if (p.is_relative()) {
    if (const char* root = std::getenv("SRBLAB_OUTPUT_ROOT"); root && *root) p = std::filesystem::path(root) / p;
  }
  return p;
}

// ---------------------------------------------------------------------------
// Tables (report payload)

/// A numeric table with an optional leading label column.
struct Table {
  std::string name;
  std::vector<std::string> columns;  ///< numeric columns
  std::string label_column;          ///< empty: no label column
  std::vector<std::string> labels;
  std::vector<std::vector<double>> rows;

  void add(std::vector<double> row, std::string label = {}) {
    rows.push_back(std::move(row));
    if (!label_column.empty()) labels.push_back(std::move(label));
  }
};

inline nlohmann::json to_json(const Table& t) {
  nlohmann::json j = {{"name", t.name}, {"columns", t.columns}, {"rows", t.rows}};
  if (!t.label_column.empty()) {
    j["label_column"] = t.label_column;
    j["labels"] = t.labels;
  }
  return j;
}

inline double json_number(const nlohmann::json& v) { return v.is_null() ? std::nan("") : v.get<double>(); }

inline Table table_from_json(const nlohmann::json& j) {
  Table t;
  t.name = j.at("name").get<std::string>();
  t.columns = j.at("columns").get<std::vector<std::string>>();
  // JSON has no NaN; it is written as null.
  for (const auto& row : j.at("rows")) {
    t.rows.emplace_back();
    for (const auto& v : row) t.rows.back().push_back(v.is_null() ? std::nan("") : v.get<double>());
  }
  if (j.contains("label_column")) {
    t.label_column = j.at("label_column").get<std::string>();
    t.labels = j.at("labels").get<std::vector<std::string>>();
  }
  return t;
}

inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string table_csv(const Table& t) {
  std::ostringstream out;
  out << "# schema " << kReportSchema << " table " << t.name << "\n";
  bool first = true;
  if (!t.label_column.empty()) {
    out << t.label_column;
    first = false;
  }
  for (const auto& c : t.columns) {
    out << (first ? "" : ",") << c;
    first = false;
  }
  out << "\n";
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    first = true;
    if (!t.label_column.empty()) {
      out << t.labels[r];
      first = false;
    }
    for (double v : t.rows[r]) {
      out << (first ? "" : ",") << format_double(v);
      first = false;
    }
    out << "\n";
  }
  return out.str();
}

inline std::string table_markdown(const Table& t, std::size_t max_rows = 40) {
  std::ostringstream out;
  out << "|";
  if (!t.label_column.empty()) out << " " << t.label_column << " |";
  for (const auto& c : t.columns) out << " " << c << " |";
  out << "\n|";
  if (!t.label_column.empty()) out << "---|";
  for (std::size_t i = 0; i < t.columns.size(); ++i) out << "---|";
  out << "\n";
  for (std::size_t r = 0; r < std::min(max_rows, t.rows.size()); ++r) {
    out << "|";
    if (!t.label_column.empty()) out << " " << t.labels[r] << " |";
    for (double v : t.rows[r]) {
      char buf[40];
      std::snprintf(buf, sizeof buf, "%.6g", v);
      out << " " << buf << " |";
    }
    out << "\n";
  }
  if (t.rows.size() > max_rows) out << "\n(" << t.rows.size() - max_rows << " more rows in the CSV/JSON output)\n";
  return out.str();
}

// ---------------------------------------------------------------------------
// Checks

struct Check {
  std::string name;
  std::string group;  ///< "srb" (enters the verdict) or "acceptance"
  bool passed = false;
  double value = 0.0;
  double threshold = 0.0;
  std::string relation;  ///< how value compares with threshold when passing
  std::string detail;
};

inline nlohmann::json to_json(const Check& c) {
  return {{"name", c.name},   {"group", c.group},         {"passed", c.passed}, {"value", c.value},
          {"threshold", c.threshold}, {"relation", c.relation}, {"detail", c.detail}};
}

// ---------------------------------------------------------------------------
// Pipeline

struct RunOutcome {
  int exit_code = kExitOk;
  std::string status;   ///< "complete", "invalid" or "error"
  std::string verdict;  ///< "SRB-consistent" or "not SRB-consistent"
  std::string failed_stage;
  std::string message;
  nlohmann::json summary;
};

namespace detail {

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  require(out.good(), ErrorKind::io, "cannot write " + p.string());
  out << text;
  require(out.good(), ErrorKind::io, "failed writing " + p.string());
}

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  require(in.good(), ErrorKind::missing_stage, "missing " + p.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Coordinate cube of half-side r around x, split across periodic seams.
inline BoxUnion cube_around(const DynamicalSystem& sys, const Vec& x, double r) {
  BoxUnion V;
  V.boxes.push_back({Vec(x.array() - r), Vec(x.array() + r)});
  for (std::size_t a = 0; a < sys.dim(); ++a) {
    if (!sys.periodic()[a]) continue;
    const auto i = static_cast<Eigen::Index>(a);
    std::vector<std::pair<Vec, Vec>> next;
    for (auto [lo, hi] : V.boxes) {
      if (lo(i) < 0.0) {
        Vec l2 = lo, h2 = hi;
        l2(i) += 1.0;
        h2(i) = 1.0;
        lo(i) = 0.0;
        next.push_back({l2, h2});
      }
      if (hi(i) > 1.0) {
        Vec l2 = lo, h2 = hi;
        l2(i) = 0.0;
        h2(i) -= 1.0;
        hi(i) = 1.0;
        next.push_back({l2, h2});
      }
      next.push_back({lo, hi});
    }
    V.boxes = std::move(next);
  }
  return V;
}

inline bool is_solenoid(const std::string& name) { return name == "solenoid" || name == "solenoid_neutral"; }

// Horizons n/8, n/4, n/2, n (distinct, at least 1).
inline std::vector<int> dyadic_horizons(int n) {
  std::vector<int> h;
  for (int d : {8, 4, 2, 1}) {
    const int v = std::max(1, n / d);
    if (h.empty() || h.back() != v) h.push_back(v);
  }
  return h;
}

inline nlohmann::json box_union_json(const BoxUnion& V) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& [lo, hi] : V.boxes)
    j.push_back({{"lo", std::vector<double>(lo.data(), lo.data() + lo.size())},
                 {"hi", std::vector<double>(hi.data(), hi.data() + hi.size())}});
  return j;
}

inline BoxUnion box_union_from_json(const nlohmann::json& j) {
  BoxUnion V;
  for (const auto& b : j) {
    const auto lo = b.at("lo").get<std::vector<double>>(), hi = b.at("hi").get<std::vector<double>>();
    V.boxes.push_back({Eigen::Map<const Vec>(lo.data(), static_cast<Eigen::Index>(lo.size())),
                       Eigen::Map<const Vec>(hi.data(), static_cast<Eigen::Index>(hi.size()))});
  }
  return V;
}

// Test sets for distance reports: V itself and the lower half of the
// measure's bounding box along each axis.
inline std::vector<std::pair<std::string, BoxUnion>> test_sets(const BoxUnion& V, const WeightedPoints& m) {
  std::vector<std::pair<std::string, BoxUnion>> sets{{"V", V}};
  const Vec lo = m.points.rowwise().minCoeff(), hi = m.points.rowwise().maxCoeff();
  for (Eigen::Index a = 0; a < lo.size(); ++a) {
    Vec h = hi;
    h(a) = 0.5 * (lo(a) + hi(a));
    BoxUnion B;
    B.boxes.push_back({lo, h});
    sets.push_back({"lower_half_x" + std::to_string(a), B});
  }
  return sets;
}

inline WeightedPoints prefix_points(const MeasureSnapshot& s, int horizon) {
  WeightedPoints out;
  std::vector<Eigen::Index> cols;
  for (std::size_t i = 0; i < s.weights.size(); ++i)
    if (s.generation[i] < horizon) cols.push_back(static_cast<Eigen::Index>(i));
  require(!cols.empty(), ErrorKind::invalid_input, "prefix keeps no particles");
  out.points.resize(s.points.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t c = 0; c < cols.size(); ++c) {
    out.points.col(static_cast<Eigen::Index>(c)) = s.points.col(cols[c]);
    out.weights.push_back(s.weights[static_cast<std::size_t>(cols[c])]);
  }
  return out;
}

inline MeasureDistanceReport distance_report(const WeightedPoints& a, const WeightedPoints& b, const std::string& na,
                                             const std::string& nb, const BoxUnion& V, const Metric& metric,
                                             int resolution) {
  MeasureDistanceReport r;
  r.first = na;
  r.second = nb;
  r.lp = levy_prokhorov(a, b, resolution, metric);
  r.w1 = wasserstein1_estimate(a, b, 1024, metric);
  for (const auto& [name, set] : test_sets(V, b)) {
    auto in = [&](const Vec& p) { return set.contains(p); };
    r.test_sets.push_back({name, std::abs(mass_in(a, in) - mass_in(b, in))});
  }
  return r;
}

}  // namespace detail

/// Runs the whole construction and writes into `dir`:
///   config.json   resolved configuration (including the worker count)
///   measure.bin   the Cesaro average at the configured horizon
///   run.json      every stage record and the report tables
///   summary.json  checks and the verdict (independent of the worker count)
/// A failing stage is recorded in summary.json with its name and error kind.
inline RunOutcome run_pipeline(const RunConfig& cfg, const std::filesystem::path& dir, std::ostream* log = nullptr) {
  RunOutcome outcome;
  std::string stage = "config";
  auto note = [&](const std::string& s) {
    stage = s;
    if (log) *log << "[srblab] " << s << std::endl;
  };
  const unsigned W = cfg.workers;
  std::vector<Check> checks;
  auto check = [&](std::string name, std::string group, bool passed, double value, double threshold,
                   std::string relation, std::string detail = {}) {
    checks.push_back({std::move(name), std::move(group), passed, value, threshold, std::move(relation), std::move(detail)});
  };
  nlohmann::json stages = nlohmann::json::object();
  nlohmann::json constants = nlohmann::json::object();
  std::vector<Table> tables;
  auto write_summary = [&]() {
    bool srb_ok = true, all_ok = true;
    for (const auto& c : checks) {
      all_ok = all_ok && c.passed;
      if (c.group == "srb") srb_ok = srb_ok && c.passed;
    }
    if (outcome.status == "complete") {
      outcome.verdict = srb_ok ? "SRB-consistent" : "not SRB-consistent";
      outcome.exit_code = all_ok ? kExitOk : kExitVerdict;
    }
    nlohmann::json cj = nlohmann::json::array();
    for (const auto& c : checks) cj.push_back(to_json(c));
    outcome.summary = {{"schema", kSummarySchema},
                       {"status", outcome.status},
                       {"verdict", outcome.verdict},
                       {"exit_code", outcome.exit_code},
                       {"system", cfg.system},
                       {"horizon", cfg.horizon},
                       {"particles", cfg.particles},
                       {"seed", cfg.seed},
                       {"constants", constants},
                       {"checks", cj}};
    if (!outcome.failed_stage.empty()) {
      outcome.summary["failed_stage"] = outcome.failed_stage;
      outcome.summary["error"] = outcome.message;
    }
    detail::write_text(dir / "summary.json", outcome.summary.dump(2) + "\n");
  };

  try {
    std::filesystem::create_directories(dir);
  } catch (const std::filesystem::filesystem_error& e) {
    outcome.status = "error";
    outcome.exit_code = kExitValidation;
    outcome.failed_stage = "output";
    outcome.message = e.what();
    return outcome;
  }

  try {
    note("config");
    validate_config(cfg);
    nlohmann::json cfg_full = config_json(cfg);
    cfg_full["workers"] = cfg.workers;
    cfg_full["output"] = cfg.output;
    detail::write_text(dir / "config.json", cfg_full.dump(2) + "\n");

    // -- system and standing assumptions
    note("builtin_system");
    const SystemPtr sys = builtin_system(cfg.system, cfg.parameters, cfg.norm);
    if (cfg.k)
      require(*cfg.k == sys->unstable_dim(), ErrorKind::config,
              "k = " + std::to_string(*cfg.k) + " but " + cfg.system + " has unstable dimension " +
                  std::to_string(sys->unstable_dim()));
    note("validate");
    {
      ValidationOptions vo;
      vo.seed = cfg.seed;
      vo.workers = W;
      const auto rep = validate_conditions(*sys, vo);
      nlohmann::json cj = nlohmann::json::array();
      for (const auto& c : rep.checks)
        cj.push_back({{"name", c.name}, {"passed", c.passed}, {"value", c.value}, {"threshold", c.threshold},
                      {"detail", c.detail}});
      stages["validate"] = {{"checks", cj}, {"violations", rep.violations}, {"notes", rep.notes}};
      if (!rep.passed()) {
        outcome.status = "invalid";
        outcome.exit_code = kExitValidation;
        outcome.failed_stage = "validate";
        std::string msg;
        for (const auto& v : rep.violations) msg += (msg.empty() ? "" : "; ") + v;
        outcome.message = msg;
        write_summary();
        return outcome;
      }
    }

    // -- splitting and partial hyperbolicity
    note("splitting");
    const auto sample = sample_attractor(*sys, cfg.sample_points, cfg.seed, cfg.transient, cfg.history, W);
    const auto split = compute_splitting(*sys, sample, 40, W);
    const auto hyp = hyperbolicity_report(*sys, split, sample, cfg.sample_points, W);
    stages["splitting"] = {{"unstable_residual", split.unstable_residual},
                           {"center_stable_residual", split.center_stable_residual},
                           {"continuity_modulus", split.continuity_modulus},
                           {"analytic_unstable", split.analytic_unstable},
                           {"lambda0_estimate", hyp.lambda0_estimate},
                           {"lambda0_multistep", hyp.lambda0_multistep},
                           {"cs_bound", hyp.cs_bound}};
    constants["lambda0_one_step"] = hyp.lambda0_estimate;
    constants["lambda0_multistep"] = hyp.lambda0_multistep;
    check("partial_hyperbolicity", "srb", hyp.accepted(), hyp.cs_bound, 1.0, "<=",
          "E^cs growth bound; E^u one-step log expansion " + format_double(hyp.lambda0_estimate));

    // -- discs (local unstable manifolds along stored orbits)
    note("discs");
    const Eigen::Index n_dist = cfg.distortion_horizon;
    std::vector<DiscChain> chains(cfg.distortion_chains);
    {
      DiscOptions opt;
      opt.delta = cfg.disc_delta;
      opt.keep_levels = n_dist;
      std::vector<std::optional<Error>> errs(chains.size());
      parallel_for(chains.size(), W, [&](std::size_t b, std::size_t e) {
        for (std::size_t i = b; i < e; ++i) {
          try {
            chains[i] = compute_disc_chain(*sys, sample.orbits[i + 2], opt);
          } catch (const Error& err) {
            errs[i] = err;
          }
        }
      });
      for (const auto& e : errs)
        if (e) throw *e;
    }
    std::vector<UnstableDisc> level0;
    double worst_slope = 0.0, worst_invariance = 0.0;
    bool discs_valid = true, covers = true;
    for (const auto& ch : chains) {
      level0.push_back(ch.at(0));
      for (const auto& d : ch.levels) {
        const auto c = check_disc(d, sys->space());
        worst_slope = std::max(worst_slope, c.slope);
        discs_valid = discs_valid && c.valid();
      }
      const auto inv = invariance_residual(*sys, ch.at(1), ch.at(0));
      worst_invariance = std::max(worst_invariance, inv.hausdorff);
      covers = covers && inv.covers;
    }
    check("disc_slope", "srb", discs_valid && worst_slope <= kMaxSlope, worst_slope, kMaxSlope, "<=",
          "max ||Dh|| over all retained chain levels");
    check("disc_invariance", "srb", covers && worst_invariance < cfg.tol.invariance, worst_invariance,
          cfg.tol.invariance, "<", "Hausdorff residual of f(W(x_{-1})) against W(x)");

    // Pairs of points on level 0 with their pulled-back orbits.
    std::vector<DistortionPair> pairs;
    for (std::size_t i = 0; i < chains.size(); ++i) {
      auto rng = make_stream(cfg.seed, "disc-pairs", i);
      const Eigen::Index k = sys->unstable_dim();
      for (std::size_t p = 0; p < cfg.pairs_per_chain; ++p) {
        // Coefficients in the cube of half-side delta / k, inside E^u(delta)
        // for any norm with unit frame columns.
        Vec a(k), b(k);
        const double r = cfg.disc_delta / static_cast<double>(k);
        for (Eigen::Index t = 0; t < k; ++t) a(t) = r * (2.0 * uniform01(rng) - 1.0);
        for (Eigen::Index t = 0; t < k; ++t) b(t) = r * (2.0 * uniform01(rng) - 1.0);
        pairs.push_back({&chains[i], leaf_orbit(*sys, sample.orbits[i + 2], chains[i], a, n_dist),
                         leaf_orbit(*sys, sample.orbits[i + 2], chains[i], b, n_dist)});
      }
    }
    double min_rate = std::numeric_limits<double>::infinity(), gamma0 = 0.0;
    for (const auto& pr : pairs) {
      const auto rec = backward_contraction_check(*sys, *pr.chain, pr.y, pr.z, n_dist, cfg.leak.lambda0, cfg.leak.eps0);
      min_rate = std::min(min_rate, rec.rate);
      gamma0 = std::max(gamma0, rec.gamma0);
    }
    constants["backward_contraction_rate"] = min_rate;
    constants["gamma0_measured"] = gamma0;
    check("backward_contraction", "srb", min_rate >= cfg.leak.lambda0 - cfg.leak.eps0, min_rate,
          cfg.leak.lambda0 - cfg.leak.eps0, ">=", std::to_string(pairs.size()) + " pairs, fitted rate");
    const auto coh = coherence_check(*sys, level0, cfg.disc_delta / 4.0, cfg.tol.coherence, W);
    check("disc_coherence", "srb", coh.coherent, coh.max_hausdorff, cfg.tol.coherence, "<=",
          std::to_string(coh.intersecting) + " intersecting pairs at rho = delta/4");
    stages["discs"] = {{"chains", chains.size()},
                       {"max_slope", worst_slope},
                       {"invariance_residual", worst_invariance},
                       {"backward_rate_min", min_rate},
                       {"gamma0", gamma0},
                       {"coherence_intersecting", coh.intersecting},
                       {"coherence_max_hausdorff", coh.max_hausdorff},
                       {"coherence_largest_rho", coh.largest_rho}};

    // -- basis field and distortion
    note("basis_field");
    const auto field = build_basis_field(*sys, split, sample);
    note("distortion");
    const double M = measure_system_bounds(*sys, split, sample, level0).M();
    const auto dist = estimate_distortion_constant(*sys, field, pairs, n_dist, M, W);
    const double C = dist.C;
    constants["M"] = M;
    constants["C"] = C;
    stages["distortion"] = {{"C", C},
                            {"measured_sup", dist.measured_sup},
                            {"max_cauchy_tail", dist.max_cauchy_tail},
                            {"min_cauchy_rate", dist.min_cauchy_rate},
                            {"three_halves", dist.comparison.three_halves},
                            {"p_deviation_ratio", dist.comparison.p_deviation_ratio},
                            {"q_log_gap", dist.comparison.q_log_gap},
                            {"pairs", dist.pairs},
                            {"horizon", dist.horizon}};
    check("distortion_cauchy_tail", "srb", dist.max_cauchy_tail < cfg.tol.cauchy_tail, dist.max_cauchy_tail,
          cfg.tol.cauchy_tail, "<", "geometric tail bound of the distortion products");
    check("projection_norms", "srb", dist.comparison.three_halves <= 1.5, dist.comparison.three_halves, 1.5, "<=",
          "comparison operator norms and inverse norms");

    // -- seed disc, transversal box
    note("seed");
    const auto seed = std::make_shared<SeedDisc>(make_seed_disc(*sys, sample.orbits[0], cfg.seed_delta));
    note("transversal");
    const auto& anchor_orbit = sample.orbits[1];
    const Vec anchor = anchor_orbit.point();
    const auto near = attractor_points_near(*sys, anchor, cfg.box_search_radius, 20000, cfg.seed, 200, 64, W);
    const auto box_discs = discs_at(*sys, near, cfg.disc_delta, W);
    const auto chart =
        make_chart(anchor, unstable_frame(*sys, anchor_orbit, 40), center_stable_frame(*sys, anchor, 40));
    const auto box = build_transversal(*sys, box_discs, chart, cfg.epsilon, cfg.rho0);
    stages["transversal"] = {{"fibers", box.fibers.size()},
                             {"rho0", box.rho0},
                             {"rho0_shrunk", box.rho0_shrunk},
                             {"duplicates", box.duplicates},
                             {"min_separation", box.min_separation},
                             {"candidates", near.size()}};
    constants["box_fibers"] = box.fibers.size();
    constants["rho0"] = box.rho0;

    // -- Cesaro average
    note("cesaro");
    const auto ces = cesaro_average(*sys, seed, box, cfg.horizon, cfg.particles, cfg.leak, cfg.seed, W);
    const auto& m = ces.measure;
    write_measure_binary(m, (dir / "measure.bin").string());
    constants["retained_mass"] = ces.retained_mass;
    stages["cesaro"] = {{"particles", m.size()}, {"retained_mass", ces.retained_mass}, {"horizon", cfg.horizon}};

    // -- leak
    note("leak");
    const double reach = max_fiber_length(*sys, box);
    const auto decay = leak_decay(*sys, *seed, reach, cfg.leak_generations);
    constants["leak_rate"] = decay.rate;
    check("leak_decay_rate", "srb", decay.rate >= cfg.leak.lambda0 - cfg.leak.eps0, decay.rate,
          cfg.leak.lambda0 - cfg.leak.eps0, ">=",
          "fit over generations " + std::to_string(decay.first) + ".." + std::to_string(decay.last));
    {
      Table t{"leak", {"generation", "leaked_fraction", "shell_bound", "boundary_reach_mass"}, {}, {}, {}};
      for (int g = 0; g < std::max(cfg.horizon, cfg.leak_generations); ++g) {
        const auto gi = static_cast<std::size_t>(g);
        const double leaked = g < cfg.horizon ? ces.leaked[gi] : std::nan("");
        const double shell = g < cfg.horizon ? ces.shell_mass[gi] : std::nan("");
        const double r = g >= 1 && g <= cfg.leak_generations ? decay.mass[gi - 1] : std::nan("");
        t.add({static_cast<double>(g), leaked, shell, r});
      }
      tables.push_back(t);
    }

    // -- densities p_n
    note("density");
    const auto idx = index_box(*sys, m, box, W);
    require(!idx.members.empty(), ErrorKind::coverage, "no particle of the Cesaro average lies in the box");
    const double ratio_bound = projection_ratio_bound(*sys, field, box) * C;
    const std::size_t n_eval = std::min(cfg.density_particles, idx.members.size());
    std::vector<std::optional<DensityEvaluation>> evals(n_eval);
    std::vector<std::size_t> eval_particle(n_eval);
    for (std::size_t j = 0; j < n_eval; ++j) eval_particle[j] = idx.members[j * idx.members.size() / n_eval];
    parallel_for(n_eval, W, [&](std::size_t b, std::size_t e) {
      for (std::size_t j = b; j < e; ++j) {
        try {
          evals[j] = density_pn(*sys, field, box, m, eval_particle[j], cfg.leak);
        } catch (const Error& err) {
          if (err.kind() != ErrorKind::partial_fiber) throw;
        }
      }
    });
    std::map<std::size_t, double> pn_map;
    double pn_min = std::numeric_limits<double>::infinity(), pn_max = 0.0, linear_dev = 0.0;
    std::size_t partial = 0;
    Table pn_table{"pn", {"particle", "generation", "p", "q_min", "q_max", "horizon"}, {}, {}, {}};
    for (std::size_t j = 0; j < n_eval; ++j) {
      if (!evals[j]) {
        ++partial;
        continue;
      }
      const auto& d = *evals[j];
      pn_map[eval_particle[j]] = d.p;
      pn_min = std::min(pn_min, d.p);
      pn_max = std::max(pn_max, d.p);
      linear_dev = std::max(linear_dev, std::abs(d.p - 1.0));
      pn_table.add({static_cast<double>(eval_particle[j]), static_cast<double>(d.generation), d.p, d.q_min, d.q_max,
                    static_cast<double>(d.horizon)});
    }
    tables.push_back(pn_table);
    require(!pn_map.empty(), ErrorKind::partial_fiber, "every evaluated particle sits on a partially covered fiber");
    constants["pn_min"] = pn_min;
    constants["pn_max"] = pn_max;
    constants["pn_ratio_bound"] = ratio_bound;
    const double pn_extreme = std::max(pn_max, 1.0 / pn_min);
    check("density_bounds", "srb", pn_extreme <= ratio_bound, pn_extreme, ratio_bound, "<=",
          std::to_string(pn_map.size()) + " particles evaluated, " + std::to_string(partial) +
              " on partially covered fibers; value = max(p, 1/p)");
    if (cfg.system == "linear_hyperbolic")
      check("linear_density_is_one", "srb", linear_dev <= cfg.tol.linear_density, linear_dev, cfg.tol.linear_density,
            "<=", "max |p_n - 1|");

    // -- cylinder sandwich
    note("cylinders");
    {
      std::map<std::vector<int>, double> nu;
      std::map<std::vector<int>, std::size_t> count;
      for (std::size_t j = 0; j < idx.members.size(); ++j) {
        nu[idx.where[j].bin] += m.weights[idx.members[j]];
        ++count[idx.where[j].bin];
      }
      std::vector<std::vector<int>> heavy;
      for (const auto& [bin, mass] : nu)
        if (mass >= 0.2 * idx.box_mass) heavy.push_back(bin);
      auto rng = make_stream(cfg.seed, "cylinders", 0);
      const double hw = box.rho0;
      const Eigen::Index k = box.k();
      double worst = 0.0;
      int violations = 0;
      for (int t = 0; t < cfg.cylinders && !heavy.empty(); ++t) {
        CylinderSet cyl;
        double nu_s = 0.0;
        for (const auto& b : heavy)
          if (uniform01(rng) < 0.7 || (b == heavy.back() && cyl.bins.empty())) {
            cyl.bins.push_back(b);
            nu_s += nu[b];
          }
        Vec lo(k), hi(k);
        for (Eigen::Index a = 0; a < k; ++a) {
          lo(a) = -hw + 1.6 * hw * uniform01(rng);
          hi(a) = std::min(hw, lo(a) + 0.4 * hw + 0.6 * hw * uniform01(rng));
        }
        cyl.boxes.push_back({lo, hi});
        const double leb = base_fraction(*sys, box, cyl, k == 1 ? 512 : 64);
        const double mu = cylinder_measure(m, idx, cyl);
        const double ratio = mu / (leb * nu_s);
        worst = std::max({worst, ratio, 1.0 / ratio});
        if (!(mu >= leb * nu_s / C && mu <= C * leb * nu_s)) ++violations;
      }
      stages["cylinders"] = {{"tested", heavy.empty() ? 0 : cfg.cylinders},
                             {"heavy_bins", heavy.size()},
                             {"violations", violations},
                             {"worst_ratio", worst}};
      if (cfg.cylinders > 0)
        check("cylinder_sandwich", "srb", !heavy.empty() && violations == 0, worst, C, "<=",
              std::to_string(cfg.cylinders) + " random cylinders; value = max(mu/(leb nu), leb nu/mu)");
    }

    // -- conditional densities
    note("conditional");
    const auto cond = conditional_density_report(*sys, m, box, idx, C, {}, &pn_map);
    const auto refine = partition_refinement_check(*sys, m, box, idx, C, 3);
    {
      nlohmann::json fibers = nlohmann::json::array();
      for (const auto& f : cond.fibers)
        fibers.push_back({{"bin", f.bin},
                          {"particles", f.particles},
                          {"mass", f.mass},
                          {"ratio_min", f.ratio_min},
                          {"ratio_max", f.ratio_max},
                          {"ks", f.ks},
                          {"largest_atom", f.largest_atom},
                          {"within", f.within}});
      nlohmann::json levels = nlohmann::json::array();
      for (const auto& l : refine.levels)
        levels.push_back({{"bin_width", l.bin_width}, {"fibers", l.fibers.size()}, {"violations", l.violations()},
                          {"verdict", l.verdict}});
      stages["conditional"] = {{"verdict", cond.verdict},
                               {"fibers", fibers},
                               {"skipped", cond.skipped},
                               {"box_mass", cond.box_mass},
                               {"shell_mass", cond.shell_mass},
                               {"refinement", levels},
                               {"refinement_monotone", refine.monotone},
                               {"refinement_stable", refine.stable}};
    }
    check("conditional_densities", "srb", cond.verdict == "consistent", static_cast<double>(cond.violations()), 0.0,
          "<=", std::to_string(cond.fibers.size()) + " fibers retained, verdict " + cond.verdict);
    check("partition_refinement", "srb", refine.monotone && refine.stable,
          static_cast<double>(refine.levels.back().violations()), 0.0, "<=", "3 dyadic refinement levels");
    {
      // Conditional density histograms (first u-coordinate) per retained fiber.
      const int bins = 16;
      const double hw = box.rho0;
      Table t{"densities", {"fiber", "u_lo", "u_hi", "density"}, {}, {}, {}};
      for (std::size_t f = 0; f < cond.fibers.size(); ++f) {
        std::vector<CompensatedAccumulator> acc(bins);
        double total = 0.0;
        std::vector<double> w;
        for (std::size_t j = 0; j < idx.members.size(); ++j) {
          if (box.bin_of(idx.where[j].s, cond.bin_width) != cond.fibers[f].bin) continue;
          const double u = idx.where[j].b(0);
          auto b = static_cast<int>(std::floor((u + hw) / (2.0 * hw) * bins));
          b = std::clamp(b, 0, bins - 1);
          acc[static_cast<std::size_t>(b)].add(m.weights[idx.members[j]]);
          w.push_back(m.weights[idx.members[j]]);
        }
        total = compensated_sum(w);
        for (int b = 0; b < bins; ++b) {
          const double lo = -hw + 2.0 * hw * b / bins, hi = -hw + 2.0 * hw * (b + 1) / bins;
          t.add({static_cast<double>(f), lo, hi, acc[static_cast<std::size_t>(b)].value() / total * bins});
        }
      }
      tables.push_back(t);
    }

    // -- marginal against the Ulam density of the base map
    note("marginal");
    {
      std::function<double(const Vec&)> obs;
      std::function<double(double)> base_map;
      double lo = 0.0, hi = 1.0;
      std::string what;
      if (detail::is_solenoid(cfg.system)) {
        obs = [](const Vec& p) { return std::atan2(p(1), p(0)); };
        base_map = [](double t) { return 2.0 * t; };
        lo = -std::numbers::pi;
        hi = std::numbers::pi;
        what = "theta_marginal_tv";
      } else {
        const double a0 = cfg.parameters.list("expansion", {2.0}).front();
        obs = [](const Vec& p) { return p(0); };
        base_map = [a0](double t) { return a0 * t; };
        what = "u_marginal_tv";
      }
      const std::size_t bins = 1024;
      const auto h = weighted_histogram(m, obs, lo, hi, bins);
      const auto u = ulam_invariant_density(base_map, bins);
      const double tv = total_variation(h, u);
      // Expected TV of an exact sample of size N_eff = 1 / sum w^2 from u alone:
      // 0.5 sqrt(2 / (pi N_eff)) sum_b sqrt(u_b), a floor no bias correction removes.
      double w2 = 0.0, root = 0.0;
      for (double w : m.weights) w2 += w * w;
      for (double x : u) root += std::sqrt(x);
      const double floor = 0.5 * std::sqrt(2.0 * w2 / std::numbers::pi) * root;
      constants["marginal_tv"] = tv;
      constants["marginal_tv_sampling_floor"] = floor;
      check(what, "acceptance", tv <= cfg.tol.marginal_tv, tv, cfg.tol.marginal_tv, "<=",
            "total variation of the Cesaro marginal against the Ulam fixed density, 1024 bins; sampling floor " +
                format_double(floor));
      Table t{"marginals", {"lo", "hi", "empirical", "ulam"}, {}, {}, {}};
      for (std::size_t b = 0; b < bins; ++b)
        t.add({lo + (hi - lo) * static_cast<double>(b) / bins, lo + (hi - lo) * static_cast<double>(b + 1) / bins, h[b],
               u[b]});
      tables.push_back(t);
      if (cfg.system == "linear_hyperbolic") {
        double spread = 0.0;
        const double mu_max = [&] {
          const auto c = cfg.parameters.list("contraction", {0.5});
          return *std::max_element(c.begin(), c.end());
        }();
        for (std::size_t i = 0; i < m.size(); ++i)
          for (Eigen::Index a = sys->unstable_dim(); a < static_cast<Eigen::Index>(sys->dim()); ++a)
            spread = std::max(spread, std::abs(m.points(a, static_cast<Eigen::Index>(i))));
        // Contraction toward s = 0 over the horizon; seed discs sit on s = 0 up to the transient's residue.
        const double bound = std::pow(mu_max, cfg.horizon) * sys->trapping_diameter();
        check("cs_spread", "acceptance", spread <= bound, spread, bound, "<=",
              "max |s| over the Cesaro average against mu^n diam(U)");
      }
    }

    // -- portmanteau on a coordinate cube around the box anchor, and the LP trace
    note("portmanteau");
    const BoxUnion V = detail::cube_around(*sys, anchor, box.rho0);
    Table conv{"convergence", {"horizon", "mass_V", "inner_V", "outer_V", "lp_to_next", "lp_grid"}, {}, {}, {}};
    {
      const Metric metric = system_metric(*sys);
      std::vector<int> hs;
      for (int j = 1; j <= 10; ++j) {
        const int h = std::max(1, static_cast<int>(std::lround(j * cfg.horizon / 10.0)));
        if (hs.empty() || hs.back() != h) hs.push_back(h);
      }
      std::map<int, double> lp_next, lp_grid;
      nlohmann::json lp_trace = nlohmann::json::array();
      const auto dh = detail::dyadic_horizons(cfg.horizon);
      for (std::size_t i = 0; i + 1 < dh.size(); ++i) {
        const auto e = levy_prokhorov(as_weighted(cesaro_prefix(m, dh[i])), as_weighted(cesaro_prefix(m, dh[i + 1])),
                                      cfg.lp_resolution, metric);
        lp_next[dh[i]] = e.value;
        lp_grid[dh[i]] = e.grid_diameter;
        lp_trace.push_back({{"from", dh[i]}, {"to", dh[i + 1]}, {"lp", to_json(e)}});
      }
      stages["lp_trace"] = lp_trace;
      constants["lp_trace"] = lp_trace;
      if (hs.size() >= 10) {
        std::vector<WeightedPoints> seq;
        for (int h : hs) seq.push_back(as_weighted(cesaro_prefix(m, h)));
        const auto pr = portmanteau_check(seq, V, cfg.tol.portmanteau_shell, cfg.tol.portmanteau);
        stages["portmanteau"] = to_json(pr);
        stages["portmanteau"]["horizons"] = hs;
        stages["portmanteau"]["V"] = detail::box_union_json(V);
        constants["portmanteau_fluctuation"] = pr.fluctuation;
        check("portmanteau", "srb", pr.verdict == "converges on V", pr.fluctuation, cfg.tol.portmanteau, "<",
              "verdict: " + pr.verdict + "; boundary mass " + format_double(pr.boundary_mass));
        for (std::size_t i = 0; i < hs.size(); ++i) {
          const double nan = std::nan("");
          conv.add({static_cast<double>(hs[i]), pr.mass[i], pr.inner[i], pr.outer[i],
                    lp_next.count(hs[i]) ? lp_next[hs[i]] : nan, lp_grid.count(hs[i]) ? lp_grid[hs[i]] : nan});
        }
      } else {
        stages["portmanteau"] = {{"skipped", "horizon below 10 gives fewer than 10 distinct prefix horizons"},
                                 {"V", detail::box_union_json(V)}};
        for (const auto& [h, v] : lp_next) conv.add({static_cast<double>(h), std::nan(""), std::nan(""), std::nan(""), v, lp_grid[h]});
      }
    }
    tables.push_back(conv);

    // -- summary table
    {
      Table t{"summary", {"value"}, "quantity", {}, {}};
      t.add({hyp.lambda0_estimate}, "lambda0_one_step");
      t.add({hyp.lambda0_multistep}, "lambda0_multistep");
      t.add({cfg.leak.lambda0}, "lambda0_configured");
      t.add({cfg.leak.eps0}, "eps0");
      t.add({cfg.leak.gamma0}, "gamma0_configured");
      t.add({gamma0}, "gamma0_measured");
      t.add({min_rate}, "backward_contraction_rate");
      t.add({M}, "M");
      t.add({C}, "C");
      t.add({decay.rate}, "leak_decay_rate");
      t.add({ces.retained_mass}, "retained_mass");
      t.add({static_cast<double>(box.fibers.size())}, "box_fibers");
      t.add({box.rho0}, "rho0");
      t.add({pn_min}, "pn_min");
      t.add({pn_max}, "pn_max");
      t.add({constants["marginal_tv"].get<double>()}, "marginal_tv");
      for (const auto& e : stages["lp_trace"])
        t.add({e["lp"]["value"].get<double>()},
              "lp_n" + std::to_string(e["from"].get<int>()) + "_n" + std::to_string(e["to"].get<int>()));
      tables.insert(tables.begin(), t);
    }
    outcome.status = "complete";
  } catch (const Error& e) {
    outcome.status = "error";
    outcome.failed_stage = stage;
    outcome.message = std::string(to_string(e.kind())) + ": " + e.what();
    outcome.exit_code = exit_code_for(e.kind());
    if (log) *log << "[srblab] stage " << stage << " failed: " << outcome.message << std::endl;
  } catch (const std::exception& e) {
    outcome.status = "error";
    outcome.failed_stage = stage;
    outcome.message = e.what();
    outcome.exit_code = kExitNumerical;
    if (log) *log << "[srblab] stage " << stage << " failed: " << outcome.message << std::endl;
  }

  try {
    if (outcome.status == "complete") {
      nlohmann::json tj = nlohmann::json::object();
      for (const auto& t : tables) tj[t.name] = to_json(t);
      const nlohmann::json run = {{"schema", kRunSchema}, {"config", config_json(cfg)}, {"stages", stages}, {"tables", tj}};
      detail::write_text(dir / "run.json", run.dump(2) + "\n");
    }
    write_summary();
  } catch (const Error& e) {
    outcome.status = "error";
    outcome.failed_stage = "output";
    outcome.message = e.what();
    outcome.exit_code = kExitValidation;
  }
  return outcome;
}

// ---------------------------------------------------------------------------
// Reports and distances

inline const std::vector<std::string>& report_tables() {
  static const std::vector<std::string> names = {"summary", "marginals", "densities", "convergence", "leak", "pn"};
  return names;
}

namespace detail {

inline nlohmann::json load_complete_run(const std::filesystem::path& dir) {
  const auto summary = nlohmann::json::parse(read_text(dir / "summary.json"));
  require(summary.value("status", "") == "complete", ErrorKind::missing_stage,
          "run in " + dir.string() + " did not complete (status " + summary.value("status", "?") + ")");
  auto run = nlohmann::json::parse(read_text(dir / "run.json"));
  require(run.value("schema", "") == kRunSchema, ErrorKind::io, "unexpected run schema in " + dir.string());
  for (const auto& name : report_tables())
    require(run["tables"].contains(name), ErrorKind::missing_stage, "run record lacks the '" + name + "' table");
  run["summary"] = summary;
  return run;
}

}  // namespace detail

/// Writes the six report files into DIR/report: summary plus the marginals,
/// densities, convergence, leak and pn tables. "md" renders the summary as
/// markdown and the rest as CSV; "csv" and "json" render every table in that
/// format with identical numbers. Returns the written paths.
inline std::vector<std::filesystem::path> emit_report(const std::filesystem::path& dir, const std::string& format) {
  require(format == "md" || format == "json" || format == "csv", ErrorKind::invalid_input,
          "report format must be md, json or csv");
  const auto run = detail::load_complete_run(dir);
  const auto out_dir = dir / "report";
  std::filesystem::create_directories(out_dir);
  std::vector<std::filesystem::path> written;
  for (const auto& name : report_tables()) {
    const Table t = table_from_json(run["tables"][name]);
    if (format == "json") {
      const nlohmann::json j = {{"schema", kReportSchema}, {"table", to_json(t)}};
      written.push_back(out_dir / (name + ".json"));
      detail::write_text(written.back(), j.dump(2) + "\n");
    } else if (format == "csv" || name != "summary") {
      written.push_back(out_dir / (name + ".csv"));
      detail::write_text(written.back(), table_csv(t));
    } else {
      const auto& s = run["summary"];
      std::ostringstream md;
      md << "<!-- schema " << kReportSchema << " -->\n";
      md << "# srblab run: " << s["system"].get<std::string>() << "\n\n";
      md << "Verdict: **" << s["verdict"].get<std::string>() << "** (exit code " << s["exit_code"].get<int>()
         << ")\n\n";
      md << "Horizon n = " << s["horizon"].get<int>() << ", particles N = " << s["particles"].get<std::size_t>()
         << ", seed " << s["seed"].get<std::uint64_t>() << ".\n\n";
      md << "## Constants\n\n" << table_markdown(t) << "\n";
      md << "## Checks\n\n| check | group | passed | value | threshold |\n|---|---|---|---|---|\n";
      for (const auto& c : s["checks"]) {
        md << "| " << c["name"].get<std::string>() << " | " << c["group"].get<std::string>() << " | "
           << (c["passed"].get<bool>() ? "yes" : "**no**") << " | " << format_double(json_number(c["value"]))
           << " | " << c["relation"].get<std::string>() << " " << format_double(json_number(c["threshold"]))
           << " |\n";
      }
      md << "\n## Levy-Prokhorov trace\n\n| from n | to n | LP | grid diameter |\n|---|---|---|---|\n";
      for (const auto& e : run["stages"]["lp_trace"])
        md << "| " << e["from"].get<int>() << " | " << e["to"].get<int>() << " | "
           << format_double(json_number(e["lp"]["value"])) << " | "
           << format_double(json_number(e["lp"]["grid_diameter"])) << " |\n";
      written.push_back(out_dir / "summary.md");
      detail::write_text(written.back(), md.str());
    }
  }
  return written;
}

/// LP and W1 distances between the Cesaro averages at horizons n/8, n/4,
/// n/2 and n (prefixes of the stored measure), consecutive and to the final
/// one, plus set discrepancies on V and on half-boxes. Writes
/// DIR/distances.json and DIR/distances.csv.
inline nlohmann::json compute_distances(const std::filesystem::path& dir, unsigned workers = 1) {
  const auto run = detail::load_complete_run(dir);
  const auto snap = read_measure_binary((dir / "measure.bin").string());
  const RunConfig cfg = parse_config(run["config"]);
  const SystemPtr sys = builtin_system(cfg.system, cfg.parameters, cfg.norm);
  const Metric metric = system_metric(*sys);
  const BoxUnion V = detail::box_union_from_json(run["stages"]["portmanteau"]["V"]);
  const auto hs = detail::dyadic_horizons(cfg.horizon);
  std::vector<WeightedPoints> ms;
  for (int h : hs) ms.push_back(detail::prefix_points(snap, h));
  std::vector<std::pair<std::size_t, std::size_t>> jobs;
  for (std::size_t i = 0; i + 1 < hs.size(); ++i) jobs.push_back({i, i + 1});
  for (std::size_t i = 0; i + 2 < hs.size(); ++i) jobs.push_back({i, hs.size() - 1});
  std::vector<MeasureDistanceReport> reps(jobs.size());
  parallel_for(jobs.size(), workers, [&](std::size_t b, std::size_t e) {
    for (std::size_t j = b; j < e; ++j) {
      const auto [a, c] = jobs[j];
      reps[j] = detail::distance_report(ms[a], ms[c], "n" + std::to_string(hs[a]), "n" + std::to_string(hs[c]), V,
                                        metric, cfg.lp_resolution);
    }
  });
  nlohmann::json out = {{"schema", kDistancesSchema}, {"horizons", hs}, {"pairs", nlohmann::json::array()}};
  Table t{"distances", {"from", "to", "lp", "lp_grid", "w1"}, {}, {}, {}};
  for (std::size_t j = 0; j < jobs.size(); ++j) {
    out["pairs"].push_back(to_json(reps[j]));
    t.add({static_cast<double>(hs[jobs[j].first]), static_cast<double>(hs[jobs[j].second]), reps[j].lp.value,
           reps[j].lp.grid_diameter, reps[j].w1});
  }
  detail::write_text(dir / "distances.json", out.dump(2) + "\n");
  detail::write_text(dir / "distances.csv", table_csv(t));
  return out;
}

}  // namespace srblab
