#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "srblab/pipeline.hpp"

using namespace srblab;
namespace fs = std::filesystem;

namespace {

const fs::path kScratch = fs::temp_directory_path() / "srblab_cli_test";

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path write_config(const std::string& name, const nlohmann::json& j) {
  fs::create_directories(kScratch);
  const auto p = kScratch / (name + ".json");
  std::ofstream(p) << j.dump(2);
  return p;
}

nlohmann::json small_solenoid() {
  return {{"schema", kConfigSchema},
          {"system", {{"name", "solenoid"}, {"parameters", {{"lambda", 0.25}}}}},
          {"horizon", 12},
          {"particles", 24000},
          {"seed", 3},
          {"sample", {{"points", 60}, {"transient", 120}, {"history", 100}}},
          {"distortion", {{"chains", 6}, {"pairs_per_chain", 3}, {"horizon", 30}}},
          {"density_particles", 6},
          {"cylinders", 20},
          {"leak_generations", 20},
          {"lp_resolution", 64}};
}

int cli(const std::string& args, std::string* out = nullptr) {
  const auto log = kScratch / "cli_output.txt";
  fs::create_directories(kScratch);
  const int status = std::system((std::string(SRBLAB_CLI) + " " + args + " > " + log.string() + " 2>&1").c_str());
  if (out) *out = slurp(log);
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// One small run shared by the report tests.
const fs::path& small_run() {
  static const fs::path dir = [] {
    const auto d = kScratch / "small";
    fs::remove_all(d);
    const auto out = run_pipeline(parse_config(small_solenoid()), d);
    EXPECT_EQ(out.status, "complete") << out.message;
    return d;
  }();
  return dir;
}

std::vector<double> csv_numbers(const std::string& text) {
  std::vector<double> v;
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);  // schema
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    std::istringstream cells(line);
    std::string cell;
    while (std::getline(cells, cell, ','))
      if (!cell.empty() && (std::isdigit(static_cast<unsigned char>(cell[0])) || cell[0] == '-' || cell == "nan" ||
                            cell == "inf"))
        v.push_back(cell == "nan" ? std::nan("") : std::stod(cell));
  }
  return v;
}

}  // namespace

TEST(Config, RejectsUnknownKeysAndBadValues) {
  auto j = small_solenoid();
  j["partciles"] = 10;
  try {
    parse_config(j);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::config);
  }
  j = small_solenoid();
  j["rho0"] = 0.5;  // above disc_delta
  EXPECT_THROW(parse_config(j), Error);
  j = small_solenoid();
  j["particles"] = 5;  // fewer than generations
  EXPECT_THROW(parse_config(j), Error);
  j = small_solenoid();
  j["schema"] = "srblab-config 0";
  EXPECT_THROW(parse_config(j), Error);
  j = small_solenoid();
  j["system"]["name"] = "henon";
  try {
    parse_config(j);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::unknown_system);
  }
}

TEST(Config, RoundTripsThroughJson) {
  auto j = small_solenoid();
  j["norm"] = {{"p", 2.0}};
  j["tolerances"] = {{"marginal_tv", 0.05}};
  const auto c = parse_config(j);
  const auto again = parse_config(config_json(c));
  EXPECT_EQ(config_json(again), config_json(c));
  EXPECT_EQ(again.norm.p, 2.0);
  EXPECT_EQ(again.tol.marginal_tv, 0.05);
  EXPECT_EQ(again.parameters.scalar("lambda", 0.0), 0.25);
}

TEST(Config, OutputRootResolvesRelativePaths) {
  ::setenv("SRBLAB_OUTPUT_ROOT", "/tmp/root_a", 1);
  EXPECT_EQ(resolve_output("runs/x"), fs::path("/tmp/root_a/runs/x"));
  EXPECT_EQ(resolve_output("/abs/x"), fs::path("/abs/x"));
  ::unsetenv("SRBLAB_OUTPUT_ROOT");
  EXPECT_EQ(resolve_output("runs/x"), fs::path("runs/x"));
}

TEST(Cli, SolenoidLambdaAboveHalfIsParameterError) {
  auto j = small_solenoid();
  j["system"]["parameters"]["lambda"] = 0.6;
  const auto cfg = write_config("bad_lambda", j);
  std::string out;
  EXPECT_EQ(cli("validate --config " + cfg.string(), &out), 2);
  EXPECT_NE(out.find("parameter error"), std::string::npos) << out;
  EXPECT_EQ(cli("run --config " + cfg.string() + " --output " + (kScratch / "bad").string(), &out), 2);
  EXPECT_NE(out.find("parameter"), std::string::npos) << out;
  const auto summary = nlohmann::json::parse(slurp(kScratch / "bad" / "summary.json"));
  EXPECT_EQ(summary["status"], "error");
  EXPECT_EQ(summary["failed_stage"], "builtin_system");
}

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(cli("run"), 2);
  EXPECT_EQ(cli("report --run " + kScratch.string() + " --format pdf"), 2);
  EXPECT_EQ(cli("report --run " + (kScratch / "nonexistent").string()), 2);
  EXPECT_EQ(cli("distances --run " + (kScratch / "nonexistent").string()), 2);
}

TEST(Cli, ValidateAcceptsShippedConfigs) {
  for (const char* name : {"solenoid.json", "linear_hyperbolic.json"}) {
    EXPECT_EQ(cli(std::string("validate --config ") + SRBLAB_CONFIGS + "/" + name), 0) << name;
  }
  EXPECT_EQ(cli(std::string("validate --config ") + SRBLAB_CONFIGS + "/solenoid_bad_lambda.json"), 2);
}

TEST(Pipeline, SmallRunWritesEveryArtifact) {
  const auto& dir = small_run();
  for (const char* f : {"config.json", "run.json", "summary.json", "measure.bin"}) EXPECT_TRUE(fs::exists(dir / f)) << f;
  const auto s = nlohmann::json::parse(slurp(dir / "summary.json"));
  EXPECT_EQ(s["schema"], kSummarySchema);
  EXPECT_EQ(s["status"], "complete");
  // Too few particles per fiber for a conditional verdict; the run still completes.
  EXPECT_EQ(s["exit_code"], kExitVerdict);
  bool saw_portmanteau = false;
  for (const auto& c : s["checks"]) saw_portmanteau = saw_portmanteau || c["name"] == "portmanteau";
  EXPECT_TRUE(saw_portmanteau);
  const auto snap = read_measure_binary((dir / "measure.bin").string());
  EXPECT_EQ(*std::max_element(snap.generation.begin(), snap.generation.end()), 11);
}

TEST(Report, EachFormatWritesSixFilesWithSchema) {
  const auto& dir = small_run();
  for (const char* fmt : {"md", "json", "csv"}) {
    const auto files = emit_report(dir, fmt);
    ASSERT_EQ(files.size(), 6u) << fmt;
    for (const auto& f : files) {
      const auto text = slurp(f);
      EXPECT_NE(text.find(kReportSchema), std::string::npos) << f;
    }
  }
  EXPECT_TRUE(fs::exists(dir / "report" / "summary.md"));
}

TEST(Report, JsonAndCsvCarryIdenticalNumbers) {
  const auto& dir = small_run();
  emit_report(dir, "json");
  emit_report(dir, "csv");
  for (const auto& name : report_tables()) {
    const auto j = nlohmann::json::parse(slurp(dir / "report" / (name + ".json")));
    std::vector<double> from_json;
    for (const auto& row : j["table"]["rows"])
      for (const auto& v : row) from_json.push_back(v.is_null() ? std::nan("") : v.get<double>());
    const auto from_csv = csv_numbers(slurp(dir / "report" / (name + ".csv")));
    ASSERT_EQ(from_json.size(), from_csv.size()) << name;
    for (std::size_t i = 0; i < from_csv.size(); ++i) {
      if (std::isnan(from_json[i])) {
        EXPECT_TRUE(std::isnan(from_csv[i])) << name << " " << i;
      } else {
        EXPECT_EQ(from_json[i], from_csv[i]) << name << " " << i;
      }
    }
  }
}

TEST(Report, RegenerationIsByteIdentical) {
  const auto& dir = small_run();
  for (const char* fmt : {"md", "json", "csv"}) {
    std::vector<std::string> first;
    for (const auto& f : emit_report(dir, fmt)) first.push_back(slurp(f));
    const auto again = emit_report(dir, fmt);
    for (std::size_t i = 0; i < again.size(); ++i) EXPECT_EQ(slurp(again[i]), first[i]) << again[i];
  }
}

TEST(Report, IncompleteRunIsMissingStage) {
  const auto d = kScratch / "incomplete";
  fs::create_directories(d);
  std::ofstream(d / "summary.json") << R"({"schema": "srblab-summary 1", "status": "error"})";
  try {
    emit_report(d, "md");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::missing_stage);
  }
}

TEST(Distances, WritesJsonAndCsv) {
  const auto& dir = small_run();
  const auto j = compute_distances(dir);
  EXPECT_EQ(j["schema"], kDistancesSchema);
  EXPECT_EQ(j["horizons"], (std::vector<int>{1, 3, 6, 12}));
  EXPECT_EQ(j["pairs"].size(), 5u);  // 3 consecutive, 2 to the final horizon
  for (const auto& p : j["pairs"]) {
    EXPECT_GE(p["w1"].get<double>(), 0.0);
    EXPECT_TRUE(p["test_sets"].contains("V"));
  }
  EXPECT_TRUE(fs::exists(dir / "distances.csv"));
}

TEST(Determinism, SummaryIndependentOfWorkerCount) {
  auto j = small_solenoid();
  j["particles"] = 12000;
  std::string summaries[2], measures[2];
  for (int w = 0; w < 2; ++w) {
    j["workers"] = w == 0 ? 1 : 3;
    const auto d = kScratch / ("workers" + std::to_string(w));
    fs::remove_all(d);
    const auto out = run_pipeline(parse_config(j), d);
    ASSERT_EQ(out.status, "complete") << out.message;
    summaries[w] = slurp(d / "summary.json");
    measures[w] = slurp(d / "measure.bin");
  }
  EXPECT_EQ(summaries[0], summaries[1]);
  EXPECT_TRUE(measures[0] == measures[1]);
}
