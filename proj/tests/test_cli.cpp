// Copyright (C) 2026 ThinKV Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "thinkv/cli.hpp"
#include "thinkv/sim.hpp"
#include "thinkv/thought.hpp"

#include "json.hpp"

using namespace thinkv;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::path("cli_scratch") / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  std::string str(const std::string& rel = "") const {
    return rel.empty() ? path.string() : (path / rel).string();
  }
};

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write(const std::string& path, const std::string& content) {
  std::ofstream out(path);
  out << content;
}

json scripted_config(std::int64_t budget = 64) {
  return json{
      {"model",
       {{"num_layers", 2}, {"head_dim", 8}, {"num_heads", 2},
        {"gqa_group_size", 1}, {"embed_dim", 16}, {"seed", 5}}},
      {"tau", 16},
      {"group_size", 8},
      {"block_size", 4},
      {"budget", budget},
      {"schedule", {8, 4, 2}},
      {"num_thoughts", 3},
      {"max_gen_len", 96},
      {"prompt_len", 0},
      {"seed", 9},
      {"pool_blocks", 128},
      {"scripted_trace", {{"labels", {"R", "E", "T", "R", "E", "T"}}}}};
}

int run_cli(std::vector<std::string> args) { return thinkv::cli::run(args); }

}  // namespace

TEST_CASE("calibrate: synthetic trimodal spec recovers the valleys") {
  TempDir dir("calibrate_synth");
  const std::string out = dir.str("calibration.json");
  const int rc = run_cli({"calibrate", "--synthetic",
                          R"({"layers":4,"prompts":2,"samples_per_prompt":4000,"seed":3})",
                          "--num-thoughts", "3", "--out", out});
  CHECK(rc == 0);
  const CalibrationResult result = CalibrationResult::load(out);
  REQUIRE(result.thresholds.size() == 2);
  CHECK(std::abs(result.thresholds[0] - 0.35) <= 0.05);
  CHECK(std::abs(result.thresholds[1] - 0.65) <= 0.05);
  CHECK(result.layers.size() == 4);
  // manifest sits next to the output
  const json manifest = json::parse(slurp(out + ".manifest.json"));
  CHECK(manifest["command"] == "calibrate");
  CHECK(manifest["artifact_version"] == kArtifactVersion);
}

TEST_CASE("calibrate: unimodal trace exits with the calibration code") {
  TempDir dir("calibrate_unimodal");
  const int rc = run_cli({"calibrate", "--synthetic",
                          R"({"layers":3,"prompts":2,"samples_per_prompt":1000,)"
                          R"("unimodal_layers":[0,1,2],"seed":4})",
                          "--num-thoughts", "3", "--out", dir.str("cal.json")});
  CHECK(rc == 3);
  CHECK_FALSE(fs::exists(dir.str("cal.json")));
}

TEST_CASE("calibrate: single-category mode writes an empty threshold set") {
  TempDir dir("calibrate_single");
  const std::string out = dir.str("cal.json");
  const int rc = run_cli({"calibrate", "--synthetic",
                          R"({"layers":2,"prompts":1,"samples_per_prompt":400,"seed":5})",
                          "--num-thoughts", "1", "--out", out});
  CHECK(rc == 0);
  const CalibrationResult result = CalibrationResult::load(out);
  CHECK(result.thresholds.empty());
  CHECK(result.num_thoughts == 1);
  CHECK(result.layers.size() == 2);
}

TEST_CASE("calibrate from a trace file; malformed lines are located") {
  TempDir dir("calibrate_trace");
  SyntheticTraceSpec spec;
  spec.layers = 3;
  spec.prompts = 2;
  spec.samples_per_prompt = 3000;
  spec.seed = 6;
  generate_synthetic_trace(spec).save_jsonl(dir.str("trace.jsonl"));
  const int rc = run_cli({"calibrate", "--trace", dir.str("trace.jsonl"),
                          "--num-thoughts", "3", "--out", dir.str("cal.json")});
  CHECK(rc == 0);

  write(dir.str("bad.jsonl"), "{\"0\": [0.1, 0.2]}\nnot json at all\n");
  const int bad = run_cli({"calibrate", "--trace", dir.str("bad.jsonl"),
                           "--num-thoughts", "3", "--out", dir.str("cal2.json")});
  CHECK(bad == 2);
}

TEST_CASE("simulate: identical config and seed give byte-identical artifacts") {
  TempDir dir("simulate_determinism");
  write(dir.str("config.json"), scripted_config().dump(2));
  CHECK(run_cli({"simulate", "--config", dir.str("config.json"), "--out",
                 dir.str("run1")}) == 0);
  CHECK(run_cli({"simulate", "--config", dir.str("config.json"), "--out",
                 dir.str("run2")}) == 0);
  CHECK(slurp(dir.str("run1/metrics.json")) == slurp(dir.str("run2/metrics.json")));
  CHECK(slurp(dir.str("run1/events.jsonl")) == slurp(dir.str("run2/events.jsonl")));
  CHECK(slurp(dir.str("run1/blocktable_final.json")) ==
        slurp(dir.str("run2/blocktable_final.json")));

  // The manifest's embedded config reproduces the run bit for bit.
  const json manifest = json::parse(slurp(dir.str("run1/manifest.json")));
  write(dir.str("config_rt.json"), manifest["config"].dump(2));
  CHECK(run_cli({"simulate", "--config", dir.str("config_rt.json"), "--out",
                 dir.str("run3")}) == 0);
  CHECK(slurp(dir.str("run1/events.jsonl")) == slurp(dir.str("run3/events.jsonl")));
}

TEST_CASE("simulate: --compare emits four metric rows") {
  TempDir dir("simulate_compare");
  write(dir.str("config.json"), scripted_config(40).dump(2));
  CHECK(run_cli({"simulate", "--config", dir.str("config.json"), "--compare",
                 "--out", dir.str("run")}) == 0);
  const std::string csv = slurp(dir.str("run/compare.csv"));
  std::istringstream lines(csv);
  std::string line;
  std::vector<std::string> methods;
  std::getline(lines, line);  // header
  CHECK(line.find("method,") == 0);
  while (std::getline(lines, line)) {
    if (!line.empty()) methods.push_back(line.substr(0, line.find(',')));
  }
  REQUIRE(methods.size() == 4);
  CHECK(methods[0] == "thinkv");
  CHECK(methods[1] == "full_kv");
  CHECK(methods[2] == "recency_window_per_step");
  CHECK(methods[3] == "gather_compaction");
  CHECK(fs::exists(dir.str("run/metrics.full_kv.json")));
}

TEST_CASE("simulate: budget sweep writes one row per budget") {
  TempDir dir("simulate_sweep");
  write(dir.str("config.json"), scripted_config().dump(2));
  CHECK(run_cli({"simulate", "--config", dir.str("config.json"),
                 "--sweep-budgets", "64", "--sweep-budgets", "32",
                 "--sweep-budgets", "48", "--out", dir.str("sweep")}) == 0);
  const std::string csv = slurp(dir.str("sweep/sweep.csv"));
  std::istringstream lines(csv);
  std::string line;
  std::getline(lines, line);
  std::vector<std::int64_t> budgets;
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string field;
    std::getline(row, field, ',');  // method
    std::getline(row, field, ',');  // seed
    std::getline(row, field, ',');  // budget
    budgets.push_back(std::stoll(field));
  }
  CHECK(budgets == std::vector<std::int64_t>{32, 48, 64});  // ascending
  CHECK(fs::exists(dir.str("sweep/budget_32/metrics.json")));
}

TEST_CASE("simulate: config violations list everything and exit 2") {
  TempDir dir("simulate_invalid");
  json cfg = scripted_config();
  cfg["tau"] = 0;
  cfg["budget"] = 1;
  write(dir.str("config.json"), cfg.dump(2));
  CHECK(run_cli({"simulate", "--config", dir.str("config.json"), "--out",
                 dir.str("run")}) == 2);
  CHECK_FALSE(fs::exists(dir.str("run/metrics.json")));
}

TEST_CASE("simulate: overrides and sparsity-trace emission") {
  TempDir dir("simulate_overrides");
  write(dir.str("config.json"), scripted_config().dump(2));
  CHECK(run_cli({"simulate", "--config", dir.str("config.json"), "--budget",
                 "48", "--seed", "11", "--out", dir.str("run"),
                 "--emit-sparsity-trace", dir.str("trace.jsonl")}) == 0);
  const json manifest = json::parse(slurp(dir.str("run/manifest.json")));
  CHECK(manifest["config"]["budget"] == 48);
  CHECK(manifest["config"]["seed"] == 11);
  const std::string trace = slurp(dir.str("trace.jsonl"));
  const json record = json::parse(trace.substr(0, trace.find('\n')));
  CHECK(record.contains("0"));
  CHECK(record["0"].size() == 96);
}

TEST_CASE("report: aggregates runs, checks versions, monotone eviction curve") {
  TempDir dir("report");
  write(dir.str("config.json"), scripted_config(40).dump(2));
  CHECK(run_cli({"simulate", "--config", dir.str("config.json"), "--seed", "1",
                 "--out", dir.str("runA")}) == 0);
  CHECK(run_cli({"simulate", "--config", dir.str("config.json"), "--seed", "2",
                 "--out", dir.str("runB")}) == 0);
  CHECK(run_cli({"report", dir.str("runA"), dir.str("runB"), "--out",
                 dir.str("tables")}) == 0);

  const json summary = json::parse(slurp(dir.str("tables/summary.json")));
  CHECK(summary["runs"].size() == 2);
  CHECK(summary.contains("recall_at_10_stddev"));  // multi-seed spread

  // The retained-token count never increases at an eviction event.
  const std::string curve = slurp(dir.str("tables/eviction_curve.csv"));
  std::istringstream lines(curve);
  std::string line;
  std::getline(lines, line);
  int events = 0;
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string run, step, layer, trigger, before, after;
    std::getline(row, run, ',');
    std::getline(row, step, ',');
    std::getline(row, layer, ',');
    std::getline(row, trigger, ',');
    std::getline(row, before, ',');
    std::getline(row, after, ',');
    CHECK(std::stoll(after) <= std::stoll(before));
    ++events;
  }
  CHECK(events > 0);

  // A doctored manifest version must be rejected.
  json manifest = json::parse(slurp(dir.str("runB/manifest.json")));
  manifest["artifact_version"] = "0.0.0-other";
  write(dir.str("runB/manifest.json"), manifest.dump(2));
  CHECK(run_cli({"report", dir.str("runA"), dir.str("runB"), "--out",
                 dir.str("tables2")}) == 2);
}

TEST_CASE("report without runs exits with a config error") {
  CHECK(run_cli({"report"}) == 2);
}

TEST_CASE("simulated pool exhaustion exits with the out-of-memory code") {
  TempDir dir("simulate_oom");
  json cfg = scripted_config();
  cfg["pool_blocks"] = 2;  // two blocks cannot hold the run
  write(dir.str("config.json"), cfg.dump(2));
  CHECK(run_cli({"simulate", "--config", dir.str("config.json"), "--out",
                 dir.str("run")}) == 4);
}

TEST_CASE("corrupt run artifacts exit with the integrity code") {
  TempDir dir("report_corrupt");
  write(dir.str("config.json"), scripted_config().dump(2));
  CHECK(run_cli({"simulate", "--config", dir.str("config.json"), "--out",
                 dir.str("run")}) == 0);
  write(dir.str("run/metrics.json"), "{ this is not json");
  CHECK(run_cli({"report", dir.str("run"), "--out", dir.str("tables")}) == 5);
}
