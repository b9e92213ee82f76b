// Copyright (C) 2026 ThinKV Authors
// SPDX-License-Identifier: Apache-2.0

#include "thinkv/cli.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include "thinkv/errors.hpp"
#include "thinkv/sim.hpp"
#include "thinkv/thought.hpp"

#include "CLI11.hpp"
#include "json.hpp"

namespace thinkv::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string iso_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path);
  if (!out)
    throw Error(ErrorKind::kConfig, "cannot write " + path.string());
  out << content;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kConfig, "cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json make_manifest(const std::string& command, const json& config,
                   std::uint64_t seed, const std::vector<std::string>& inputs,
                   const std::vector<std::string>& outputs) {
  json m;
  m["artifact_version"] = kArtifactVersion;
  m["command"] = command;
  m["created_utc"] = iso_timestamp();
  m["seed"] = seed;
  m["config"] = config;
  m["inputs"] = inputs;
  m["outputs"] = outputs;
  return m;
}

int sweep_threads() {
  if (const char* env = std::getenv("THINKV_SIM_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? static_cast<int>(hw) : 1;
}

std::string metrics_csv_header() {
  return "method,seed,budget,tau,group_size,block_size,num_thoughts,"
         "avg_bits_per_token,memory_footprint_fraction,compression_ratio,"
         "eviction_call_fraction,recall_at_10_mean,attention_output_error_mean,"
         "generated_length,moved_token_slots";
}

std::string metrics_csv_row(const SimConfig& cfg, const RunMetrics& m) {
  std::ostringstream row;
  auto num = [](double v) { return json(v).dump(); };
  row << m.method << "," << cfg.seed << "," << cfg.budget << "," << cfg.tau
      << "," << cfg.group_size << "," << cfg.block_size << ","
      << cfg.num_thoughts << "," << num(m.avg_bits_per_token) << ","
      << num(m.memory_footprint_fraction) << "," << num(m.compression_ratio)
      << "," << num(m.eviction_call_fraction) << ","
      << num(m.recall_at_10_mean) << ","
      << num(m.attention_output_error_mean) << "," << m.generated_length
      << "," << m.moved_token_slots;
  return row.str();
}

// -------------------------------------------------------------------------
// calibrate
// -------------------------------------------------------------------------

struct CalibrateArgs {
  std::string trace_path;
  std::string synthetic_spec;
  int num_thoughts = 3;
  int max_layers = 0;
  std::string out_path = "calibration.json";
};

int cmd_calibrate(const CalibrateArgs& args) {
  SparsityTrace trace;
  std::vector<std::string> inputs;
  std::uint64_t seed = 0;
  if (!args.synthetic_spec.empty()) {
    const auto spec = SyntheticTraceSpec::from_json_string(args.synthetic_spec);
    seed = spec.seed;
    trace = generate_synthetic_trace(spec);
  } else if (!args.trace_path.empty()) {
    trace = SparsityTrace::load_jsonl(args.trace_path);
    inputs.push_back(args.trace_path);
  } else {
    throw Error(ErrorKind::kConfig, "calibrate needs --trace or --synthetic");
  }

  CalibrationOptions options;
  options.num_thoughts = args.num_thoughts;
  options.max_layers = args.max_layers;
  CalibrationResult result;
  try {
    result = calibrate(trace, options);
  } catch (const CalibrationError& e) {
    std::cerr << "calibration failed: " << e.what() << "\n";
    std::cerr << "per-layer mode counts (one entry per prompt):\n";
    for (const auto& [layer, counts] : e.mode_counts_per_layer()) {
      std::cerr << "  layer " << layer << ":";
      for (int c : counts) std::cerr << " " << c;
      std::cerr << "\n";
    }
    return e.exit_code();
  }

  result.save(args.out_path);
  json config{{"num_thoughts", args.num_thoughts},
              {"max_layers", args.max_layers}};
  if (!args.synthetic_spec.empty())
    config["synthetic"] = json::parse(args.synthetic_spec);
  const json manifest = make_manifest("calibrate", config, seed, inputs,
                                      {args.out_path});
  write_file(args.out_path + ".manifest.json", manifest.dump(2) + "\n");
  std::cout << "calibration written to " << args.out_path << " (layers="
            << result.layers.size() << ", thresholds="
            << result.thresholds.size() << ")\n";
  return 0;
}

// -------------------------------------------------------------------------
// simulate
// -------------------------------------------------------------------------

struct SimulateArgs {
  std::string config_path;
  std::string out_dir = "run";
  bool compare = false;
  std::vector<std::int64_t> sweep_budgets;
  std::string emit_trace_path;
  // overrides; -1 / empty = keep config value
  std::int64_t seed = -1;
  std::int64_t budget = -1;
  std::int64_t tau = -1;
  std::int64_t group_size = -1;
  std::int64_t block_size = -1;
  int num_thoughts = -1;
  std::string precision_map;
  std::string scripted_trace_path;
  std::string calibration_path;
  std::int64_t max_gen_len = -1;
  std::int64_t prompt_len = -1;
};

SimConfig build_config(const SimulateArgs& args) {
  SimConfig cfg;
  if (!args.config_path.empty()) {
    json j;
    try {
      j = json::parse(read_file(args.config_path));
    } catch (const json::exception& e) {
      throw Error(ErrorKind::kParse,
                  args.config_path + ": " + std::string(e.what()));
    }
    cfg = SimConfig::from_json(j);
  }
  if (args.seed >= 0) cfg.seed = static_cast<std::uint64_t>(args.seed);
  if (args.budget >= 0) cfg.budget = args.budget;
  if (args.tau >= 0) cfg.tau = args.tau;
  if (args.group_size >= 0) cfg.group_size = args.group_size;
  if (args.block_size >= 0) cfg.block_size = args.block_size;
  if (args.num_thoughts >= 0) cfg.num_thoughts = args.num_thoughts;
  if (args.max_gen_len >= 0) cfg.max_gen_len = args.max_gen_len;
  if (args.prompt_len >= 0) cfg.prompt_len = args.prompt_len;
  if (!args.precision_map.empty())
    cfg.psi = PrecisionMap::parse(args.precision_map, cfg.num_thoughts);
  if (!args.scripted_trace_path.empty()) {
    json j;
    try {
      j = json::parse(read_file(args.scripted_trace_path));
    } catch (const json::exception& e) {
      throw Error(ErrorKind::kParse,
                  args.scripted_trace_path + ": " + std::string(e.what()));
    }
    cfg.scripted = ScriptedTrace::from_json(j, cfg.num_thoughts);
  }
  if (!args.calibration_path.empty())
    cfg.calibration = CalibrationResult::load(args.calibration_path);
  return cfg;
}

void validate_or_throw(const SimConfig& cfg) {
  const auto errors = cfg.validate();
  if (!errors.empty()) {
    std::string what = "invalid simulation config:";
    for (const auto& e : errors) what += "\n  - " + e;
    throw Error(ErrorKind::kConfig, what);
  }
  for (const auto& w : cfg.warnings()) std::cerr << "warning: " << w << "\n";
}

void write_run_artifacts(const fs::path& dir, const SimConfig& cfg,
                         const RunOutput& run,
                         const std::vector<RunOutput>& baselines) {
  fs::create_directories(dir);
  write_file(dir / "metrics.json", run.metrics.to_json().dump(2) + "\n");
  write_file(dir / "events.jsonl", run.events_jsonl);
  json tables{{"layers", run.final_block_tables},
              {"segments", run.final_segments}};
  if (!run.step_dumps.empty()) tables["step_dumps"] = run.step_dumps;
  write_file(dir / "blocktable_final.json", tables.dump(2) + "\n");
  std::vector<std::string> outputs{"metrics.json", "events.jsonl",
                                   "blocktable_final.json"};
  if (!baselines.empty()) {
    std::string csv = metrics_csv_header() + "\n";
    csv += metrics_csv_row(cfg, run.metrics) + "\n";
    for (const auto& b : baselines) csv += metrics_csv_row(cfg, b.metrics) + "\n";
    write_file(dir / "compare.csv", csv);
    for (const auto& b : baselines) {
      write_file(dir / ("metrics." + b.metrics.method + ".json"),
                 b.metrics.to_json().dump(2) + "\n");
      outputs.push_back("metrics." + b.metrics.method + ".json");
    }
    outputs.push_back("compare.csv");
  }
  const json manifest =
      make_manifest("simulate", cfg.to_json(), cfg.seed, {}, outputs);
  write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

int cmd_simulate(const SimulateArgs& args) {
  SimConfig cfg = build_config(args);
  validate_or_throw(cfg);
  const fs::path out_dir(args.out_dir);

  if (!args.emit_trace_path.empty()) {
    const auto record = collect_sparsity_record(cfg);
    json j = json::object();
    for (std::size_t l = 0; l < record.size(); ++l)
      j[std::to_string(l)] = record[l];
    std::ofstream out(args.emit_trace_path, std::ios::app);
    if (!out)
      throw Error(ErrorKind::kConfig,
                  "cannot write trace " + args.emit_trace_path);
    out << j.dump() << "\n";
    std::cout << "sparsity record appended to " << args.emit_trace_path << "\n";
  }

  if (!args.sweep_budgets.empty()) {
    std::vector<std::int64_t> budgets = args.sweep_budgets;
    std::sort(budgets.begin(), budgets.end());
    std::vector<SimConfig> configs;
    for (std::int64_t k : budgets) {
      SimConfig c = cfg;
      c.budget = k;
      validate_or_throw(c);
      configs.push_back(std::move(c));
    }
    std::vector<RunOutput> runs(configs.size());
    const int workers =
        std::min<int>(sweep_threads(), static_cast<int>(configs.size()));
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> failures(workers);
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&, w]() {
        try {
          for (std::size_t i = next.fetch_add(1); i < configs.size();
               i = next.fetch_add(1)) {
            runs[i] = generation_loop(configs[i]);
          }
        } catch (...) {
          failures[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (const auto& f : failures) {
      if (f) std::rethrow_exception(f);
    }
    fs::create_directories(out_dir);
    std::string csv = metrics_csv_header() + "\n";
    for (std::size_t i = 0; i < configs.size(); ++i) {
      csv += metrics_csv_row(configs[i], runs[i].metrics) + "\n";
      write_run_artifacts(out_dir / ("budget_" + std::to_string(budgets[i])),
                          configs[i], runs[i], {});
    }
    write_file(out_dir / "sweep.csv", csv);
    const json manifest = make_manifest("simulate-sweep", cfg.to_json(),
                                        cfg.seed, {}, {"sweep.csv"});
    write_file(out_dir / "manifest.json", manifest.dump(2) + "\n");
    std::cout << "sweep over " << budgets.size() << " budgets written to "
              << out_dir.string() << "\n";
    return 0;
  }

  if (args.compare) {
    const auto runs = run_compare(cfg);
    write_run_artifacts(out_dir, cfg, runs[0],
                        {runs.begin() + 1, runs.end()});
  } else {
    const RunOutput run = generation_loop(cfg);
    write_run_artifacts(out_dir, cfg, run, {});
  }
  std::cout << "run artifacts written to " << out_dir.string() << "\n";
  return 0;
}

// -------------------------------------------------------------------------
// report
// -------------------------------------------------------------------------

struct LoadedRun {
  fs::path dir;
  json manifest;
  RunMetrics metrics;
  std::vector<json> events;
};

LoadedRun load_run(const fs::path& dir) {
  LoadedRun run;
  run.dir = dir;
  try {
    run.manifest = json::parse(read_file(dir / "manifest.json"));
    run.metrics = RunMetrics::from_json(json::parse(read_file(dir / "metrics.json")));
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kIntegrity,
                dir.string() + ": unreadable run artifacts: " + e.what());
  }
  const fs::path events = dir / "events.jsonl";
  if (fs::exists(events)) {
    std::ifstream in(events);
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty()) run.events.push_back(json::parse(line));
    }
  }
  return run;
}

struct ReportArgs {
  std::vector<std::string> run_dirs;
  std::string out_dir = "report";
};

int cmd_report(const ReportArgs& args) {
  if (args.run_dirs.empty())
    throw Error(ErrorKind::kConfig, "report needs at least one run directory");
  std::vector<LoadedRun> runs;
  std::string version;
  for (const auto& d : args.run_dirs) {
    LoadedRun run = load_run(d);
    const std::string v = run.manifest.value("artifact_version", "?");
    if (version.empty()) version = v;
    if (v != version) {
      throw Error(ErrorKind::kConfig,
                  "mixed artifact versions across runs: " + version + " vs " +
                      v + " (" + d + ")");
    }
    runs.push_back(std::move(run));
  }

  const fs::path out(args.out_dir);
  fs::create_directories(out);

  // Eviction curves: retained totals around each eviction event.
  {
    std::string csv = "run,step,layer,trigger,retained_before,retained_total\n";
    for (const auto& run : runs) {
      for (const auto& e : run.events) {
        if (e.value("type", "") != "evict") continue;
        csv += run.dir.string() + "," + std::to_string(e["step"].get<std::int64_t>()) +
               "," + std::to_string(e["layer"].get<int>()) + "," +
               e["trigger"].get<std::string>() + "," +
               std::to_string(e["retained_before"].get<std::int64_t>()) + "," +
               std::to_string(e["retained_total"].get<std::int64_t>()) + "\n";
      }
    }
    write_file(out / "eviction_curve.csv", csv);
  }

  // Recall curves with cross-run mean/stddev per step index.
  {
    std::size_t max_len = 0;
    for (const auto& run : runs)
      max_len = std::max(max_len, run.metrics.recall_at_10.size());
    std::string csv = "step_index,mean,stddev,count\n";
    for (std::size_t i = 0; i < max_len; ++i) {
      double sum = 0.0, sq = 0.0;
      int count = 0;
      for (const auto& run : runs) {
        if (i < run.metrics.recall_at_10.size()) {
          const double v = run.metrics.recall_at_10[i];
          sum += v;
          sq += v * v;
          ++count;
        }
      }
      const double mean = sum / count;
      const double var = std::max(0.0, sq / count - mean * mean);
      csv += std::to_string(i) + "," + json(mean).dump() + "," +
             json(std::sqrt(var)).dump() + "," + std::to_string(count) + "\n";
    }
    write_file(out / "recall_curve.csv", csv);
  }

  // Footprint vs budget, aggregated over runs sharing a budget.
  {
    std::map<std::int64_t, std::vector<double>> by_budget;
    for (const auto& run : runs) {
      const std::int64_t budget =
          run.manifest["config"].value("budget", std::int64_t{0});
      by_budget[budget].push_back(run.metrics.memory_footprint_fraction);
    }
    std::string csv = "budget,mean,stddev,count\n";
    for (const auto& [budget, values] : by_budget) {
      double sum = 0.0, sq = 0.0;
      for (double v : values) {
        sum += v;
        sq += v * v;
      }
      const double mean = sum / values.size();
      const double var = std::max(0.0, sq / values.size() - mean * mean);
      csv += std::to_string(budget) + "," + json(mean).dump() + "," +
             json(std::sqrt(var)).dump() + "," + std::to_string(values.size()) +
             "\n";
    }
    write_file(out / "footprint_vs_budget.csv", csv);
  }

  // Summary with aggregate statistics.
  {
    json summary;
    summary["artifact_version"] = version;
    json per_run = json::array();
    double recall_sum = 0.0, recall_sq = 0.0;
    for (const auto& run : runs) {
      per_run.push_back(json{{"dir", run.dir.string()},
                             {"method", run.metrics.method},
                             {"seed", run.manifest.value("seed", 0)},
                             {"recall_at_10_mean", run.metrics.recall_at_10_mean},
                             {"memory_footprint_fraction",
                              run.metrics.memory_footprint_fraction},
                             {"eviction_call_fraction",
                              run.metrics.eviction_call_fraction}});
      recall_sum += run.metrics.recall_at_10_mean;
      recall_sq += run.metrics.recall_at_10_mean * run.metrics.recall_at_10_mean;
    }
    summary["runs"] = per_run;
    const double mean = recall_sum / runs.size();
    summary["recall_at_10_mean"] = mean;
    summary["recall_at_10_stddev"] =
        std::sqrt(std::max(0.0, recall_sq / runs.size() - mean * mean));
    write_file(out / "summary.json", summary.dump(2) + "\n");
  }
  std::cout << "report written to " << out.string() << "\n";
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"Thought-adaptive KV-cache compression simulator"};
  app.require_subcommand(1);

  CalibrateArgs cal;
  CLI::App* calibrate_cmd = app.add_subcommand(
      "calibrate", "Derive sparsity thresholds and the qualifying layer subset");
  calibrate_cmd->add_option("--trace", cal.trace_path,
                            "JSON-lines sparsity trace (one record per prompt)");
  calibrate_cmd->add_option("--synthetic", cal.synthetic_spec,
                            "JSON spec for a synthetic gaussian-mixture trace");
  calibrate_cmd->add_option("--num-thoughts", cal.num_thoughts,
                            "Thought category count");
  calibrate_cmd->add_option("--max-layers", cal.max_layers,
                            "Cap on the qualifying layer subset (0 = none)");
  calibrate_cmd->add_option("--out", cal.out_path, "Output calibration JSON");

  SimulateArgs sim;
  CLI::App* simulate_cmd =
      app.add_subcommand("simulate", "Run the compression pipeline");
  simulate_cmd->add_option("--config", sim.config_path, "Config JSON path");
  simulate_cmd->add_option("--out", sim.out_dir, "Output directory");
  simulate_cmd->add_flag("--compare", sim.compare,
                         "Also run the three reference policies");
  simulate_cmd->add_option("--sweep-budgets", sim.sweep_budgets,
                           "Run one simulation per budget and emit sweep.csv");
  simulate_cmd->add_option("--emit-sparsity-trace", sim.emit_trace_path,
                           "Append this run's full-precision sparsity record");
  simulate_cmd->add_option("--seed", sim.seed, "Run seed override");
  simulate_cmd->add_option("--budget", sim.budget, "Token budget override");
  simulate_cmd->add_option("--tau", sim.tau, "Refresh interval override");
  simulate_cmd->add_option("--group-size", sim.group_size, "Group size override");
  simulate_cmd->add_option("--block-size", sim.block_size, "Block size override");
  simulate_cmd->add_option("--num-thoughts", sim.num_thoughts,
                           "Thought category count override");
  simulate_cmd->add_option("--precision-map", sim.precision_map,
                           "Precision map override, e.g. R4E4T2");
  simulate_cmd->add_option("--scripted-trace", sim.scripted_trace_path,
                           "Scripted thought labels (JSON)");
  simulate_cmd->add_option("--calibration", sim.calibration_path,
                           "Calibration JSON path");
  simulate_cmd->add_option("--max-gen-len", sim.max_gen_len,
                           "Generated length override");
  simulate_cmd->add_option("--prompt-len", sim.prompt_len,
                           "Prompt length override");

  ReportArgs rep;
  CLI::App* report_cmd =
      app.add_subcommand("report", "Aggregate run directories into tables");
  report_cmd->add_option("runs", rep.run_dirs, "Run directories");
  report_cmd->add_option("--out", rep.out_dir, "Report output directory");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (calibrate_cmd->parsed()) return cmd_calibrate(cal);
    if (simulate_cmd->parsed()) return cmd_simulate(sim);
    if (report_cmd->parsed()) return cmd_report(rep);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace thinkv::cli
