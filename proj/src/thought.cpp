// Copyright (C) 2026 ThinKV Authors
// SPDX-License-Identifier: Apache-2.0

#include "thinkv/thought.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "thinkv/errors.hpp"
#include "thinkv/rng.hpp"

#include "json.hpp"

namespace thinkv {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Trace I/O
// ---------------------------------------------------------------------------

SparsityTrace SparsityTrace::load_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kConfig, "cannot open trace file " + path);
  SparsityTrace trace;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json record;
    try {
      record = json::parse(line);
    } catch (const json::exception& e) {
      throw Error(ErrorKind::kParse, path + " line " + std::to_string(line_no) +
                                         ": " + e.what());
    }
    if (!record.is_object()) {
      throw Error(ErrorKind::kParse, path + " line " + std::to_string(line_no) +
                                         ": expected a layer->values object");
    }
    int max_layer = -1;
    for (const auto& [key, _] : record.items())
      max_layer = std::max(max_layer, std::stoi(key));
    std::vector<std::vector<double>> layers(max_layer + 1);
    for (const auto& [key, value] : record.items()) {
      if (!value.is_array()) {
        throw Error(ErrorKind::kParse, path + " line " +
                                           std::to_string(line_no) +
                                           ": layer entry is not an array");
      }
      layers[std::stoi(key)] = value.get<std::vector<double>>();
    }
    trace.values.push_back(std::move(layers));
  }
  if (trace.values.empty())
    throw Error(ErrorKind::kConfig, "trace file " + path + " is empty");
  return trace;
}

std::string SparsityTrace::to_jsonl() const {
  std::string out;
  for (const auto& prompt : values) {
    json record = json::object();
    for (std::size_t l = 0; l < prompt.size(); ++l)
      record[std::to_string(l)] = prompt[l];
    out += record.dump();
    out += "\n";
  }
  return out;
}

void SparsityTrace::save_jsonl(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::kConfig, "cannot write trace file " + path);
  out << to_jsonl();
}

// ---------------------------------------------------------------------------
// Calibration result I/O
// ---------------------------------------------------------------------------

std::string CalibrationResult::to_json_string() const {
  json j;
  j["layers"] = layers;
  j["thresholds"] = thresholds;
  j["num_thoughts"] = num_thoughts;
  j["bandwidth_rule"] = bandwidth_rule;
  return j.dump(2);
}

CalibrationResult CalibrationResult::from_json_string(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kParse, std::string("calibration json: ") + e.what());
  }
  CalibrationResult r;
  r.layers = j.at("layers").get<std::vector<int>>();
  r.thresholds = j.at("thresholds").get<std::vector<double>>();
  r.num_thoughts = j.at("num_thoughts").get<int>();
  if (j.contains("bandwidth_rule")) r.bandwidth_rule = j["bandwidth_rule"];
  return r;
}

CalibrationResult CalibrationResult::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kConfig, "cannot open calibration " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json_string(ss.str());
}

void CalibrationResult::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::kConfig, "cannot write calibration " + path);
  out << to_json_string() << "\n";
}

// ---------------------------------------------------------------------------
// KDE
// ---------------------------------------------------------------------------

double kde_estimate(std::span<const double> samples, double bandwidth,
                    double x) {
  if (samples.size() < 2)
    throw Error(ErrorKind::kStructural, "kde_estimate: need >= 2 samples");
  if (!(bandwidth > 0.0))
    throw Error(ErrorKind::kStructural, "kde_estimate: bandwidth must be > 0");
  constexpr double kInvSqrt2Pi = 0.3989422804014327;
  double sum = 0.0;
  for (double s : samples) {
    const double t = (x - s) / bandwidth;
    sum += std::exp(-0.5 * t * t);
  }
  return kInvSqrt2Pi * sum /
         (static_cast<double>(samples.size()) * bandwidth);
}

double scott_bandwidth(std::span<const double> samples) {
  const double n = static_cast<double>(samples.size());
  double mean = 0.0;
  for (double s : samples) mean += s;
  mean /= n;
  double var = 0.0;
  for (double s : samples) var += (s - mean) * (s - mean);
  var /= n;
  const double h = std::sqrt(var) * std::pow(n, -0.2);
  // Degenerate (constant) samples would zero the bandwidth; keep the scan
  // well-defined with a floor below the 512-point grid spacing.
  return std::max(h, 1e-4);
}

ModeScan find_modes_and_minima(std::span<const double> samples,
                               double bandwidth, int grid_points) {
  if (grid_points < 3)
    throw Error(ErrorKind::kStructural, "mode scan needs >= 3 grid points");
  // The derivative conditions are realized numerically on a fixed grid. Two
  // guards keep sampling noise from inflating the mode count: local maxima
  // below 1% of the density peak are discarded, and adjacent maxima whose
  // separating valley is shallower than 80% of the lower peak are merged.
  constexpr double kModeFloorFraction = 0.01;
  constexpr double kValleyMergeRatio = 0.8;

  std::vector<double> xs(grid_points), density(grid_points);
  for (int i = 0; i < grid_points; ++i) {
    xs[i] = static_cast<double>(i) / static_cast<double>(grid_points - 1);
    density[i] = kde_estimate(samples, bandwidth, xs[i]);
  }

  // Merge equal-density plateaus into runs, then classify runs against their
  // neighbours. Boundary runs count as modes when they dominate inward.
  struct Run {
    double value;
    int first, last;
  };
  std::vector<Run> runs;
  for (int i = 0; i < grid_points; ++i) {
    if (!runs.empty() && density[i] == runs.back().value) {
      runs.back().last = i;
    } else {
      runs.push_back({density[i], i, i});
    }
  }

  ModeScan scan;
  scan.max_density = *std::max_element(density.begin(), density.end());
  std::vector<int> mode_runs;
  for (std::size_t r = 0; r < runs.size(); ++r) {
    const bool up = (r == 0) || runs[r - 1].value < runs[r].value;
    const bool down = (r + 1 == runs.size()) || runs[r + 1].value < runs[r].value;
    if (up && down && runs[r].value >= kModeFloorFraction * scan.max_density)
      mode_runs.push_back(static_cast<int>(r));
  }

  // Valley between consecutive surviving modes: the lowest run strictly
  // between them.
  auto valley_run = [&](int left, int right) {
    int best = left + 1;
    for (int r = left + 1; r < right; ++r) {
      if (runs[r].value < runs[best].value) best = r;
    }
    return best;
  };

  while (mode_runs.size() > 1) {
    double worst_ratio = -1.0;
    std::size_t worst_pair = 0;
    for (std::size_t m = 0; m + 1 < mode_runs.size(); ++m) {
      const double valley = runs[valley_run(mode_runs[m], mode_runs[m + 1])].value;
      const double lower =
          std::min(runs[mode_runs[m]].value, runs[mode_runs[m + 1]].value);
      const double ratio = lower > 0.0 ? valley / lower : 1.0;
      if (ratio > worst_ratio) {
        worst_ratio = ratio;
        worst_pair = m;
      }
    }
    if (worst_ratio <= kValleyMergeRatio) break;
    // Merge: drop the lower of the two peaks.
    const std::size_t drop =
        runs[mode_runs[worst_pair]].value <= runs[mode_runs[worst_pair + 1]].value
            ? worst_pair
            : worst_pair + 1;
    mode_runs.erase(mode_runs.begin() + drop);
  }

  auto run_center = [&](const Run& run) {
    return 0.5 * (xs[run.first] + xs[run.last]);
  };
  for (int r : mode_runs) scan.modes.push_back(run_center(runs[r]));
  for (std::size_t m = 0; m + 1 < mode_runs.size(); ++m) {
    const int best = valley_run(mode_runs[m], mode_runs[m + 1]);
    scan.minima.push_back(run_center(runs[best]));
    scan.minima_density.push_back(runs[best].value);
  }
  return scan;
}

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

CalibrationResult calibrate(const SparsityTrace& trace,
                            const CalibrationOptions& options) {
  const int num_thoughts = options.num_thoughts;
  if (num_thoughts < 1)
    throw Error(ErrorKind::kConfig, "num_thoughts must be >= 1");
  if (trace.values.empty())
    throw Error(ErrorKind::kConfig, "calibration trace has no prompts");
  const std::size_t num_layers = trace.num_layers();
  for (const auto& prompt : trace.values) {
    if (prompt.size() != num_layers)
      throw Error(ErrorKind::kConfig, "prompts disagree on layer count");
    for (const auto& layer : prompt) {
      if (layer.size() < 2)
        throw Error(ErrorKind::kConfig,
                    "every layer needs >= 2 sparsity samples per prompt");
      for (double v : layer) {
        if (v < 0.0 || v > 1.0)
          throw Error(ErrorKind::kConfig, "sparsity values must lie in [0, 1]");
      }
    }
  }

  CalibrationResult result;
  result.num_thoughts = num_thoughts;

  if (num_thoughts == 1) {
    // Single-category mode: no thresholds to derive, every layer is admitted
    // and the classifier is constant.
    for (std::size_t l = 0; l < num_layers; ++l)
      result.layers.push_back(static_cast<int>(l));
    return result;
  }

  const std::size_t P = trace.values.size();
  // scans[p][l]
  std::vector<std::vector<ModeScan>> scans(P,
                                           std::vector<ModeScan>(num_layers));
  std::map<int, std::vector<int>> mode_counts;
  std::vector<std::vector<bool>> qualifies(P, std::vector<bool>(num_layers));
  for (std::size_t p = 0; p < P; ++p) {
    for (std::size_t l = 0; l < num_layers; ++l) {
      const auto& samples = trace.values[p][l];
      const double h = scott_bandwidth(samples);
      scans[p][l] = find_modes_and_minima(samples, h, options.grid_points);
      const int modes = static_cast<int>(scans[p][l].modes.size());
      mode_counts[static_cast<int>(l)].push_back(modes);
      qualifies[p][l] = (modes == num_thoughts);
    }
  }

  std::vector<int> intersection;
  for (std::size_t l = 0; l < num_layers; ++l) {
    bool all = true;
    for (std::size_t p = 0; p < P; ++p) all = all && qualifies[p][l];
    if (all) intersection.push_back(static_cast<int>(l));
  }
  if (intersection.empty()) {
    throw CalibrationError(
        "no layer shows exactly " + std::to_string(num_thoughts) +
            " sparsity modes across every calibration prompt",
        mode_counts);
  }

  if (options.max_layers > 0 &&
      static_cast<int>(intersection.size()) > options.max_layers) {
    // Keep the layers with the deepest valleys: largest gap between the
    // density peak and the shallowest separating minimum, averaged over
    // prompts.
    std::vector<std::pair<double, int>> scored;
    for (int l : intersection) {
      double score = 0.0;
      for (std::size_t p = 0; p < P; ++p) {
        const ModeScan& scan = scans[p][l];
        const double worst_min = *std::max_element(
            scan.minima_density.begin(), scan.minima_density.end());
        score += scan.max_density - worst_min;
      }
      scored.emplace_back(-score / static_cast<double>(P), l);
    }
    std::sort(scored.begin(), scored.end());
    scored.resize(options.max_layers);
    intersection.clear();
    for (const auto& [_, l] : scored) intersection.push_back(l);
    std::sort(intersection.begin(), intersection.end());
  }

  result.layers = intersection;
  result.thresholds.assign(num_thoughts - 1, 0.0);
  for (int l : intersection) {
    for (std::size_t p = 0; p < P; ++p) {
      for (int j = 0; j < num_thoughts - 1; ++j)
        result.thresholds[j] += scans[p][l].minima[j];
    }
  }
  const double denom =
      static_cast<double>(intersection.size()) * static_cast<double>(P);
  for (double& t : result.thresholds) t /= denom;
  for (int j = 1; j < num_thoughts - 1; ++j) {
    if (result.thresholds[j] <= result.thresholds[j - 1])
      throw CalibrationError("derived thresholds are not strictly ascending",
                             mode_counts);
  }
  return result;
}

ThoughtLabel classify(double avg_sparsity, std::span<const double> thresholds) {
  int band = 0;
  for (double t : thresholds) {
    if (avg_sparsity > t) ++band;  // a value exactly at a threshold stays low
  }
  return ThoughtLabel{band};
}

bool refresh_due(std::int64_t step, std::int64_t tau) {
  if (tau < 1) throw Error(ErrorKind::kStructural, "refresh interval must be >= 1");
  if (step < 0) throw Error(ErrorKind::kStructural, "negative step");
  return step % tau == 0;
}

// ---------------------------------------------------------------------------
// Synthetic traces
// ---------------------------------------------------------------------------

SyntheticTraceSpec SyntheticTraceSpec::from_json_string(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kParse, std::string("synthetic spec: ") + e.what());
  }
  SyntheticTraceSpec spec;
  if (j.contains("modes")) spec.modes = j["modes"].get<std::vector<double>>();
  if (j.contains("weights")) spec.weights = j["weights"].get<std::vector<double>>();
  if (j.contains("stddev")) spec.stddev = j["stddev"];
  if (j.contains("layers")) spec.layers = j["layers"];
  if (j.contains("prompts")) spec.prompts = j["prompts"];
  if (j.contains("samples_per_prompt"))
    spec.samples_per_prompt = j["samples_per_prompt"];
  if (j.contains("unimodal_layers"))
    spec.unimodal_layers = j["unimodal_layers"].get<std::vector<int>>();
  if (j.contains("unimodal_mode")) spec.unimodal_mode = j["unimodal_mode"];
  if (j.contains("seed")) spec.seed = j["seed"];
  return spec;
}

SparsityTrace generate_synthetic_trace(const SyntheticTraceSpec& spec) {
  if (spec.modes.empty())
    throw Error(ErrorKind::kConfig, "synthetic spec needs at least one mode");
  std::vector<double> weights = spec.weights;
  if (weights.empty())
    weights.assign(spec.modes.size(), 1.0 / static_cast<double>(spec.modes.size()));
  if (weights.size() != spec.modes.size())
    throw Error(ErrorKind::kConfig, "synthetic weights/modes size mismatch");
  const double weight_sum = std::accumulate(weights.begin(), weights.end(), 0.0);

  Rng rng(Rng::mix(spec.seed, 0x5CA1E));
  auto draw = [&](double mean) {
    double x = 0.0;
    do {
      x = mean + spec.stddev * rng.gaussian();
    } while (x < 0.0 || x > 1.0);
    return x;
  };

  SparsityTrace trace;
  trace.values.resize(spec.prompts);
  for (int p = 0; p < spec.prompts; ++p) {
    trace.values[p].resize(spec.layers);
    for (int l = 0; l < spec.layers; ++l) {
      const bool unimodal =
          std::find(spec.unimodal_layers.begin(), spec.unimodal_layers.end(),
                    l) != spec.unimodal_layers.end();
      auto& samples = trace.values[p][l];
      samples.reserve(spec.samples_per_prompt);
      for (int s = 0; s < spec.samples_per_prompt; ++s) {
        if (unimodal) {
          samples.push_back(draw(spec.unimodal_mode));
          continue;
        }
        double u = rng.uniform() * weight_sum;
        std::size_t comp = 0;
        while (comp + 1 < weights.size() && u >= weights[comp]) {
          u -= weights[comp];
          ++comp;
        }
        samples.push_back(draw(spec.modes[comp]));
      }
    }
  }
  return trace;
}

}  // namespace thinkv
