// Copyright (C) 2026 ThinKV Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "thinkv/common.hpp"

namespace thinkv {

//! Per-prompt, per-layer, per-step sparsity observations collected during a
//! calibration pass: values[prompt][layer][step], each in [0, 1].
struct SparsityTrace {
  std::vector<std::vector<std::vector<double>>> values;

  std::size_t num_prompts() const { return values.size(); }
  std::size_t num_layers() const { return values.empty() ? 0 : values[0].size(); }

  //! JSON-lines, one record per prompt mapping layer index to the per-step
  //! sparsity array. Parse errors carry the offending line number.
  static SparsityTrace load_jsonl(const std::string& path);
  void save_jsonl(const std::string& path) const;
  std::string to_jsonl() const;
};

//! Offline calibration output: the qualifying layer subset and the sparsity
//! thresholds separating thought bands.
struct CalibrationResult {
  std::vector<int> layers;          // L*, ascending
  std::vector<double> thresholds;   // strictly ascending, size |T|-1
  int num_thoughts = 3;
  std::string bandwidth_rule = "scott";

  std::string to_json_string() const;
  static CalibrationResult from_json_string(const std::string& text);
  static CalibrationResult load(const std::string& path);
  void save(const std::string& path) const;
};

//! Gaussian-kernel density estimate at x. Requires >= 2 samples and h > 0.
double kde_estimate(std::span<const double> samples, double bandwidth,
                    double x);

//! Scott's rule h = sigma * M^(-1/5) with a small positive floor.
double scott_bandwidth(std::span<const double> samples);

//! Fixed-grid mode scan over [0, 1] with plateau merging. Minima are the
//! density minima strictly between consecutive modes, so there are always
//! exactly |modes| - 1 of them.
struct ModeScan {
  std::vector<double> modes;
  std::vector<double> minima;
  std::vector<double> minima_density;
  double max_density = 0.0;
};
ModeScan find_modes_and_minima(std::span<const double> samples,
                               double bandwidth, int grid_points = 512);

struct CalibrationOptions {
  int num_thoughts = 3;
  //! Keep at most this many qualifying layers (0 = no cap). When the strict
  //! intersection is larger, the layers with the deepest valleys win.
  int max_layers = 0;
  int grid_points = 512;
};

//! End-to-end calibration: per (prompt, layer) KDE mode counting, strict
//! intersection across prompts, then threshold averaging over qualifying
//! pairs. Throws CalibrationError (with per-layer mode counts) when no layer
//! qualifies. A single-category setup admits every layer and yields no
//! thresholds.
CalibrationResult calibrate(const SparsityTrace& trace,
                            const CalibrationOptions& options);

//! Band assignment by threshold comparison; a value exactly at a threshold
//! falls into the lower band.
ThoughtLabel classify(double avg_sparsity, std::span<const double> thresholds);

//! True iff the step is a category-refresh boundary (step mod tau == 0).
bool refresh_due(std::int64_t step, std::int64_t tau);

//! Synthetic calibration traces drawn from a gaussian mixture with known
//! modes, for calibration tests and the --synthetic CLI path.
struct SyntheticTraceSpec {
  std::vector<double> modes{0.2, 0.5, 0.8};
  std::vector<double> weights;  // empty = equal
  double stddev = 0.04;
  int layers = 8;
  int prompts = 4;
  int samples_per_prompt = 2000;
  std::vector<int> unimodal_layers;  // draw from a single component instead
  double unimodal_mode = 0.5;
  std::uint64_t seed = 0;

  static SyntheticTraceSpec from_json_string(const std::string& text);
};
SparsityTrace generate_synthetic_trace(const SyntheticTraceSpec& spec);

}  // namespace thinkv
