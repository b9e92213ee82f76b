// Copyright (C) 2026 ThinKV Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>

#include "thinkv/errors.hpp"
#include "thinkv/rng.hpp"
#include "thinkv/thought.hpp"

using namespace thinkv;

namespace {

std::vector<double> mixture_samples(std::uint64_t seed, int n,
                                    const std::vector<double>& modes,
                                    double stddev) {
  Rng rng(seed);
  std::vector<double> xs;
  xs.reserve(n);
  while (static_cast<int>(xs.size()) < n) {
    const double mode = modes[rng.uniform_int(0, modes.size() - 1)];
    const double x = mode + stddev * rng.gaussian();
    if (x >= 0.0 && x <= 1.0) xs.push_back(x);
  }
  return xs;
}

// Count maxima of the KDE by dense grid scan at step 1e-3, independent of
// the plateau-merging implementation.
int grid_scan_maxima(const std::vector<double>& samples, double h) {
  const int n = 1001;
  std::vector<double> density(n);
  for (int i = 0; i < n; ++i)
    density[i] = kde_estimate(samples, h, i / 1000.0);
  int maxima = 0;
  for (int i = 1; i + 1 < n; ++i) {
    if (density[i] > density[i - 1] && density[i] > density[i + 1]) ++maxima;
  }
  return maxima;
}

}  // namespace

TEST_CASE("kde basics: peak location, normalization, errors") {
  const auto samples = mixture_samples(1, 500, {0.5}, 0.05);
  const double h = scott_bandwidth(samples);

  // Density is maximal near the cluster center on a grid scan.
  double best_x = 0.0, best_d = -1.0;
  for (int i = 0; i <= 1000; ++i) {
    const double x = i / 1000.0;
    const double d = kde_estimate(samples, h, x);
    if (d > best_d) {
      best_d = d;
      best_x = x;
    }
  }
  CHECK(best_x == doctest::Approx(0.5).epsilon(0.05));

  // The kernel integrates to one (trapezoid over an extended support).
  const double lo = *std::min_element(samples.begin(), samples.end()) - 5 * h;
  const double hi = *std::max_element(samples.begin(), samples.end()) + 5 * h;
  const int steps = static_cast<int>((hi - lo) / 1e-3) + 1;
  double integral = 0.0;
  double prev = kde_estimate(samples, h, lo);
  for (int i = 1; i <= steps; ++i) {
    const double x = lo + (hi - lo) * i / steps;
    const double cur = kde_estimate(samples, h, x);
    integral += 0.5 * (prev + cur) * (hi - lo) / steps;
    prev = cur;
  }
  CHECK(integral == doctest::Approx(1.0).epsilon(1e-3));

  CHECK_THROWS_AS(kde_estimate(samples, 0.0, 0.5), Error);
  CHECK_THROWS_AS(kde_estimate(std::vector<double>{0.5}, 0.1, 0.5), Error);
}

TEST_CASE("two tight clusters give exactly two maxima") {
  const auto samples = mixture_samples(2, 2000, {0.2, 0.8}, 0.03);
  const double h = scott_bandwidth(samples);
  CHECK(grid_scan_maxima(samples, h) == 2);
  const ModeScan scan = find_modes_and_minima(samples, h);
  CHECK(scan.modes.size() == 2);
}

TEST_CASE("mode scan: unimodal, bimodal, trimodal") {
  {
    const auto samples = mixture_samples(3, 2000, {0.5}, 0.04);
    const ModeScan scan = find_modes_and_minima(samples, scott_bandwidth(samples));
    CHECK(scan.modes.size() == 1);
    CHECK(scan.minima.empty());
  }
  {
    const auto samples = mixture_samples(4, 4000, {0.2, 0.8}, 0.04);
    const ModeScan scan = find_modes_and_minima(samples, scott_bandwidth(samples));
    REQUIRE(scan.modes.size() == 2);
    REQUIRE(scan.minima.size() == 1);
    CHECK(scan.minima[0] == doctest::Approx(0.5).epsilon(0.1));
    CHECK(std::fabs(scan.minima[0] - 0.5) <= 0.05);
  }
  {
    const auto samples = mixture_samples(5, 6000, {0.2, 0.5, 0.8}, 0.04);
    const ModeScan scan = find_modes_and_minima(samples, scott_bandwidth(samples));
    REQUIRE(scan.modes.size() == 3);
    REQUIRE(scan.minima.size() == 2);
    CHECK(std::fabs(scan.minima[0] - 0.35) <= 0.05);
    CHECK(std::fabs(scan.minima[1] - 0.65) <= 0.05);
  }
}

TEST_CASE("calibrate: trimodal everywhere admits every layer") {
  SyntheticTraceSpec spec;
  spec.layers = 6;
  spec.prompts = 3;
  spec.samples_per_prompt = 4000;
  spec.seed = 11;
  const SparsityTrace trace = generate_synthetic_trace(spec);
  CalibrationOptions options;
  options.num_thoughts = 3;
  const CalibrationResult result = calibrate(trace, options);
  CHECK(result.layers.size() == 6);
  REQUIRE(result.thresholds.size() == 2);
  CHECK(std::fabs(result.thresholds[0] - 0.35) <= 0.05);
  CHECK(std::fabs(result.thresholds[1] - 0.65) <= 0.05);
}

TEST_CASE("calibrate: a unimodal layer is excluded from the subset") {
  SyntheticTraceSpec spec;
  spec.layers = 5;
  spec.prompts = 2;
  spec.samples_per_prompt = 4000;
  spec.unimodal_layers = {2};
  spec.seed = 12;
  const SparsityTrace trace = generate_synthetic_trace(spec);
  CalibrationOptions options;
  options.num_thoughts = 3;
  const CalibrationResult result = calibrate(trace, options);
  CHECK(std::find(result.layers.begin(), result.layers.end(), 2) ==
        result.layers.end());
  CHECK(result.layers.size() == 4);
}

TEST_CASE("calibrate: single-category mode admits everything, no thresholds") {
  SyntheticTraceSpec spec;
  spec.layers = 4;
  spec.prompts = 2;
  spec.samples_per_prompt = 500;
  spec.seed = 13;
  const SparsityTrace trace = generate_synthetic_trace(spec);
  CalibrationOptions options;
  options.num_thoughts = 1;
  const CalibrationResult result = calibrate(trace, options);
  CHECK(result.layers.size() == 4);
  CHECK(result.thresholds.empty());
  CHECK(classify(0.9, result.thresholds) == ThoughtLabel{0});
}

TEST_CASE("calibrate: all layers unimodal fails with per-layer diagnostics") {
  SyntheticTraceSpec spec;
  spec.layers = 3;
  spec.prompts = 2;
  spec.samples_per_prompt = 1000;
  spec.unimodal_layers = {0, 1, 2};
  spec.seed = 14;
  const SparsityTrace trace = generate_synthetic_trace(spec);
  CalibrationOptions options;
  options.num_thoughts = 3;
  try {
    calibrate(trace, options);
    FAIL("expected calibration failure");
  } catch (const CalibrationError& e) {
    CHECK(e.exit_code() == 3);
    REQUIRE(e.mode_counts_per_layer().size() == 3);
    for (const auto& [layer, counts] : e.mode_counts_per_layer()) {
      REQUIRE(counts.size() == 2);
      for (int c : counts) CHECK(c == 1);
    }
  }
}

TEST_CASE("calibrate: layer cap keeps the deepest valleys") {
  SyntheticTraceSpec spec;
  spec.layers = 8;
  spec.prompts = 2;
  spec.samples_per_prompt = 3000;
  spec.seed = 15;
  const SparsityTrace trace = generate_synthetic_trace(spec);
  CalibrationOptions options;
  options.num_thoughts = 3;
  options.max_layers = 4;
  const CalibrationResult result = calibrate(trace, options);
  CHECK(result.layers.size() == 4);
  CHECK(std::is_sorted(result.layers.begin(), result.layers.end()));
}

TEST_CASE("calibrate is invariant under prompt permutation") {
  SyntheticTraceSpec spec;
  spec.layers = 4;
  spec.prompts = 4;
  spec.samples_per_prompt = 2000;
  spec.seed = 16;
  SparsityTrace trace = generate_synthetic_trace(spec);
  CalibrationOptions options;
  options.num_thoughts = 3;
  const CalibrationResult base = calibrate(trace, options);

  std::reverse(trace.values.begin(), trace.values.end());
  const CalibrationResult permuted = calibrate(trace, options);
  CHECK(base.layers == permuted.layers);
  REQUIRE(base.thresholds.size() == permuted.thresholds.size());
  for (std::size_t j = 0; j < base.thresholds.size(); ++j)
    CHECK(base.thresholds[j] ==
          doctest::Approx(permuted.thresholds[j]).epsilon(1e-9));
}

TEST_CASE("calibrate follows a layer relabeling") {
  SyntheticTraceSpec spec;
  spec.layers = 4;
  spec.prompts = 2;
  spec.samples_per_prompt = 2000;
  spec.unimodal_layers = {1};
  spec.seed = 17;
  SparsityTrace trace = generate_synthetic_trace(spec);
  CalibrationOptions options;
  options.num_thoughts = 3;
  const CalibrationResult base = calibrate(trace, options);

  // Swap layers 0 and 3 in every prompt; the qualifying set permutes with
  // them and the thresholds are unchanged (set semantics).
  for (auto& prompt : trace.values) std::swap(prompt[0], prompt[3]);
  const CalibrationResult swapped = calibrate(trace, options);
  std::vector<int> expect;
  for (int l : base.layers) expect.push_back(l == 0 ? 3 : (l == 3 ? 0 : l));
  std::sort(expect.begin(), expect.end());
  CHECK(swapped.layers == expect);
  for (std::size_t j = 0; j < base.thresholds.size(); ++j)
    CHECK(swapped.thresholds[j] ==
          doctest::Approx(base.thresholds[j]).epsilon(1e-9));
}

TEST_CASE("threshold recovery tightens with more samples") {
  // Wider separation than the default mixture so 100 samples are already
  // enough for Scott's rule to resolve three modes; true valleys at 0.3/0.7.
  auto run = [&](int samples) {
    SyntheticTraceSpec spec;
    spec.modes = {0.1, 0.5, 0.9};
    spec.layers = 2;
    spec.prompts = 2;
    spec.samples_per_prompt = samples;
    spec.seed = 18;
    const CalibrationOptions options{3, 0, 512};
    const CalibrationResult r = calibrate(generate_synthetic_trace(spec), options);
    return std::max(std::fabs(r.thresholds[0] - 0.3),
                    std::fabs(r.thresholds[1] - 0.7));
  };
  const double coarse = run(100);
  const double fine = run(10000);
  CHECK(fine < coarse);
  CHECK(fine <= 0.05);
}

TEST_CASE("classify bands and tie handling") {
  const std::vector<double> thresholds{0.5, 0.8};
  CHECK(classify(0.95, thresholds) == kThoughtT);
  CHECK(classify(0.3, thresholds) == kThoughtE);
  CHECK(classify(0.5, thresholds) == kThoughtE);  // tie goes to the lower band
  CHECK(classify(0.6, thresholds) == kThoughtR);
  CHECK(classify(0.8, thresholds) == kThoughtR);

  // Monotone: higher sparsity never maps to a lower band.
  int prev = 0;
  for (double s = 0.0; s <= 1.0; s += 0.001) {
    const int band = classify(s, thresholds).band;
    CHECK(band >= prev);
    prev = band;
  }
}

TEST_CASE("refresh schedule") {
  CHECK(refresh_due(0, 128));
  CHECK_FALSE(refresh_due(127, 128));
  CHECK(refresh_due(256, 128));
  CHECK_THROWS_AS(refresh_due(0, 0), Error);
}

TEST_CASE("thought labels, importance and transitions") {
  CHECK(thought_name(kThoughtR, 3) == "R");
  CHECK(thought_name(kThoughtE, 3) == "E");
  CHECK(thought_name(kThoughtT, 3) == "T");
  CHECK(thought_from_name("T", 3) == kThoughtT);
  CHECK(thought_from_name("B0", 1) == ThoughtLabel{0});
  CHECK(thought_importance(kThoughtR, 3) == 2);
  CHECK(thought_importance(kThoughtE, 3) == 1);
  CHECK(thought_importance(kThoughtT, 3) == 0);
  CHECK(is_transition(kThoughtT, 3));
  CHECK_FALSE(is_transition(kThoughtR, 3));
  CHECK_FALSE(is_transition(ThoughtLabel{0}, 1));
  CHECK_FALSE(is_transition(ThoughtLabel{1}, 2));
  CHECK(prefill_thought(3) == kThoughtR);
}

TEST_CASE("trace jsonl round trip and parse diagnostics") {
  SparsityTrace trace;
  trace.values = {{{0.1, 0.2}, {0.3, 0.4}}, {{0.5, 0.6}, {0.7, 0.8}}};
  const std::string path = "trace_roundtrip.jsonl";
  trace.save_jsonl(path);
  const SparsityTrace back = SparsityTrace::load_jsonl(path);
  CHECK(back.values == trace.values);
  std::remove(path.c_str());

  const std::string bad_path = "trace_bad.jsonl";
  {
    std::ofstream out(bad_path);
    out << "{\"0\": [0.1, 0.2]}\n";
    out << "{not json\n";
  }
  try {
    SparsityTrace::load_jsonl(bad_path);
    FAIL("expected parse error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kParse);
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
  std::remove(bad_path.c_str());
}

TEST_CASE("calibration result persistence") {
  CalibrationResult r;
  r.layers = {1, 3};
  r.thresholds = {0.35, 0.65};
  r.num_thoughts = 3;
  const std::string path = "cal_roundtrip.json";
  r.save(path);
  const CalibrationResult back = CalibrationResult::load(path);
  CHECK(back.layers == r.layers);
  CHECK(back.thresholds == r.thresholds);
  CHECK(back.num_thoughts == 3);
  std::remove(path.c_str());
}
