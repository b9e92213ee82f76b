// Copyright (C) 2026 ThinKV Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "thinkv/attention.hpp"
#include "thinkv/evictor.hpp"
#include "thinkv/pager.hpp"
#include "thinkv/quant.hpp"
#include "thinkv/thought.hpp"
#include "thinkv/toy_model.hpp"

#include "json.hpp"

namespace thinkv {

//! Scripted thought labels, one band per refresh interval. Intervals past the
//! end of the list repeat the final label. With a script in place the online
//! classifier is bypassed, which makes eviction-schedule arithmetic exactly
//! checkable.
struct ScriptedTrace {
  std::vector<int> interval_bands;

  int band_at(std::int64_t interval) const;
  static ScriptedTrace from_labels(const std::vector<std::string>& labels,
                                   int num_thoughts);
  static ScriptedTrace from_json(const nlohmann::json& j, int num_thoughts);
  nlohmann::json to_json(int num_thoughts) const;
};

struct SimConfig {
  ModelConfig model;
  std::int64_t tau = 128;
  std::int64_t group_size = 16;
  std::int64_t block_size = 8;
  std::int64_t budget = 1024;
  RetentionSchedule schedule;
  PrecisionMap psi;  // empty = defaults(num_thoughts)
  int num_thoughts = 3;
  std::optional<CalibrationResult> calibration;
  std::int64_t max_gen_len = 1024;
  std::int64_t prompt_len = 0;
  std::uint64_t seed = 0;
  std::int64_t pool_blocks = 0;  // 0 = 2x budget headroom
  std::optional<ScriptedTrace> scripted;
  bool per_layer_thought = false;
  double threshold_fraction = 0.01;
  //! Positions at which the pager/segment state is snapshotted into
  //! RunOutput::step_dumps (golden-fixture hooks).
  std::vector<std::int64_t> dump_positions;

  std::int64_t effective_pool_blocks() const;
  PrecisionMap effective_psi() const;

  //! All violated invariants (errors) and advisories (warnings).
  std::vector<std::string> validate() const;
  std::vector<std::string> warnings() const;

  nlohmann::json to_json() const;
  static SimConfig from_json(const nlohmann::json& j);
};

struct RunMetrics {
  std::string method = "thinkv";
  double compression_ratio = 1.0;
  double memory_footprint_fraction = 1.0;
  double avg_bits_per_token = 16.0;
  double eviction_call_fraction = 0.0;
  double recall_at_10_mean = 1.0;
  double attention_output_error_mean = 0.0;
  std::vector<double> recall_at_10;            // per decode step (n >= 10)
  std::vector<double> attention_output_error;  // per decode step
  std::int64_t generated_length = 0;
  std::int64_t prompt_length = 0;
  std::int64_t live_tokens_final = 0;
  std::int64_t live_prompt_final = 0;
  std::int64_t live_generated_final = 0;
  double a = 1.0;  // precision fraction avg_bits / 16
  double b = 1.0;  // retention fraction live generated / generated
  std::map<std::string, std::int64_t> live_by_thought;
  std::map<std::string, std::int64_t> generated_by_thought;
  std::int64_t eviction_steps = 0;
  std::int64_t transition_calls = 0;
  std::int64_t overflow_calls = 0;
  std::int64_t budget_infeasible_events = 0;
  std::int64_t moved_token_slots = 0;

  nlohmann::json to_json() const;
  static RunMetrics from_json(const nlohmann::json& j);
  std::vector<std::string> validate() const;
};

//! Closed-form cache footprint: (I + b * L_gen) * a * beta.
double memory_footprint(double prompt_len, double gen_len, double a, double b,
                        double beta);

struct RecallResult {
  double value = 0.0;
  bool truncated = false;  // fewer than 10 tokens were available
};

//! Fraction of the full row's top-10 token positions present in the retained
//! set. Row index i corresponds to token id i.
RecallResult recall_at_10(const AttentionRow& full_row,
                          std::span<const TokenId> retained_ids);

struct EventLog {
  std::vector<nlohmann::json> events;

  void emit(nlohmann::json e) { events.push_back(std::move(e)); }
  std::string to_jsonl() const;
};

struct RunOutput {
  RunMetrics metrics;
  std::string events_jsonl;
  nlohmann::json final_block_tables;  // per layer
  nlohmann::json final_segments;      // per layer
  nlohmann::json step_dumps;          // keyed by requested position
};

//! The thought-adaptive generation loop: attend over the paged cache,
//! classify at refresh boundaries, emit quantized groups at group-size
//! granularity, trigger eviction at transition ends and on budget overflow.
RunOutput generation_loop(const SimConfig& config);

//! Runs the pipeline plus the three reference policies in lockstep on the
//! same full-precision token stream, so metric differences isolate cache
//! fidelity. Order: thinkv, full_kv, recency_window_per_step,
//! gather_compaction.
std::vector<RunOutput> run_compare(const SimConfig& config);

//! Single baseline run (kinds: "full_kv", "recency_window_per_step",
//! "gather_compaction").
RunOutput run_baseline(const SimConfig& config, const std::string& kind);

//! Per-layer sparsity record of a full-precision run in calibration-trace
//! form (one prompt record).
std::vector<std::vector<double>> collect_sparsity_record(const SimConfig& config);

}  // namespace thinkv
