// Copyright (C) 2026 ThinKV Authors
// SPDX-License-Identifier: Apache-2.0

#include "thinkv/sim.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>
#include <set>
#include <unordered_set>

#include "thinkv/errors.hpp"
#include "thinkv/rng.hpp"

namespace thinkv {

using nlohmann::json;

// ---------------------------------------------------------------------------
// ScriptedTrace
// ---------------------------------------------------------------------------

int ScriptedTrace::band_at(std::int64_t interval) const {
  if (interval_bands.empty())
    throw Error(ErrorKind::kConfig, "scripted trace has no labels");
  const std::size_t i = std::min<std::size_t>(
      static_cast<std::size_t>(interval), interval_bands.size() - 1);
  return interval_bands[i];
}

ScriptedTrace ScriptedTrace::from_labels(const std::vector<std::string>& labels,
                                         int num_thoughts) {
  ScriptedTrace t;
  t.interval_bands.reserve(labels.size());
  for (const auto& name : labels)
    t.interval_bands.push_back(thought_from_name(name, num_thoughts).band);
  return t;
}

ScriptedTrace ScriptedTrace::from_json(const json& j, int num_thoughts) {
  const json& labels = j.is_array() ? j : j.at("labels");
  std::vector<std::string> names;
  for (const auto& item : labels) {
    if (item.is_string()) {
      names.push_back(item.get<std::string>());
    } else {
      names.push_back(std::to_string(item.get<int>()));
    }
  }
  return from_labels(names, num_thoughts);
}

json ScriptedTrace::to_json(int num_thoughts) const {
  json labels = json::array();
  for (int band : interval_bands)
    labels.push_back(thought_name(ThoughtLabel{band}, num_thoughts));
  return json{{"labels", labels}};
}

// ---------------------------------------------------------------------------
// SimConfig
// ---------------------------------------------------------------------------

std::int64_t SimConfig::effective_pool_blocks() const {
  if (pool_blocks > 0) return pool_blocks;
  // Twice the worst-case resident set the budget implies: the enforced
  // closed-segment total (which the floor can push past the budget once
  // enough segments exist), plus the exempt open interval, the emission
  // buffer and the prompt prefix.
  const std::int64_t segments = (prompt_len + max_gen_len + tau - 1) / tau;
  const std::int64_t closed =
      std::max(budget, segments * (schedule.levels.empty()
                                       ? std::int64_t{1}
                                       : schedule.floor()));
  const std::int64_t resident = closed + tau + group_size + prompt_len;
  return std::max<std::int64_t>(1, (2 * resident + block_size - 1) / block_size);
}

PrecisionMap SimConfig::effective_psi() const {
  return psi.covers(num_thoughts) ? psi : PrecisionMap::defaults(num_thoughts);
}

std::vector<std::string> SimConfig::validate() const {
  std::vector<std::string> errors = model.validate();
  if (num_thoughts < 1) errors.push_back("num_thoughts must be >= 1");
  if (tau < 1) errors.push_back("tau must be >= 1");
  if (group_size < 1) errors.push_back("group_size must be >= 1");
  if (block_size < 1) errors.push_back("block_size must be >= 1");
  if (max_gen_len < 1) errors.push_back("max_gen_len must be >= 1");
  if (prompt_len < 0) errors.push_back("prompt_len must be >= 0");
  if (pool_blocks < 0) errors.push_back("pool_blocks must be >= 0");
  if (!(threshold_fraction > 0.0) || threshold_fraction > 1.0)
    errors.push_back("threshold_fraction must lie in (0, 1]");
  for (const auto& e : schedule.validate()) errors.push_back(e);
  if (!schedule.validate().empty()) return errors;
  if (budget < num_thoughts * schedule.floor())
    errors.push_back("budget must be >= num_thoughts * retention floor");
  if (!psi.bands().empty() && !psi.covers(num_thoughts))
    errors.push_back("precision map does not cover every thought band");
  if (!scripted.has_value()) {
    if (!calibration.has_value()) {
      errors.push_back("a calibration result is required unless a scripted trace is given");
    } else {
      if (calibration->num_thoughts != num_thoughts)
        errors.push_back("calibration num_thoughts disagrees with config");
      if (static_cast<int>(calibration->thresholds.size()) != num_thoughts - 1)
        errors.push_back("calibration must carry num_thoughts - 1 thresholds");
      if (calibration->layers.empty())
        errors.push_back("calibration layer subset is empty");
      for (int l : calibration->layers) {
        if (l < 0 || l >= model.num_layers)
          errors.push_back("calibration layer index out of range");
      }
    }
  } else {
    for (int band : scripted->interval_bands) {
      if (band < 0 || band >= num_thoughts)
        errors.push_back("scripted band out of range");
    }
  }
  return errors;
}

std::vector<std::string> SimConfig::warnings() const {
  std::vector<std::string> warnings;
  if (group_size > 0 && tau % group_size != 0)
    warnings.push_back("tau is not a multiple of group_size; windows will be "
                       "flushed partially at segment boundaries");
  if (!effective_psi().monotone_in_importance(num_thoughts))
    warnings.push_back("precision map gives a more important thought fewer bits");
  return warnings;
}

json SimConfig::to_json() const {
  json j;
  j["model"] = {{"num_layers", model.num_layers},
                {"head_dim", model.head_dim},
                {"num_heads", model.num_heads},
                {"gqa_group_size", model.gqa_group_size},
                {"embed_dim", model.embed_dim},
                {"seed", model.seed},
                {"sink_tokens", model.sink_tokens},
                {"sink_scale", model.sink_scale}};
  j["tau"] = tau;
  j["group_size"] = group_size;
  j["block_size"] = block_size;
  j["budget"] = budget;
  j["schedule"] = schedule.levels;
  j["precision_map"] = effective_psi().to_string(num_thoughts);
  j["num_thoughts"] = num_thoughts;
  j["max_gen_len"] = max_gen_len;
  j["prompt_len"] = prompt_len;
  j["seed"] = seed;
  j["pool_blocks"] = pool_blocks;
  j["per_layer_thought"] = per_layer_thought;
  j["threshold_fraction"] = threshold_fraction;
  if (calibration.has_value()) {
    j["calibration"] = json::parse(calibration->to_json_string());
  } else {
    j["calibration"] = nullptr;
  }
  if (scripted.has_value()) {
    j["scripted_trace"] = scripted->to_json(num_thoughts);
  } else {
    j["scripted_trace"] = nullptr;
  }
  if (!dump_positions.empty()) j["dump_positions"] = dump_positions;
  return j;
}

SimConfig SimConfig::from_json(const json& j) {
  static const std::unordered_set<std::string> known{
      "model",        "tau",           "group_size",   "block_size",
      "budget",       "schedule",      "precision_map", "num_thoughts",
      "max_gen_len",  "prompt_len",    "seed",         "pool_blocks",
      "per_layer_thought", "threshold_fraction", "calibration",
      "scripted_trace", "dump_positions"};
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key))
      throw Error(ErrorKind::kConfig, "unknown config key '" + key + "'");
  }
  SimConfig cfg;
  if (j.contains("model")) {
    const json& m = j["model"];
    static const std::unordered_set<std::string> known_model{
        "num_layers", "head_dim",    "num_heads",  "gqa_group_size",
        "embed_dim",  "seed",        "sink_tokens", "sink_scale"};
    for (const auto& [key, _] : m.items()) {
      if (!known_model.contains(key))
        throw Error(ErrorKind::kConfig, "unknown model config key '" + key + "'");
    }
    if (m.contains("num_layers")) cfg.model.num_layers = m["num_layers"];
    if (m.contains("head_dim")) cfg.model.head_dim = m["head_dim"];
    if (m.contains("num_heads")) cfg.model.num_heads = m["num_heads"];
    if (m.contains("gqa_group_size")) cfg.model.gqa_group_size = m["gqa_group_size"];
    if (m.contains("embed_dim")) cfg.model.embed_dim = m["embed_dim"];
    if (m.contains("seed")) cfg.model.seed = m["seed"];
    if (m.contains("sink_tokens")) cfg.model.sink_tokens = m["sink_tokens"];
    if (m.contains("sink_scale")) cfg.model.sink_scale = m["sink_scale"];
  }
  if (j.contains("tau")) cfg.tau = j["tau"];
  if (j.contains("group_size")) cfg.group_size = j["group_size"];
  if (j.contains("block_size")) cfg.block_size = j["block_size"];
  if (j.contains("budget")) cfg.budget = j["budget"];
  if (j.contains("num_thoughts")) cfg.num_thoughts = j["num_thoughts"];
  if (j.contains("schedule"))
    cfg.schedule.levels = j["schedule"].get<std::vector<std::int64_t>>();
  if (j.contains("precision_map") && !j["precision_map"].is_null())
    cfg.psi = PrecisionMap::parse(j["precision_map"].get<std::string>(),
                                  cfg.num_thoughts);
  if (j.contains("max_gen_len")) cfg.max_gen_len = j["max_gen_len"];
  if (j.contains("prompt_len")) cfg.prompt_len = j["prompt_len"];
  if (j.contains("seed")) cfg.seed = j["seed"];
  if (j.contains("pool_blocks")) cfg.pool_blocks = j["pool_blocks"];
  if (j.contains("per_layer_thought")) cfg.per_layer_thought = j["per_layer_thought"];
  if (j.contains("threshold_fraction")) cfg.threshold_fraction = j["threshold_fraction"];
  if (j.contains("calibration") && !j["calibration"].is_null()) {
    if (j["calibration"].is_string()) {
      cfg.calibration = CalibrationResult::load(j["calibration"]);
    } else {
      cfg.calibration =
          CalibrationResult::from_json_string(j["calibration"].dump());
    }
  }
  if (j.contains("scripted_trace") && !j["scripted_trace"].is_null())
    cfg.scripted = ScriptedTrace::from_json(j["scripted_trace"], cfg.num_thoughts);
  if (j.contains("dump_positions"))
    cfg.dump_positions = j["dump_positions"].get<std::vector<std::int64_t>>();
  return cfg;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

double memory_footprint(double prompt_len, double gen_len, double a, double b,
                        double beta) {
  return (prompt_len + b * gen_len) * a * beta;
}

RecallResult recall_at_10(const AttentionRow& full_row,
                          std::span<const TokenId> retained_ids) {
  const std::size_t n = full_row.size();
  if (n == 0) throw Error(ErrorKind::kStructural, "recall over an empty row");
  const std::size_t top = std::min<std::size_t>(10, n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + top, order.end(),
                    [&](std::size_t a_, std::size_t b_) {
                      if (full_row.scores[a_] != full_row.scores[b_])
                        return full_row.scores[a_] > full_row.scores[b_];
                      return a_ < b_;
                    });
  std::unordered_set<TokenId> retained(retained_ids.begin(), retained_ids.end());
  std::size_t hit = 0;
  for (std::size_t i = 0; i < top; ++i) {
    if (retained.contains(static_cast<TokenId>(order[i]))) ++hit;
  }
  RecallResult r;
  r.value = static_cast<double>(hit) / static_cast<double>(top);
  r.truncated = n < 10;
  return r;
}

json RunMetrics::to_json() const {
  json j;
  j["method"] = method;
  j["compression_ratio"] = compression_ratio;
  j["memory_footprint_fraction"] = memory_footprint_fraction;
  j["avg_bits_per_token"] = avg_bits_per_token;
  j["eviction_call_fraction"] = eviction_call_fraction;
  j["recall_at_10_mean"] = recall_at_10_mean;
  j["attention_output_error_mean"] = attention_output_error_mean;
  j["recall_at_10"] = recall_at_10;
  j["attention_output_error"] = attention_output_error;
  j["generated_length"] = generated_length;
  j["prompt_length"] = prompt_length;
  j["live_tokens_final"] = live_tokens_final;
  j["live_prompt_final"] = live_prompt_final;
  j["live_generated_final"] = live_generated_final;
  j["a"] = a;
  j["b"] = b;
  j["live_by_thought"] = live_by_thought;
  j["generated_by_thought"] = generated_by_thought;
  j["eviction_steps"] = eviction_steps;
  j["transition_calls"] = transition_calls;
  j["overflow_calls"] = overflow_calls;
  j["budget_infeasible_events"] = budget_infeasible_events;
  j["moved_token_slots"] = moved_token_slots;
  return j;
}

RunMetrics RunMetrics::from_json(const json& j) {
  RunMetrics m;
  m.method = j.at("method");
  m.compression_ratio = j.at("compression_ratio");
  m.memory_footprint_fraction = j.at("memory_footprint_fraction");
  m.avg_bits_per_token = j.at("avg_bits_per_token");
  m.eviction_call_fraction = j.at("eviction_call_fraction");
  m.recall_at_10_mean = j.at("recall_at_10_mean");
  m.attention_output_error_mean = j.at("attention_output_error_mean");
  m.recall_at_10 = j.at("recall_at_10").get<std::vector<double>>();
  m.attention_output_error =
      j.at("attention_output_error").get<std::vector<double>>();
  m.generated_length = j.at("generated_length");
  m.prompt_length = j.at("prompt_length");
  m.live_tokens_final = j.at("live_tokens_final");
  m.live_prompt_final = j.at("live_prompt_final");
  m.live_generated_final = j.at("live_generated_final");
  m.a = j.at("a");
  m.b = j.at("b");
  m.live_by_thought = j.at("live_by_thought").get<std::map<std::string, std::int64_t>>();
  m.generated_by_thought =
      j.at("generated_by_thought").get<std::map<std::string, std::int64_t>>();
  m.eviction_steps = j.at("eviction_steps");
  m.transition_calls = j.at("transition_calls");
  m.overflow_calls = j.at("overflow_calls");
  m.budget_infeasible_events = j.at("budget_infeasible_events");
  m.moved_token_slots = j.at("moved_token_slots");
  return m;
}

std::vector<std::string> RunMetrics::validate() const {
  std::vector<std::string> errors;
  auto fraction = [&](double v, const char* name) {
    if (v < 0.0 || v > 1.0)
      errors.push_back(std::string(name) + " outside [0, 1]");
  };
  fraction(memory_footprint_fraction, "memory_footprint_fraction");
  fraction(eviction_call_fraction, "eviction_call_fraction");
  fraction(recall_at_10_mean, "recall_at_10_mean");
  fraction(b, "b");
  if (avg_bits_per_token < 2.0 || avg_bits_per_token > 16.0)
    errors.push_back("avg_bits_per_token outside [2, 16]");
  return errors;
}

std::string EventLog::to_jsonl() const {
  std::string out;
  for (const auto& e : events) {
    out += e.dump();
    out += "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shadow stream: the full-precision reference run that produces the token
// stream, projections and full-attention references every method consumes in
// lockstep. Divergence between a method and the shadow therefore measures
// cache fidelity, not sampling noise.
// ---------------------------------------------------------------------------

namespace {

struct StepView {
  std::int64_t pos = 0;
  TokenId token = 0;
  bool prefill = false;
  std::vector<std::vector<Vec>> queries;  // [layer][head]
  std::vector<Vec> keys, values;          // [layer]
  std::vector<AttentionRow> full_avg_rows;  // [layer], head-averaged
  std::vector<Vec> full_outputs;            // [layer], concatenated groups
  std::vector<double> full_layer_sparsity;  // [layer]
};

class ShadowStream {
 public:
  explicit ShadowStream(const SimConfig& cfg)
      : cfg_(cfg), model_(cfg.model) {
    prompt_ = model_.sample_prompt(cfg.seed, cfg.prompt_len);
    // The run seed also picks the first decode token so promptless runs
    // still vary by seed.
    Rng rng(Rng::mix(cfg.seed, 0xBEEF));
    next_token_ = rng.uniform_int(0, cfg.model.embed_dim - 1);
    keys_.resize(cfg.model.num_layers);
    values_.resize(cfg.model.num_layers);
  }

  std::int64_t total_steps() const { return cfg_.prompt_len + cfg_.max_gen_len; }

  StepView step() {
    StepView sv;
    sv.pos = pos_;
    sv.prefill = pos_ < cfg_.prompt_len;
    sv.token = sv.prefill ? prompt_[pos_] : next_token_;
    const int layers = cfg_.model.num_layers;
    const int groups = cfg_.model.num_groups();
    const int g_size = cfg_.model.gqa_group_size;
    const double scale = 1.0 / std::sqrt(static_cast<double>(cfg_.model.head_dim));
    sv.queries.resize(layers);
    sv.keys.resize(layers);
    sv.values.resize(layers);
    sv.full_avg_rows.resize(layers);
    sv.full_outputs.resize(layers);
    sv.full_layer_sparsity.resize(layers);

    Vec hidden = model_.embed(sv.token);
    for (int l = 0; l < layers; ++l) {
      ToyModel::LayerProjection proj = model_.project(l, hidden, pos_);
      keys_[l].push_back(proj.key);
      values_[l].push_back(proj.value);
      std::vector<const Vec*> kp, vp;
      kp.reserve(keys_[l].size());
      vp.reserve(values_[l].size());
      for (const Vec& k : keys_[l]) kp.push_back(&k);
      for (const Vec& v : values_[l]) vp.push_back(&v);

      std::vector<Vec> group_outputs;
      std::vector<AttentionRow> rows;
      group_outputs.reserve(groups);
      rows.reserve(groups);
      for (int g = 0; g < groups; ++g) {
        std::span<const Vec> qs(proj.queries.data() + g * g_size, g_size);
        AttendResult r = gqa_attend(qs, std::span<const Vec* const>(kp),
                                    std::span<const Vec* const>(vp), scale);
        group_outputs.push_back(std::move(r.output));
        rows.push_back(std::move(r.row));
      }
      sv.full_layer_sparsity[l] =
          layer_sparsity_average(rows, cfg_.threshold_fraction);
      AttentionRow avg;
      avg.scores.assign(keys_[l].size(), 0.0);
      for (const AttentionRow& row : rows) {
        for (std::size_t i = 0; i < avg.scores.size(); ++i)
          avg.scores[i] += row.scores[i];
      }
      for (double& s : avg.scores) s /= static_cast<double>(rows.size());
      sv.full_avg_rows[l] = std::move(avg);

      Vec cat;
      cat.reserve(static_cast<std::size_t>(cfg_.model.head_dim) * groups);
      for (const Vec& go : group_outputs)
        cat.insert(cat.end(), go.begin(), go.end());
      sv.full_outputs[l] = cat;

      sv.queries[l] = std::move(proj.queries);
      sv.keys[l] = keys_[l].back();
      sv.values[l] = values_[l].back();

      hidden = model_.combine(l, hidden, group_outputs);
    }
    next_token_ = model_.readout(hidden);
    pos_ += 1;
    return sv;
  }

 private:
  SimConfig cfg_;
  ToyModel model_;
  std::vector<TokenId> prompt_;
  std::vector<std::vector<Vec>> keys_, values_;  // full-precision cache
  TokenId next_token_ = 0;
  std::int64_t pos_ = 0;
};

double l2_distance(const Vec& a, const Vec& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double t = a[i] - b[i];
    d += t * t;
  }
  return std::sqrt(d);
}

struct StepMetrics {
  std::vector<double> recall;  // only steps with >= 10 tokens
  std::vector<double> error;
  double recall_sum = 0.0;
  std::int64_t recall_count = 0;

  void add(double recall_value, bool truncated, double error_value) {
    error.push_back(error_value);
    if (!truncated) {
      recall.push_back(recall_value);
      recall_sum += recall_value;
      recall_count += 1;
    }
  }
};

class CacheMethod {
 public:
  virtual ~CacheMethod() = default;
  virtual void process(const StepView& sv) = 0;
  virtual RunOutput finish() = 0;
};

// ---------------------------------------------------------------------------
// ThinKV method
// ---------------------------------------------------------------------------

class ThinkvMethod final : public CacheMethod {
 public:
  explicit ThinkvMethod(const SimConfig& cfg)
      : cfg_(cfg), psi_(cfg.effective_psi()) {
    const int layers = cfg.model.num_layers;
    const int pool = static_cast<int>(cfg.effective_pool_blocks());
    for (int l = 0; l < layers; ++l)
      pagers_.emplace_back(static_cast<int>(cfg.block_size), pool);
    segments_.resize(layers);
    open_segment_.assign(layers, -1);
    buffers_.resize(layers);
    group_counter_.assign(layers, 1);
    dump_positions_.insert(cfg.dump_positions.begin(),
                           cfg.dump_positions.end());
  }

  void process(const StepView& sv) override;
  RunOutput finish() override;

 private:
  struct LiveView {
    std::vector<const Vec*> keys, values;
    std::vector<TokenId> ids;
  };

  LiveView live_view(int layer) const;
  void flush_layer(int layer, std::int64_t pos);
  void boundary(const StepView& sv, bool decode);
  void apply_plan(int layer, const EvictionPlan& plan, std::int64_t pos);
  json dump_segments() const;
  json dump_tables() const;

  SimConfig cfg_;
  PrecisionMap psi_;
  std::vector<BlockPager> pagers_;
  std::vector<std::vector<SegmentRecord>> segments_;
  std::vector<int> open_segment_;  // index into segments_[l], -1 = none
  std::vector<std::vector<KVEntry>> buffers_;
  std::vector<std::uint64_t> group_counter_;
  int next_segment_id_ = 0;
  std::vector<double> layer_sparsity_;  // most recent step
  StepMetrics step_metrics_;
  EventLog log_;
  std::int64_t eviction_steps_ = 0;
  std::int64_t transition_calls_ = 0;
  std::int64_t overflow_calls_ = 0;
  std::int64_t infeasible_events_ = 0;
  std::map<std::string, std::int64_t> generated_by_thought_;
  std::set<std::int64_t> dump_positions_;
  json step_dumps_ = json::object();
};

ThinkvMethod::LiveView ThinkvMethod::live_view(int layer) const {
  LiveView view;
  const auto active = pagers_[layer].read_active();
  view.keys.reserve(active.size() + buffers_[layer].size());
  view.values.reserve(active.size() + buffers_[layer].size());
  view.ids.reserve(active.size() + buffers_[layer].size());
  for (const SlotPayload* p : active) {
    view.keys.push_back(&p->key_fp);
    view.values.push_back(&p->value_fp);
    view.ids.push_back(p->id);
  }
  for (const KVEntry& e : buffers_[layer]) {
    view.keys.push_back(&e.key);
    view.values.push_back(&e.value);
    view.ids.push_back(e.step);
  }
  return view;
}

void ThinkvMethod::flush_layer(int layer, std::int64_t pos) {
  auto& buffer = buffers_[layer];
  if (buffer.empty()) return;
  auto& segs = segments_[layer];
  SegmentRecord& open = segs[open_segment_[layer]];
  const ThoughtLabel label = open.thought;
  const int g = static_cast<int>(cfg_.group_size);
  const int d = cfg_.model.head_dim;
  QuantizedWindow w = quantize_window(buffer, label, psi_, g);
  const int n = static_cast<int>(buffer.size());

  std::vector<SlotPayload> slots(n);
  BlockPager& pager = pagers_[layer];
  if (w.raw) {
    for (int t = 0; t < n; ++t) {
      SlotPayload& s = slots[t];
      s.id = buffer[t].step;
      s.step = buffer[t].step;
      s.thought = label;
      s.raw = true;
      s.key_fp = std::move(w.raw_keys[t]);
      s.value_fp = std::move(w.raw_values[t]);
    }
  } else if (w.format == Format::kFp8E4M3) {
    const std::uint64_t kbase = group_counter_[layer]++;
    const std::uint64_t vbase = group_counter_[layer]++;
    GroupScaleRecord kr{w.format, true, 0, w.key_scale_f32, 0,
                        buffer.front().step, buffer.back().step};
    GroupScaleRecord vr{w.format, true, 0, w.value_scale_f32, 0,
                        buffer.front().step, buffer.back().step};
    pager.install_group(kbase, kr);
    pager.install_group(vbase, vr);
    for (int t = 0; t < n; ++t) {
      SlotPayload& s = slots[t];
      s.id = buffer[t].step;
      s.step = buffer[t].step;
      s.thought = label;
      s.format = w.format;
      s.key_codes = std::move(w.key_codes[t]);
      s.value_codes = std::move(w.value_codes[t]);
      s.key_group_base = kbase;
      s.value_group_base = vbase;
      s.shared_scale = true;
      s.group_size = g;
    }
  } else {
    const int chunks = w.value_chunks();
    const std::uint64_t kbase = group_counter_[layer];
    group_counter_[layer] += d;
    for (int c = 0; c < d; ++c) {
      pager.install_group(kbase + c,
                          GroupScaleRecord{w.format, false, w.key_scale_codes[c],
                                           0.0f, 0, buffer.front().step,
                                           buffer.back().step});
    }
    const std::uint64_t vbase = group_counter_[layer];
    group_counter_[layer] += static_cast<std::uint64_t>(n) * chunks;
    for (int t = 0; t < n; ++t) {
      for (int j = 0; j < chunks; ++j) {
        pager.install_group(
            vbase + static_cast<std::uint64_t>(t) * chunks + j,
            GroupScaleRecord{w.format, false, w.value_scale_codes[t][j], 0.0f,
                             0, buffer[t].step, buffer[t].step});
      }
      SlotPayload& s = slots[t];
      s.id = buffer[t].step;
      s.step = buffer[t].step;
      s.thought = label;
      s.format = w.format;
      s.key_codes = std::move(w.key_codes[t]);
      s.value_codes = std::move(w.value_codes[t]);
      s.key_group_base = kbase;
      s.value_group_base = vbase + static_cast<std::uint64_t>(t) * chunks;
      s.value_chunks = chunks;
      s.group_size = g;
    }
  }
  pager.append_tokens(label, std::move(slots), open.start_step);
  log_.emit(json{{"type", "emit"},
                 {"step", pos},
                 {"layer", layer},
                 {"format", w.raw ? "RAW16" : format_name(w.format)},
                 {"tokens", n},
                 {"pad", w.pad}});
  buffer.clear();
}

void ThinkvMethod::apply_plan(int layer, const EvictionPlan& plan,
                              std::int64_t pos) {
  if (plan.empty() && !plan.budget_infeasible) return;
  pagers_[layer].apply_eviction_plan(plan);
  json segs = json::array();
  for (const auto& seg : plan.segments) {
    segs.push_back(json{{"segment", seg.segment_id},
                        {"retained", seg.retained.size()},
                        {"evicted", seg.evicted}});
  }
  const std::int64_t after = total_members(segments_[layer]);
  log_.emit(json{{"type", "evict"},
                 {"trigger", trigger_name(plan.trigger)},
                 {"step", pos},
                 {"layer", layer},
                 {"segments", segs},
                 {"infeasible", plan.budget_infeasible},
                 {"retained_before", after + plan.evicted_count()},
                 {"retained_total", after}});
}

void ThinkvMethod::boundary(const StepView& sv, bool decode) {
  const int layers = cfg_.model.num_layers;
  // Flush partial windows so the closing segments are fully pager-resident.
  for (int l = 0; l < layers; ++l) flush_layer(l, sv.pos);

  bool transition_fired = false;
  for (int l = 0; l < layers; ++l) {
    if (open_segment_[l] < 0) continue;
    SegmentRecord& open = segments_[l][open_segment_[l]];
    open.open = false;
    if (decode && is_transition(open.thought, cfg_.num_thoughts)) {
      EvictionPlan plan = on_transition_end(
          segments_[l], open.start_step,
          [this, l](TokenId id) { return pagers_[l].key_of(id); },
          cfg_.schedule);
      const bool had_predecessors =
          std::any_of(segments_[l].begin(), segments_[l].end(),
                      [&](const SegmentRecord& s) {
                        return s.start_step < open.start_step;
                      });
      apply_plan(l, plan, sv.pos);
      transition_fired = transition_fired || had_predecessors;
    }
    open_segment_[l] = -1;
  }
  if (transition_fired) {
    transition_calls_ += 1;
    eviction_steps_ += 1;
  }

  // Label for the next interval.
  std::vector<int> bands(layers, prefill_thought(cfg_.num_thoughts).band);
  double mean_sparsity = 0.0;
  if (decode) {
    const std::int64_t dstep = sv.pos - cfg_.prompt_len;
    const std::int64_t interval = dstep / cfg_.tau;
    if (cfg_.scripted.has_value()) {
      std::fill(bands.begin(), bands.end(), cfg_.scripted->band_at(interval));
      for (int l = 0; l < layers; ++l) mean_sparsity += layer_sparsity_[l];
      mean_sparsity /= static_cast<double>(layers);
    } else if (cfg_.per_layer_thought) {
      for (int l = 0; l < layers; ++l)
        bands[l] =
            classify(layer_sparsity_[l], cfg_.calibration->thresholds).band;
    } else {
      for (int l : cfg_.calibration->layers)
        mean_sparsity += layer_sparsity_[l];
      mean_sparsity /= static_cast<double>(cfg_.calibration->layers.size());
      const int band = classify(mean_sparsity, cfg_.calibration->thresholds).band;
      std::fill(bands.begin(), bands.end(), band);
    }
    json event{{"type", "refresh"},
               {"step", sv.pos},
               {"dstep", dstep},
               {"sparsity", mean_sparsity}};
    if (cfg_.per_layer_thought && !cfg_.scripted.has_value()) {
      event["bands"] = bands;
    } else {
      event["band"] = bands[0];
    }
    log_.emit(std::move(event));
  }

  for (int l = 0; l < layers; ++l) {
    SegmentRecord seg;
    seg.id = next_segment_id_;
    seg.thought = ThoughtLabel{bands[l]};
    seg.start_step = sv.pos;
    seg.open = true;
    segments_[l].push_back(std::move(seg));
    open_segment_[l] = static_cast<int>(segments_[l].size()) - 1;
  }
  next_segment_id_ += 1;
}

void ThinkvMethod::process(const StepView& sv) {
  const int layers = cfg_.model.num_layers;
  const int groups = cfg_.model.num_groups();
  const int g_size = cfg_.model.gqa_group_size;
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg_.model.head_dim));
  const bool decode = !sv.prefill;

  // 1. Attention over the compressed cache plus the incoming token. The
  //    measured sparsity feeds the classifier at refresh boundaries.
  layer_sparsity_.assign(layers, 0.0);
  double step_error = 0.0;
  double step_recall = 0.0;
  bool truncated = false;
  for (int l = 0; l < layers; ++l) {
    LiveView view = live_view(l);
    view.keys.push_back(&sv.keys[l]);
    view.values.push_back(&sv.values[l]);
    view.ids.push_back(sv.pos);

    std::vector<AttentionRow> rows;
    rows.reserve(groups);
    Vec cat;
    cat.reserve(static_cast<std::size_t>(cfg_.model.head_dim) * groups);
    for (int g = 0; g < groups; ++g) {
      std::span<const Vec> qs(sv.queries[l].data() + g * g_size, g_size);
      AttendResult r =
          gqa_attend(qs, std::span<const Vec* const>(view.keys),
                     std::span<const Vec* const>(view.values), scale);
      cat.insert(cat.end(), r.output.begin(), r.output.end());
      rows.push_back(std::move(r.row));
    }
    layer_sparsity_[l] = layer_sparsity_average(rows, cfg_.threshold_fraction);
    if (decode) {
      step_error += l2_distance(cat, sv.full_outputs[l]);
      const RecallResult rec = recall_at_10(sv.full_avg_rows[l], view.ids);
      step_recall += rec.value;
      truncated = rec.truncated;
    }
  }
  if (decode) {
    step_metrics_.add(step_recall / layers, truncated, step_error / layers);
  }

  // 2. Segment bookkeeping at refresh boundaries (prefill intervals use the
  //    same tau grid; prompt tokens are typed R and never trigger eviction).
  const std::int64_t boundary_step = decode ? sv.pos - cfg_.prompt_len : sv.pos;
  if (refresh_due(boundary_step, cfg_.tau)) boundary(sv, decode);

  // 3. Buffer the incoming token under the open segment's label.
  for (int l = 0; l < layers; ++l) {
    SegmentRecord& open = segments_[l][open_segment_[l]];
    KVEntry entry;
    entry.key = sv.keys[l];
    entry.value = sv.values[l];
    entry.thought = open.thought;
    entry.step = sv.pos;
    entry.layer = l;
    buffers_[l].push_back(std::move(entry));
    open.member_ids.push_back(sv.pos);
    open.initial_size += 1;
  }
  if (decode) {
    generated_by_thought_[thought_name(
        segments_[0][open_segment_[0]].thought, cfg_.num_thoughts)] += 1;
  }

  // 4. Emit a quantized group once the buffer reaches g.
  if (static_cast<std::int64_t>(buffers_[0].size()) >= cfg_.group_size) {
    for (int l = 0; l < layers; ++l) flush_layer(l, sv.pos);
  }

  // 5. Budget enforcement (Case 2). Member counts can diverge across layers
  //    only in per-layer thought mode, so each layer checks its own total.
  bool any_overflow = false;
  bool infeasible = false;
  for (int l = 0; l < layers; ++l) {
    if (total_members(segments_[l]) <= cfg_.budget) continue;
    EvictionPlan plan = on_budget_overflow(
        segments_[l], cfg_.budget,
        [this, l](TokenId id) { return pagers_[l].key_of(id); },
        cfg_.schedule, cfg_.num_thoughts);
    infeasible = infeasible || plan.budget_infeasible;
    any_overflow = true;
    apply_plan(l, plan, sv.pos);
  }
  if (any_overflow) {
    overflow_calls_ += 1;
    if (decode) eviction_steps_ += 1;
    if (infeasible) infeasible_events_ += 1;
  }

  if (dump_positions_.contains(sv.pos)) {
    step_dumps_[std::to_string(sv.pos)] =
        json{{"block_tables", dump_tables()}, {"segments", dump_segments()}};
  }
}

json ThinkvMethod::dump_segments() const {
  json layers = json::array();
  for (const auto& segs : segments_) {
    json arr = json::array();
    for (const auto& seg : segs) {
      arr.push_back(json{{"id", seg.id},
                         {"band", seg.thought.band},
                         {"thought", thought_name(seg.thought, cfg_.num_thoughts)},
                         {"start", seg.start_step},
                         {"anneal_level", seg.anneal_level},
                         {"open", seg.open},
                         {"initial_size", seg.initial_size},
                         {"size", seg.size()},
                         {"members", seg.member_ids}});
    }
    layers.push_back(std::move(arr));
  }
  return layers;
}

json ThinkvMethod::dump_tables() const {
  json layers = json::array();
  for (const auto& pager : pagers_) layers.push_back(pager.dump());
  return layers;
}

RunOutput ThinkvMethod::finish() {
  const int layers = cfg_.model.num_layers;
  const std::int64_t total_steps = cfg_.prompt_len + cfg_.max_gen_len;
  // Final partial window: quantized with zero padding, then one last budget
  // pass so the post-run state honours the cap.
  for (int l = 0; l < layers; ++l) flush_layer(l, total_steps);
  bool final_overflow = false;
  for (int l = 0; l < layers; ++l) {
    if (open_segment_[l] >= 0) segments_[l][open_segment_[l]].open = false;
    if (total_members(segments_[l]) <= cfg_.budget) continue;
    EvictionPlan plan = on_budget_overflow(
        segments_[l], cfg_.budget,
        [this, l](TokenId id) { return pagers_[l].key_of(id); },
        cfg_.schedule, cfg_.num_thoughts);
    if (plan.budget_infeasible) infeasible_events_ += 1;
    apply_plan(l, plan, total_steps);
    final_overflow = true;
  }
  if (final_overflow) overflow_calls_ += 1;

  RunOutput out;
  RunMetrics& m = out.metrics;
  m.method = "thinkv";
  m.generated_length = cfg_.max_gen_len;
  m.prompt_length = cfg_.prompt_len;
  const int d = cfg_.model.head_dim;

  std::int64_t live_bits = 0;
  std::int64_t live_slots = 0;
  for (int l = 0; l < layers; ++l) {
    const FragmentationStats stats = pagers_[l].fragmentation_stats();
    live_bits += stats.total_live_code_bits();
    live_slots += stats.live_slots;
  }
  std::int64_t live_prompt = 0, live_gen = 0;
  for (const SlotPayload* p : pagers_[0].read_active()) {
    if (p->step < cfg_.prompt_len) {
      live_prompt += 1;
    } else {
      live_gen += 1;
    }
    m.live_by_thought[thought_name(p->thought, cfg_.num_thoughts)] += 1;
  }
  m.live_tokens_final = live_prompt + live_gen;
  m.live_prompt_final = live_prompt;
  m.live_generated_final = live_gen;
  m.generated_by_thought = generated_by_thought_;

  m.avg_bits_per_token =
      live_slots > 0
          ? static_cast<double>(live_bits) / (static_cast<double>(live_slots) * 2.0 * d)
          : 16.0;
  m.a = m.avg_bits_per_token / 16.0;
  m.b = cfg_.max_gen_len > 0
            ? static_cast<double>(live_gen) / static_cast<double>(cfg_.max_gen_len)
            : 1.0;
  const double denom = static_cast<double>(layers) *
                       static_cast<double>(total_steps) * 2.0 * d * 16.0;
  m.memory_footprint_fraction = static_cast<double>(live_bits) / denom;
  m.compression_ratio = m.memory_footprint_fraction > 0.0
                            ? 1.0 / m.memory_footprint_fraction
                            : 0.0;
  m.eviction_call_fraction =
      static_cast<double>(eviction_steps_) / static_cast<double>(cfg_.max_gen_len);
  m.recall_at_10 = step_metrics_.recall;
  m.attention_output_error = step_metrics_.error;
  m.recall_at_10_mean = step_metrics_.recall_count > 0
                            ? step_metrics_.recall_sum / step_metrics_.recall_count
                            : 1.0;
  m.attention_output_error_mean =
      m.attention_output_error.empty()
          ? 0.0
          : std::accumulate(m.attention_output_error.begin(),
                            m.attention_output_error.end(), 0.0) /
                static_cast<double>(m.attention_output_error.size());
  m.eviction_steps = eviction_steps_;
  m.transition_calls = transition_calls_;
  m.overflow_calls = overflow_calls_;
  m.budget_infeasible_events = infeasible_events_;
  m.moved_token_slots = 0;
  for (const auto& pager : pagers_) m.moved_token_slots += pager.moved_slot_count();

  out.events_jsonl = log_.to_jsonl();
  out.final_block_tables = dump_tables();
  out.final_segments = dump_segments();
  out.step_dumps = step_dumps_;
  return out;
}

// ---------------------------------------------------------------------------
// Baselines
// ---------------------------------------------------------------------------

void fill_common(RunMetrics& m, const SimConfig& cfg, const StepMetrics& steps,
                 std::int64_t live_total, std::int64_t live_gen,
                 std::int64_t eviction_steps, std::int64_t moved);

//! Uncompressed reference: the cache is the shadow cache itself.
class FullKvMethod final : public CacheMethod {
 public:
  explicit FullKvMethod(const SimConfig& cfg) : cfg_(cfg) {}

  void process(const StepView& sv) override {
    if (sv.prefill) return;
    // Identical cache, identical evaluation order: zero output error and the
    // whole top-10 retained by definition; recall is still computed honestly.
    std::vector<TokenId> ids(sv.pos + 1);
    std::iota(ids.begin(), ids.end(), 0);
    double recall = 0.0;
    bool truncated = false;
    for (int l = 0; l < cfg_.model.num_layers; ++l) {
      const RecallResult r = recall_at_10(sv.full_avg_rows[l], ids);
      recall += r.value;
      truncated = r.truncated;
    }
    step_metrics_.add(recall / cfg_.model.num_layers, truncated, 0.0);
    total_ = sv.pos + 1;
  }

  RunOutput finish() override {
    RunOutput out;
    RunMetrics& m = out.metrics;
    m.method = "full_kv";
    fill_common(m, cfg_, step_metrics_, total_, total_ - cfg_.prompt_len, 0, 0);
    return out;
  }

 private:
  SimConfig cfg_;
  StepMetrics step_metrics_;
  std::int64_t total_ = 0;
};

void fill_common(RunMetrics& m, const SimConfig& cfg,
                 const StepMetrics& steps, std::int64_t live_total,
                 std::int64_t live_gen, std::int64_t eviction_steps,
                 std::int64_t moved) {
  m.generated_length = cfg.max_gen_len;
  m.prompt_length = cfg.prompt_len;
  m.live_tokens_final = live_total;
  m.live_generated_final = live_gen;
  m.live_prompt_final = live_total - live_gen;
  m.avg_bits_per_token = 16.0;
  m.a = 1.0;
  m.b = cfg.max_gen_len > 0
            ? static_cast<double>(live_gen) / static_cast<double>(cfg.max_gen_len)
            : 1.0;
  const std::int64_t total_steps = cfg.prompt_len + cfg.max_gen_len;
  m.memory_footprint_fraction =
      static_cast<double>(live_total) / static_cast<double>(total_steps);
  m.compression_ratio = m.memory_footprint_fraction > 0.0
                            ? 1.0 / m.memory_footprint_fraction
                            : 0.0;
  m.eviction_steps = eviction_steps;
  m.eviction_call_fraction =
      static_cast<double>(eviction_steps) / static_cast<double>(cfg.max_gen_len);
  m.recall_at_10 = steps.recall;
  m.attention_output_error = steps.error;
  m.recall_at_10_mean =
      steps.recall_count > 0 ? steps.recall_sum / steps.recall_count : 1.0;
  m.attention_output_error_mean =
      steps.error.empty()
          ? 0.0
          : std::accumulate(steps.error.begin(), steps.error.end(), 0.0) /
                static_cast<double>(steps.error.size());
  m.moved_token_slots = moved;
}

//! Greedy recency window: keeps the most recent k tokens, evicting exactly
//! one token per decode step once the budget is exceeded.
class RecencyMethod final : public CacheMethod {
 public:
  explicit RecencyMethod(const SimConfig& cfg) : cfg_(cfg) {
    keys_.resize(cfg.model.num_layers);
    values_.resize(cfg.model.num_layers);
  }

  void process(const StepView& sv) override {
    const int layers = cfg_.model.num_layers;
    const int groups = cfg_.model.num_groups();
    const int g_size = cfg_.model.gqa_group_size;
    const double scale =
        1.0 / std::sqrt(static_cast<double>(cfg_.model.head_dim));
    for (int l = 0; l < layers; ++l) {
      keys_[l].push_back(sv.keys[l]);
      values_[l].push_back(sv.values[l]);
    }
    ids_.push_back(sv.pos);
    bool evicted = false;
    while (static_cast<std::int64_t>(ids_.size()) > cfg_.budget) {
      ids_.pop_front();
      for (int l = 0; l < layers; ++l) {
        keys_[l].pop_front();
        values_[l].pop_front();
      }
      evicted = true;
    }
    if (evicted && !sv.prefill) eviction_steps_ += 1;

    if (sv.prefill) return;
    double recall = 0.0;
    double error = 0.0;
    bool truncated = false;
    std::vector<TokenId> ids(ids_.begin(), ids_.end());
    for (int l = 0; l < layers; ++l) {
      std::vector<const Vec*> kp, vp;
      kp.reserve(keys_[l].size());
      vp.reserve(values_[l].size());
      for (const Vec& k : keys_[l]) kp.push_back(&k);
      for (const Vec& v : values_[l]) vp.push_back(&v);
      Vec cat;
      for (int g = 0; g < groups; ++g) {
        std::span<const Vec> qs(sv.queries[l].data() + g * g_size, g_size);
        AttendResult r = gqa_attend(qs, std::span<const Vec* const>(kp),
                                    std::span<const Vec* const>(vp), scale);
        cat.insert(cat.end(), r.output.begin(), r.output.end());
      }
      error += l2_distance(cat, sv.full_outputs[l]);
      const RecallResult rec = recall_at_10(sv.full_avg_rows[l], ids);
      recall += rec.value;
      truncated = rec.truncated;
    }
    step_metrics_.add(recall / layers, truncated, error / layers);
  }

  RunOutput finish() override {
    RunOutput out;
    RunMetrics& m = out.metrics;
    m.method = "recency_window_per_step";
    std::int64_t live_gen = 0;
    for (TokenId id : ids_)
      if (id >= cfg_.prompt_len) ++live_gen;
    fill_common(m, cfg_, step_metrics_,
                static_cast<std::int64_t>(ids_.size()), live_gen,
                eviction_steps_, 0);
    return out;
  }

 private:
  SimConfig cfg_;
  std::deque<TokenId> ids_;
  std::vector<std::deque<Vec>> keys_, values_;
  StepMetrics step_metrics_;
  std::int64_t eviction_steps_ = 0;
};

//! Attention-score top-k eviction with physical compaction: once the budget
//! is exceeded the lowest-scoring token is dropped each step and every
//! trailing token shifts down one slot. The moved-slot count is the cost
//! proxy for gather bandwidth.
class GatherMethod final : public CacheMethod {
 public:
  explicit GatherMethod(const SimConfig& cfg) : cfg_(cfg) {
    keys_.resize(cfg.model.num_layers);
    values_.resize(cfg.model.num_layers);
    ids_.resize(cfg.model.num_layers);
  }

  void process(const StepView& sv) override {
    const int layers = cfg_.model.num_layers;
    const int groups = cfg_.model.num_groups();
    const int g_size = cfg_.model.gqa_group_size;
    const double scale =
        1.0 / std::sqrt(static_cast<double>(cfg_.model.head_dim));
    double recall = 0.0;
    double error = 0.0;
    bool truncated = false;
    bool evicted = false;
    for (int l = 0; l < layers; ++l) {
      keys_[l].push_back(sv.keys[l]);
      values_[l].push_back(sv.values[l]);
      ids_[l].push_back(sv.pos);

      std::vector<const Vec*> kp, vp;
      kp.reserve(keys_[l].size());
      vp.reserve(values_[l].size());
      for (const Vec& k : keys_[l]) kp.push_back(&k);
      for (const Vec& v : values_[l]) vp.push_back(&v);
      Vec cat;
      AttentionRow avg;
      avg.scores.assign(kp.size(), 0.0);
      for (int g = 0; g < groups; ++g) {
        std::span<const Vec> qs(sv.queries[l].data() + g * g_size, g_size);
        AttendResult r = gqa_attend(qs, std::span<const Vec* const>(kp),
                                    std::span<const Vec* const>(vp), scale);
        cat.insert(cat.end(), r.output.begin(), r.output.end());
        for (std::size_t i = 0; i < avg.scores.size(); ++i)
          avg.scores[i] += r.row.scores[i];
      }
      for (double& s : avg.scores) s /= static_cast<double>(groups);

      if (!sv.prefill) {
        error += l2_distance(cat, sv.full_outputs[l]);
        const RecallResult rec = recall_at_10(sv.full_avg_rows[l], ids_[l]);
        recall += rec.value;
        truncated = rec.truncated;
      }

      if (static_cast<std::int64_t>(ids_[l].size()) > cfg_.budget) {
        std::size_t victim = 0;
        for (std::size_t i = 1; i < avg.scores.size(); ++i)
          if (avg.scores[i] < avg.scores[victim]) victim = i;
        moved_ += static_cast<std::int64_t>(ids_[l].size() - victim - 1);
        ids_[l].erase(ids_[l].begin() + victim);
        keys_[l].erase(keys_[l].begin() + victim);
        values_[l].erase(values_[l].begin() + victim);
        evicted = true;
      }
    }
    if (!sv.prefill) {
      step_metrics_.add(recall / layers, truncated, error / layers);
      if (evicted) eviction_steps_ += 1;
    }
  }

  RunOutput finish() override {
    RunOutput out;
    RunMetrics& m = out.metrics;
    m.method = "gather_compaction";
    std::int64_t live_gen = 0;
    for (TokenId id : ids_[0])
      if (id >= cfg_.prompt_len) ++live_gen;
    fill_common(m, cfg_, step_metrics_,
                static_cast<std::int64_t>(ids_[0].size()), live_gen,
                eviction_steps_, moved_);
    return out;
  }

 private:
  SimConfig cfg_;
  std::vector<std::vector<TokenId>> ids_;
  std::vector<std::vector<Vec>> keys_, values_;
  StepMetrics step_metrics_;
  std::int64_t eviction_steps_ = 0;
  std::int64_t moved_ = 0;
};

void drive(const SimConfig& cfg, std::span<CacheMethod* const> methods) {
  ShadowStream shadow(cfg);
  const std::int64_t steps = shadow.total_steps();
  for (std::int64_t i = 0; i < steps; ++i) {
    const StepView sv = shadow.step();
    for (CacheMethod* m : methods) m->process(sv);
  }
}

void require_valid(const SimConfig& cfg) {
  const auto errors = cfg.validate();
  if (!errors.empty()) {
    std::string what = "invalid simulation config:";
    for (const auto& e : errors) what += "\n  - " + e;
    throw Error(ErrorKind::kConfig, what);
  }
}

}  // namespace

RunOutput generation_loop(const SimConfig& config) {
  require_valid(config);
  ThinkvMethod thinkv(config);
  CacheMethod* methods[] = {&thinkv};
  drive(config, methods);
  return thinkv.finish();
}

std::vector<RunOutput> run_compare(const SimConfig& config) {
  require_valid(config);
  ThinkvMethod thinkv(config);
  FullKvMethod full(config);
  RecencyMethod recency(config);
  GatherMethod gather(config);
  CacheMethod* methods[] = {&thinkv, &full, &recency, &gather};
  drive(config, methods);
  std::vector<RunOutput> out;
  out.push_back(thinkv.finish());
  out.push_back(full.finish());
  out.push_back(recency.finish());
  out.push_back(gather.finish());
  return out;
}

RunOutput run_baseline(const SimConfig& config, const std::string& kind) {
  require_valid(config);
  std::unique_ptr<CacheMethod> method;
  if (kind == "full_kv") {
    method = std::make_unique<FullKvMethod>(config);
  } else if (kind == "recency_window_per_step") {
    method = std::make_unique<RecencyMethod>(config);
  } else if (kind == "gather_compaction") {
    method = std::make_unique<GatherMethod>(config);
  } else {
    throw Error(ErrorKind::kConfig, "unknown baseline '" + kind + "'");
  }
  CacheMethod* methods[] = {method.get()};
  drive(config, methods);
  return method->finish();
}

std::vector<std::vector<double>> collect_sparsity_record(const SimConfig& config) {
  const auto errors = config.model.validate();
  if (!errors.empty())
    throw Error(ErrorKind::kConfig, "invalid model config: " + errors.front());
  ShadowStream shadow(config);
  std::vector<std::vector<double>> record(config.model.num_layers);
  const std::int64_t steps = shadow.total_steps();
  for (std::int64_t i = 0; i < steps; ++i) {
    const StepView sv = shadow.step();
    if (sv.prefill) continue;  // calibration observes decode steps
    for (int l = 0; l < config.model.num_layers; ++l)
      record[l].push_back(sv.full_layer_sparsity[l]);
  }
  return record;
}

}  // namespace thinkv
