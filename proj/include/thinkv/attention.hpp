// Copyright (C) 2026 ThinKV Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "thinkv/common.hpp"

namespace thinkv {

struct ModelConfig {
  int num_layers = 4;
  int head_dim = 16;
  int num_heads = 4;
  int gqa_group_size = 1;  // 1 = MHA
  int embed_dim = 32;      // shared vocabulary size / embedding width
  std::uint64_t seed = 1;
  // Content bias giving the first few positions an attention-sink character,
  // mirroring the sink behaviour of trained models.
  int sink_tokens = 4;
  double sink_scale = 2.0;

  int num_groups() const { return num_heads / gqa_group_size; }
  std::vector<std::string> validate() const;
};

//! One post-softmax attention row: nonnegative scores summing to 1.
struct AttentionRow {
  Vec scores;

  std::size_t size() const { return scores.size(); }
  double sum() const;
};

//! Scaled dot products q . k_i * scale for every cached key.
Vec scaled_logits(const Vec& q, std::span<const Vec> keys, double scale);
Vec scaled_logits(const Vec& q, std::span<const Vec* const> keys, double scale);

AttentionRow softmax_row(const Vec& logits);

struct AttendResult {
  Vec output;
  AttentionRow row;
};

//! Single-query attention over a cache of n keys/values. Throws a structural
//! error on a dimension mismatch and an empty-cache error when n = 0.
AttendResult attend(const Vec& q, std::span<const Vec> keys,
                    std::span<const Vec> values, double scale);
//! Convenience overload using the canonical 1/sqrt(d) scale.
AttendResult attend(const Vec& q, std::span<const Vec> keys,
                    std::span<const Vec> values);

//! GQA consolidation: element-wise max over the group's logit rows, then
//! softmax along the key dimension.
AttentionRow gqa_aggregate(std::span<const Vec> per_query_logit_rows);

AttendResult gqa_attend(std::span<const Vec> queries, std::span<const Vec> keys,
                        std::span<const Vec> values, double scale);
AttendResult gqa_attend(std::span<const Vec> queries,
                        std::span<const Vec* const> keys,
                        std::span<const Vec* const> values, double scale);

//! Fraction of row entries strictly below threshold_fraction * max(row).
double sparsity(const AttentionRow& row, double threshold_fraction = 0.01);

//! Arithmetic mean of per-head (or per-group) sparsity values.
double layer_sparsity_average(std::span<const AttentionRow> rows,
                              double threshold_fraction = 0.01);

//! Rotary position embedding applied in place over channel pairs.
void apply_rotary(Vec& v, std::int64_t position, double base = 10000.0);

}  // namespace thinkv
