// Copyright (C) 2026 ThinKV Authors
// SPDX-License-Identifier: Apache-2.0

#include "thinkv/attention.hpp"

#include <algorithm>
#include <cmath>

#include "thinkv/errors.hpp"

namespace thinkv {

std::vector<std::string> ModelConfig::validate() const {
  std::vector<std::string> errors;
  if (num_layers < 1) errors.push_back("model.num_layers must be >= 1");
  if (head_dim < 1) errors.push_back("model.head_dim must be >= 1");
  if (num_heads < 1) errors.push_back("model.num_heads must be >= 1");
  if (gqa_group_size < 1) errors.push_back("model.gqa_group_size must be >= 1");
  if (embed_dim < 1) errors.push_back("model.embed_dim must be >= 1");
  if (num_heads >= 1 && gqa_group_size >= 1 && num_heads % gqa_group_size != 0)
    errors.push_back("model.num_heads must be divisible by gqa_group_size");
  if (sink_tokens < 0) errors.push_back("model.sink_tokens must be >= 0");
  return errors;
}

double AttentionRow::sum() const {
  double s = 0.0;
  for (double x : scores) s += x;
  return s;
}

Vec scaled_logits(const Vec& q, std::span<const Vec* const> keys, double scale) {
  if (keys.empty())
    throw Error(ErrorKind::kStructural, "attention over an empty cache");
  Vec logits(keys.size());
  for (std::size_t i = 0; i < keys.size(); ++i) {
    const Vec& key = *keys[i];
    if (key.size() != q.size())
      throw Error(ErrorKind::kStructural, "key/query dimension mismatch");
    double dot = 0.0;
    for (std::size_t c = 0; c < q.size(); ++c) dot += q[c] * key[c];
    logits[i] = dot * scale;
  }
  return logits;
}

Vec scaled_logits(const Vec& q, std::span<const Vec> keys, double scale) {
  std::vector<const Vec*> ptrs;
  ptrs.reserve(keys.size());
  for (const Vec& k : keys) ptrs.push_back(&k);
  return scaled_logits(q, std::span<const Vec* const>(ptrs), scale);
}

AttentionRow softmax_row(const Vec& logits) {
  if (logits.empty())
    throw Error(ErrorKind::kStructural, "softmax over an empty row");
  const double m = *std::max_element(logits.begin(), logits.end());
  AttentionRow row;
  row.scores.resize(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    row.scores[i] = std::exp(logits[i] - m);
    sum += row.scores[i];
  }
  for (double& s : row.scores) s /= sum;
  return row;
}

namespace {

Vec weighted_values(const AttentionRow& row, std::span<const Vec* const> values) {
  Vec out(values[0]->size(), 0.0);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const Vec& v = *values[i];
    for (std::size_t c = 0; c < out.size(); ++c) out[c] += row.scores[i] * v[c];
  }
  return out;
}

std::vector<const Vec*> as_ptrs(std::span<const Vec> xs) {
  std::vector<const Vec*> ptrs;
  ptrs.reserve(xs.size());
  for (const Vec& x : xs) ptrs.push_back(&x);
  return ptrs;
}

}  // namespace

AttendResult attend(const Vec& q, std::span<const Vec> keys,
                    std::span<const Vec> values, double scale) {
  if (keys.size() != values.size())
    throw Error(ErrorKind::kStructural, "key/value count mismatch");
  if (keys.empty())
    throw Error(ErrorKind::kStructural, "attention over an empty cache");
  for (const Vec& v : values) {
    if (v.size() != q.size())
      throw Error(ErrorKind::kStructural, "value/query dimension mismatch");
  }
  AttendResult result;
  result.row = softmax_row(scaled_logits(q, keys, scale));
  result.output = weighted_values(result.row, as_ptrs(values));
  return result;
}

AttendResult attend(const Vec& q, std::span<const Vec> keys,
                    std::span<const Vec> values) {
  return attend(q, keys, values, 1.0 / std::sqrt(static_cast<double>(q.size())));
}

AttentionRow gqa_aggregate(std::span<const Vec> per_query_logit_rows) {
  if (per_query_logit_rows.empty())
    throw Error(ErrorKind::kStructural, "gqa_aggregate: empty query group");
  const std::size_t n = per_query_logit_rows[0].size();
  Vec pooled = per_query_logit_rows[0];
  for (std::size_t g = 1; g < per_query_logit_rows.size(); ++g) {
    if (per_query_logit_rows[g].size() != n)
      throw Error(ErrorKind::kStructural, "gqa_aggregate: ragged logit rows");
    for (std::size_t i = 0; i < n; ++i)
      pooled[i] = std::max(pooled[i], per_query_logit_rows[g][i]);
  }
  return softmax_row(pooled);
}

AttendResult gqa_attend(std::span<const Vec> queries,
                        std::span<const Vec* const> keys,
                        std::span<const Vec* const> values, double scale) {
  if (queries.empty())
    throw Error(ErrorKind::kStructural, "gqa_attend: empty query group");
  if (keys.size() != values.size())
    throw Error(ErrorKind::kStructural, "key/value count mismatch");
  std::vector<Vec> logit_rows;
  logit_rows.reserve(queries.size());
  for (const Vec& q : queries) logit_rows.push_back(scaled_logits(q, keys, scale));
  AttendResult result;
  result.row = gqa_aggregate(logit_rows);
  result.output = weighted_values(result.row, values);
  return result;
}

AttendResult gqa_attend(std::span<const Vec> queries, std::span<const Vec> keys,
                        std::span<const Vec> values, double scale) {
  const auto key_ptrs = as_ptrs(keys);
  const auto value_ptrs = as_ptrs(values);
  return gqa_attend(queries, std::span<const Vec* const>(key_ptrs),
                    std::span<const Vec* const>(value_ptrs), scale);
}

double sparsity(const AttentionRow& row, double threshold_fraction) {
  if (row.scores.empty())
    throw Error(ErrorKind::kStructural, "sparsity of an empty row");
  const double m = *std::max_element(row.scores.begin(), row.scores.end());
  const double threshold = threshold_fraction * m;
  std::size_t below = 0;
  for (double s : row.scores) {
    if (s < threshold) ++below;  // strict: a uniform row has sparsity 0
  }
  return static_cast<double>(below) / static_cast<double>(row.scores.size());
}

double layer_sparsity_average(std::span<const AttentionRow> rows,
                              double threshold_fraction) {
  if (rows.empty())
    throw Error(ErrorKind::kStructural, "layer_sparsity_average: no rows");
  double sum = 0.0;
  for (const AttentionRow& row : rows) sum += sparsity(row, threshold_fraction);
  return sum / static_cast<double>(rows.size());
}

void apply_rotary(Vec& v, std::int64_t position, double base) {
  const std::size_t pairs = v.size() / 2;
  const double d = static_cast<double>(v.size());
  for (std::size_t i = 0; i < pairs; ++i) {
    const double theta =
        static_cast<double>(position) *
        std::pow(base, -2.0 * static_cast<double>(i) / d);
    const double c = std::cos(theta);
    const double s = std::sin(theta);
    const double a = v[2 * i];
    const double b = v[2 * i + 1];
    v[2 * i] = a * c - b * s;
    v[2 * i + 1] = a * s + b * c;
  }
}

}  // namespace thinkv
