// Copyright (C) 2026 ThinKV Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "thinkv/common.hpp"

namespace thinkv {

//! Descending per-anneal retention counts with a hard floor at the last
//! entry. Default {64, 32, 16, 8, 4}.
struct RetentionSchedule {
  std::vector<std::int64_t> levels{64, 32, 16, 8, 4};

  std::int64_t floor() const { return levels.back(); }
  //! Retention count for a segment selected for eviction the n-th time
  //! (n counted from 0); clamps at the floor.
  std::int64_t anneal_size(int n) const;
  std::vector<std::string> validate() const;
};

//! A contiguous thought segment: one refresh interval's worth of tokens.
//! member_ids holds the currently retained token ids in ascending order.
struct SegmentRecord {
  int id = 0;
  ThoughtLabel thought;
  std::int64_t start_step = 0;
  std::vector<TokenId> member_ids;
  int anneal_level = 0;  // times selected for eviction
  bool open = false;     // still receiving tokens; exempt from eviction
  std::int64_t initial_size = 0;

  std::int64_t size() const { return static_cast<std::int64_t>(member_ids.size()); }
};

enum class TriggerCase { kTransitionEnd, kBudgetOverflow };
std::string trigger_name(TriggerCase c);

struct SegmentEviction {
  int segment_id = 0;
  std::vector<TokenId> retained;
  std::vector<TokenId> evicted;
};

struct EvictionPlan {
  TriggerCase trigger = TriggerCase::kTransitionEnd;
  std::vector<SegmentEviction> segments;
  bool budget_infeasible = false;

  bool empty() const { return segments.empty(); }
  std::int64_t evicted_count() const;
};

using KeyLookup = std::function<Vec(TokenId)>;

// ---------------------------------------------------------------------------
// Deterministic K-means medoid selection over post-RoPE keys.
//
// Farthest-first initialization seeded at the lowest token id, Lloyd's
// iterations (max 50, centroid-movement tolerance 1e-6), then the member key
// nearest each centroid is retained so every kept key still pairs with its
// real value token. All ties break toward the lowest token id.
// ---------------------------------------------------------------------------

struct KmeansClustering {
  std::vector<int> assignment;    // per input index
  std::vector<Vec> centroids;
  std::vector<TokenId> medoids;   // ascending token ids, one per cluster
  double cost = 0.0;              // sum of squared distances to centroids
  int iterations = 0;
};

KmeansClustering kmeans_cluster(std::span<const TokenId> ids,
                                std::span<const Vec> keys, std::int64_t k);

//! Retained ids (|ids| = min(m, k)), ascending.
std::vector<TokenId> kmeans_select(std::span<const TokenId> ids,
                                   std::span<const Vec> keys, std::int64_t k);

// ---------------------------------------------------------------------------
// Definition-3 trigger cases. Both mutate the segment records (retained
// members and anneal levels) and return the plan of evicted ids for the
// pager.
// ---------------------------------------------------------------------------

//! Case 1: a transition segment starting at closing_start_step just closed.
//! Every earlier segment (all types, including previous transitions) is
//! annealed one level; segments already at or below the floor keep their
//! tokens but still advance their anneal level.
EvictionPlan on_transition_end(std::vector<SegmentRecord>& segments,
                               std::int64_t closing_start_step,
                               const KeyLookup& key_of,
                               const RetentionSchedule& schedule);

//! Case 2: total cached tokens exceed the budget. Repeatedly anneals the
//! least important (by rho), oldest closed segment until the total fits or
//! everything sits at the floor; in the latter case the plan carries the
//! budget-infeasible signal and the caller decides how to proceed.
EvictionPlan on_budget_overflow(std::vector<SegmentRecord>& segments,
                                std::int64_t budget, const KeyLookup& key_of,
                                const RetentionSchedule& schedule,
                                int num_thoughts);

std::int64_t total_members(std::span<const SegmentRecord> segments);

}  // namespace thinkv
