// Copyright (C) 2026 ThinKV Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "thinkv/errors.hpp"
#include "thinkv/evictor.hpp"
#include "thinkv/rng.hpp"

using namespace thinkv;

namespace {

std::map<TokenId, Vec> random_keys(Rng& rng, std::span<const TokenId> ids,
                                   int d) {
  std::map<TokenId, Vec> keys;
  for (TokenId id : ids) {
    Vec v(d);
    for (double& x : v) x = rng.gaussian();
    keys[id] = v;
  }
  return keys;
}

KeyLookup lookup_of(const std::map<TokenId, Vec>& keys) {
  return [&keys](TokenId id) { return keys.at(id); };
}

SegmentRecord make_segment(int id, ThoughtLabel thought, std::int64_t start,
                           std::int64_t size) {
  SegmentRecord seg;
  seg.id = id;
  seg.thought = thought;
  seg.start_step = start;
  for (std::int64_t i = 0; i < size; ++i) seg.member_ids.push_back(start + i);
  seg.initial_size = size;
  return seg;
}

std::map<TokenId, Vec> keys_for_segments(Rng& rng,
                                         std::span<const SegmentRecord> segs,
                                         int d) {
  std::vector<TokenId> all;
  for (const auto& s : segs)
    all.insert(all.end(), s.member_ids.begin(), s.member_ids.end());
  return random_keys(rng, all, d);
}

// Exhaustive search over all assignments into at most K clusters; cost is
// summed squared distance to cluster means.
double optimal_partition_cost(std::span<const Vec> keys, int k) {
  const int m = static_cast<int>(keys.size());
  const int d = static_cast<int>(keys[0].size());
  double best = std::numeric_limits<double>::infinity();
  std::vector<int> assign(m, 0);
  const auto total = static_cast<std::size_t>(std::pow(k, m));
  for (std::size_t code = 0; code < total; ++code) {
    std::size_t c = code;
    for (int i = 0; i < m; ++i) {
      assign[i] = static_cast<int>(c % k);
      c /= k;
    }
    std::vector<Vec> means(k, Vec(d, 0.0));
    std::vector<int> counts(k, 0);
    for (int i = 0; i < m; ++i) {
      counts[assign[i]] += 1;
      for (int ch = 0; ch < d; ++ch) means[assign[i]][ch] += keys[i][ch];
    }
    for (int cl = 0; cl < k; ++cl) {
      if (counts[cl] == 0) continue;
      for (double& x : means[cl]) x /= counts[cl];
    }
    double cost = 0.0;
    for (int i = 0; i < m; ++i) {
      for (int ch = 0; ch < d; ++ch) {
        const double t = keys[i][ch] - means[assign[i]][ch];
        cost += t * t;
      }
    }
    best = std::min(best, cost);
  }
  return best;
}

}  // namespace

TEST_CASE("retention schedule arithmetic") {
  RetentionSchedule schedule;
  CHECK(schedule.anneal_size(0) == 64);
  CHECK(schedule.anneal_size(1) == 32);
  CHECK(schedule.anneal_size(4) == 4);
  CHECK(schedule.anneal_size(9) == 4);  // clamped at the floor
  CHECK(schedule.floor() == 4);
  CHECK(schedule.validate().empty());

  RetentionSchedule bad;
  bad.levels = {16, 16, 4};
  CHECK_FALSE(bad.validate().empty());
  bad.levels = {16, 8, 0};
  CHECK_FALSE(bad.validate().empty());
}

TEST_CASE("kmeans_select: identity when k >= m") {
  Rng rng(1);
  std::vector<TokenId> ids{5, 9, 12, 20};
  const auto keys_map = random_keys(rng, ids, 4);
  std::vector<Vec> keys;
  for (TokenId id : ids) keys.push_back(keys_map.at(id));
  CHECK(kmeans_select(ids, keys, 4) == ids);
  CHECK(kmeans_select(ids, keys, 10) == ids);
}

TEST_CASE("kmeans_select: identical keys keep the lowest id") {
  std::vector<TokenId> ids{3, 4, 5, 6, 7, 8, 9, 10};
  std::vector<Vec> keys(ids.size(), Vec{1.0, 2.0});
  const auto kept = kmeans_select(ids, keys, 1);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0] == 3);
  // k = 2 on identical keys still returns two real tokens.
  CHECK(kmeans_select(ids, keys, 2).size() == 2);
}

TEST_CASE("kmeans_select: two separated blobs, one medoid each") {
  Rng rng(2);
  std::vector<TokenId> ids;
  std::vector<Vec> keys;
  for (int i = 0; i < 4; ++i) {
    ids.push_back(i);
    keys.push_back(Vec{10.0 + 0.1 * rng.gaussian(), 0.1 * rng.gaussian()});
  }
  for (int i = 4; i < 8; ++i) {
    ids.push_back(i);
    keys.push_back(Vec{-10.0 + 0.1 * rng.gaussian(), 0.1 * rng.gaussian()});
  }
  const auto kept = kmeans_select(ids, keys, 2);
  REQUIRE(kept.size() == 2);
  CHECK(kept[0] < 4);   // one from the first blob
  CHECK(kept[1] >= 4);  // one from the second

  // Lloyd's must reach the exhaustive-partition optimum on separated blobs.
  const KmeansClustering clustering = kmeans_cluster(ids, keys, 2);
  const double best = optimal_partition_cost(keys, 2);
  CHECK(clustering.cost == doctest::Approx(best).epsilon(1e-9));
}

TEST_CASE("kmeans near-optimality on random instances (m <= 10, k <= 3)") {
  Rng rng(3);
  for (int trial = 0; trial < 60; ++trial) {
    const int m = static_cast<int>(rng.uniform_int(2, 10));
    const int k = static_cast<int>(rng.uniform_int(1, std::min(3, m)));
    std::vector<TokenId> ids(m);
    std::vector<Vec> keys(m);
    for (int i = 0; i < m; ++i) {
      ids[i] = i;
      keys[i] = Vec{rng.gaussian(), rng.gaussian(), rng.gaussian()};
    }
    const KmeansClustering clustering = kmeans_cluster(ids, keys, k);
    const double best = optimal_partition_cost(keys, k);
    CHECK(clustering.cost <= best * 1.10 + 1e-12);
    CHECK(clustering.medoids.size() == static_cast<std::size_t>(std::min(m, k)));
  }
}

TEST_CASE("transition end anneals fresh segments to the first level") {
  RetentionSchedule schedule;
  Rng rng(4);
  std::vector<SegmentRecord> segs{
      make_segment(0, kThoughtR, 0, 128),
      make_segment(1, kThoughtE, 128, 128),
      make_segment(2, kThoughtR, 256, 128),
  };
  // Closing transition segment starts at 384.
  const auto keys = keys_for_segments(rng, segs, 4);
  const EvictionPlan plan =
      on_transition_end(segs, 384, lookup_of(keys), schedule);
  CHECK(plan.trigger == TriggerCase::kTransitionEnd);
  REQUIRE(plan.segments.size() == 3);
  for (const auto& seg : segs) {
    CHECK(seg.size() == 64);
    CHECK(seg.anneal_level == 1);
  }
  for (const auto& ev : plan.segments) {
    CHECK(ev.retained.size() == 64);
    CHECK(ev.evicted.size() == 64);
  }
}

TEST_CASE("transition end: floor segments unchanged, level still advances") {
  RetentionSchedule schedule;
  Rng rng(5);
  std::vector<SegmentRecord> segs{make_segment(0, kThoughtE, 0, 4)};
  segs[0].anneal_level = 5;
  const auto keys = keys_for_segments(rng, segs, 4);
  const EvictionPlan plan = on_transition_end(segs, 100, lookup_of(keys), schedule);
  CHECK(plan.empty());
  CHECK(segs[0].size() == 4);
  CHECK(segs[0].anneal_level == 6);
}

TEST_CASE("transition end with no preceding segments is a no-op") {
  RetentionSchedule schedule;
  std::vector<SegmentRecord> segs;
  const EvictionPlan plan = on_transition_end(
      segs, 0, [](TokenId) { return Vec{0.0}; }, schedule);
  CHECK(plan.empty());
}

TEST_CASE("transition end skips the open segment and later segments") {
  RetentionSchedule schedule;
  Rng rng(6);
  std::vector<SegmentRecord> segs{
      make_segment(0, kThoughtR, 0, 100),
      make_segment(1, kThoughtT, 100, 50),   // the closing transition itself
      make_segment(2, kThoughtR, 150, 30),
  };
  segs[2].open = true;
  const auto keys = keys_for_segments(rng, segs, 4);
  on_transition_end(segs, 100, lookup_of(keys), schedule);
  CHECK(segs[0].size() == 64);
  CHECK(segs[1].size() == 50);  // not annealed at its own close
  CHECK(segs[2].size() == 30);  // open segment untouched
}

TEST_CASE("repeated transitions walk the schedule with a floor clamp") {
  RetentionSchedule schedule;
  Rng rng(7);
  std::vector<SegmentRecord> segs{make_segment(0, kThoughtR, 0, 128)};
  const auto keys = keys_for_segments(rng, segs, 4);
  const std::int64_t expect[] = {64, 32, 16, 8, 4, 4, 4};
  for (int n = 0; n < 7; ++n) {
    on_transition_end(segs, 1000 + n, lookup_of(keys), schedule);
    CHECK(segs[0].size() == expect[n]);
    CHECK(segs[0].anneal_level == n + 1);
  }
}

TEST_CASE("retained ids stay a subset of the original members") {
  RetentionSchedule schedule;
  Rng rng(8);
  std::vector<SegmentRecord> segs{make_segment(0, kThoughtE, 0, 100)};
  const std::set<TokenId> original(segs[0].member_ids.begin(),
                                   segs[0].member_ids.end());
  const auto keys = keys_for_segments(rng, segs, 4);
  for (int n = 0; n < 4; ++n) {
    on_transition_end(segs, 500 + n, lookup_of(keys), schedule);
    for (TokenId id : segs[0].member_ids) CHECK(original.contains(id));
    CHECK(std::is_sorted(segs[0].member_ids.begin(), segs[0].member_ids.end()));
  }
}

TEST_CASE("budget overflow anneals the least important, oldest segment first") {
  RetentionSchedule schedule;
  Rng rng(9);
  // rho(E) < rho(R): the E segment goes first even though R is older.
  std::vector<SegmentRecord> segs{
      make_segment(0, kThoughtR, 0, 100),
      make_segment(1, kThoughtE, 100, 100),
  };
  const auto keys = keys_for_segments(rng, segs, 4);
  const EvictionPlan plan =
      on_budget_overflow(segs, 164, lookup_of(keys), schedule, 3);
  CHECK(plan.trigger == TriggerCase::kBudgetOverflow);
  CHECK_FALSE(plan.budget_infeasible);
  CHECK(segs[1].size() == 64);   // E annealed
  CHECK(segs[0].size() == 100);  // R untouched
  CHECK(total_members(segs) <= 164);
}

TEST_CASE("budget overflow ties break towards the older segment") {
  RetentionSchedule schedule;
  Rng rng(10);
  std::vector<SegmentRecord> segs{
      make_segment(0, kThoughtE, 200, 100),
      make_segment(1, kThoughtE, 50, 100),  // older
  };
  const auto keys = keys_for_segments(rng, segs, 4);
  on_budget_overflow(segs, 164, lookup_of(keys), schedule, 3);
  CHECK(segs[1].size() == 64);
  CHECK(segs[0].size() == 100);
}

TEST_CASE("budget overflow within budget is a no-op") {
  RetentionSchedule schedule;
  Rng rng(11);
  std::vector<SegmentRecord> segs{make_segment(0, kThoughtR, 0, 50)};
  const auto keys = keys_for_segments(rng, segs, 4);
  const EvictionPlan plan =
      on_budget_overflow(segs, 100, lookup_of(keys), schedule, 3);
  CHECK(plan.empty());
  CHECK(segs[0].size() == 50);
}

TEST_CASE("budget overflow signals infeasibility at the floor") {
  RetentionSchedule schedule;
  Rng rng(12);
  std::vector<SegmentRecord> segs{
      make_segment(0, kThoughtR, 0, 4),
      make_segment(1, kThoughtE, 4, 4),
      make_segment(2, kThoughtT, 8, 4),
  };
  const auto keys = keys_for_segments(rng, segs, 4);
  const EvictionPlan plan =
      on_budget_overflow(segs, 8, lookup_of(keys), schedule, 3);
  CHECK(plan.budget_infeasible);
  for (const auto& seg : segs) CHECK(seg.size() == 4);  // floor holds
}

TEST_CASE("budget overflow drains multiple levels until the total fits") {
  RetentionSchedule schedule;
  Rng rng(13);
  std::vector<SegmentRecord> segs{
      make_segment(0, kThoughtT, 0, 128),
      make_segment(1, kThoughtR, 128, 128),
  };
  segs[1].open = true;  // open segment is exempt
  const auto keys = keys_for_segments(rng, segs, 4);
  const EvictionPlan plan =
      on_budget_overflow(segs, 140, lookup_of(keys), schedule, 3);
  // T (rho 0) anneals 64 -> 32 ... until 128 + size <= 140 => size <= 12 => 8.
  CHECK(segs[0].size() == 8);
  CHECK(segs[1].size() == 128);
  CHECK_FALSE(plan.budget_infeasible);
  CHECK(total_members(segs) <= 140);
  // The plan consolidates repeated annealing of one segment into one entry.
  REQUIRE(plan.segments.size() == 1);
  CHECK(plan.segments[0].retained.size() == 8);
  CHECK(plan.segments[0].evicted.size() == 120);
}

TEST_CASE("schedule arithmetic holds across randomized trigger sequences") {
  Rng rng(14);
  for (int trial = 0; trial < 25; ++trial) {
    RetentionSchedule schedule;
    std::vector<SegmentRecord> segs;
    const int num_segments = static_cast<int>(rng.uniform_int(1, 5));
    std::int64_t start = 0;
    for (int s = 0; s < num_segments; ++s) {
      const std::int64_t size = rng.uniform_int(1, 150);
      segs.push_back(make_segment(
          s, ThoughtLabel{static_cast<int>(rng.uniform_int(0, 2))}, start, size));
      start += size;
    }
    const auto keys = keys_for_segments(rng, segs, 3);
    std::vector<std::int64_t> initial;
    for (const auto& s : segs) initial.push_back(s.size());
    const int triggers = static_cast<int>(rng.uniform_int(1, 7));
    for (int t = 0; t < triggers; ++t)
      on_transition_end(segs, start + t, lookup_of(keys), schedule);
    for (int s = 0; s < num_segments; ++s) {
      // After j triggers a segment holds min over the first j schedule values
      // of min(initial, R_n) -- i.e. min(initial, R_{j-1}) by monotonicity.
      const std::int64_t expect =
          std::min(initial[s], schedule.anneal_size(triggers - 1));
      CHECK(segs[s].size() == expect);
      CHECK(segs[s].anneal_level == triggers);
    }
  }
}
