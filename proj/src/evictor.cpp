// Copyright (C) 2026 ThinKV Authors
// SPDX-License-Identifier: Apache-2.0

#include "thinkv/evictor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <limits>

#include "thinkv/errors.hpp"

namespace thinkv {

std::int64_t RetentionSchedule::anneal_size(int n) const {
  if (n < 0) throw Error(ErrorKind::kStructural, "negative anneal level");
  if (n < static_cast<int>(levels.size())) return levels[n];
  return levels.back();
}

std::vector<std::string> RetentionSchedule::validate() const {
  std::vector<std::string> errors;
  if (levels.empty()) {
    errors.push_back("retention schedule must not be empty");
    return errors;
  }
  for (std::size_t i = 0; i < levels.size(); ++i) {
    if (levels[i] <= 0) errors.push_back("retention levels must be positive");
    if (i > 0 && levels[i] >= levels[i - 1])
      errors.push_back("retention levels must be strictly descending");
  }
  return errors;
}

std::string trigger_name(TriggerCase c) {
  return c == TriggerCase::kTransitionEnd ? "transition_end" : "budget_overflow";
}

std::int64_t EvictionPlan::evicted_count() const {
  std::int64_t n = 0;
  for (const auto& s : segments) n += static_cast<std::int64_t>(s.evicted.size());
  return n;
}

std::int64_t total_members(std::span<const SegmentRecord> segments) {
  std::int64_t n = 0;
  for (const auto& s : segments) n += s.size();
  return n;
}

// ---------------------------------------------------------------------------
// K-means
// ---------------------------------------------------------------------------

namespace {

double dist2(const Vec& a, const Vec& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double t = a[i] - b[i];
    d += t * t;
  }
  return d;
}

}  // namespace

namespace {

std::vector<std::size_t> farthest_first_seeds(std::span<const Vec> keys,
                                              std::size_t K,
                                              std::size_t anchor) {
  const std::size_t m = keys.size();
  std::vector<std::size_t> seeds{anchor};
  std::vector<double> nearest(m, std::numeric_limits<double>::infinity());
  while (seeds.size() < K) {
    for (std::size_t i = 0; i < m; ++i)
      nearest[i] = std::min(nearest[i], dist2(keys[i], keys[seeds.back()]));
    std::size_t far = 0;
    double far_d = -1.0;
    for (std::size_t i = 0; i < m; ++i) {
      const bool taken =
          std::find(seeds.begin(), seeds.end(), i) != seeds.end();
      if (!taken && nearest[i] > far_d) {
        far = i;
        far_d = nearest[i];
      }
    }
    seeds.push_back(far);
  }
  return seeds;
}

KmeansClustering kmeans_from_seeds(std::span<const Vec> keys, std::size_t K,
                                   std::span<const std::size_t> seeds) {
  const std::size_t m = keys.size();
  KmeansClustering out;
  out.centroids.reserve(K);
  for (std::size_t s : seeds) out.centroids.push_back(keys[s]);

  constexpr int kMaxIterations = 50;
  constexpr double kTolerance = 1e-6;
  out.assignment.assign(m, 0);
  std::vector<std::size_t> sizes(K, 0);
  for (int iter = 0; iter < kMaxIterations; ++iter) {
    out.iterations = iter + 1;
    // Assign; ties go to the lowest cluster index.
    for (std::size_t i = 0; i < m; ++i) {
      int best = 0;
      double best_d = dist2(keys[i], out.centroids[0]);
      for (std::size_t c = 1; c < K; ++c) {
        const double d = dist2(keys[i], out.centroids[c]);
        if (d < best_d) {
          best = static_cast<int>(c);
          best_d = d;
        }
      }
      out.assignment[i] = best;
    }
    std::fill(sizes.begin(), sizes.end(), 0);
    for (int a : out.assignment) ++sizes[a];

    // Repair empty clusters deterministically: steal the point farthest from
    // its centroid out of the largest cluster.
    for (std::size_t c = 0; c < K; ++c) {
      if (sizes[c] > 0) continue;
      std::size_t donor = 0;
      for (std::size_t d = 1; d < K; ++d)
        if (sizes[d] > sizes[donor]) donor = d;
      std::size_t steal = m;
      double steal_d = -1.0;
      for (std::size_t i = 0; i < m; ++i) {
        if (out.assignment[i] != static_cast<int>(donor)) continue;
        const double d = dist2(keys[i], out.centroids[donor]);
        if (d > steal_d) {
          steal = i;
          steal_d = d;
        }
      }
      out.assignment[steal] = static_cast<int>(c);
      --sizes[donor];
      ++sizes[c];
    }

    // Update centroids.
    double movement = 0.0;
    std::vector<Vec> next(K, Vec(keys[0].size(), 0.0));
    for (std::size_t i = 0; i < m; ++i) {
      const int a = out.assignment[i];
      for (std::size_t ch = 0; ch < keys[i].size(); ++ch)
        next[a][ch] += keys[i][ch];
    }
    for (std::size_t c = 0; c < K; ++c) {
      for (double& x : next[c]) x /= static_cast<double>(sizes[c]);
      movement = std::max(movement, std::sqrt(dist2(next[c], out.centroids[c])));
    }
    out.centroids = std::move(next);
    if (movement < kTolerance) break;
  }

  // Hartigan-style refinement: single-point moves with exact incremental
  // cost deltas, first improvement in ascending index order. Lifts Lloyd's
  // local optima without losing determinism. Moves that would empty a
  // cluster are skipped.
  {
    std::vector<Vec> sums(K, Vec(keys[0].size(), 0.0));
    std::fill(sizes.begin(), sizes.end(), 0);
    for (std::size_t i = 0; i < m; ++i) {
      ++sizes[out.assignment[i]];
      for (std::size_t ch = 0; ch < keys[i].size(); ++ch)
        sums[out.assignment[i]][ch] += keys[i][ch];
    }
    auto mean_of = [&](std::size_t c) {
      Vec mu = sums[c];
      for (double& x : mu) x /= static_cast<double>(sizes[c]);
      return mu;
    };
    auto apply_move = [&](std::size_t i, std::size_t from, std::size_t to) {
      for (std::size_t ch = 0; ch < keys[i].size(); ++ch) {
        sums[from][ch] -= keys[i][ch];
        sums[to][ch] += keys[i][ch];
      }
      --sizes[from];
      ++sizes[to];
      out.assignment[i] = static_cast<int>(to);
    };
    constexpr int kMaxPasses = 100;
    for (int pass = 0; pass < kMaxPasses; ++pass) {
      bool moved = false;
      for (std::size_t i = 0; i < m; ++i) {
        const std::size_t from = out.assignment[i];
        if (sizes[from] <= 1) continue;
        const double na = static_cast<double>(sizes[from]);
        const double removal =
            -na / (na - 1.0) * dist2(keys[i], mean_of(from));
        std::size_t best_to = from;
        double best_delta = -1e-12;
        for (std::size_t to = 0; to < K; ++to) {
          if (to == from) continue;
          const double nb = static_cast<double>(sizes[to]);
          const double delta =
              removal + nb / (nb + 1.0) * dist2(keys[i], mean_of(to));
          if (delta < best_delta) {
            best_delta = delta;
            best_to = to;
          }
        }
        if (best_to != from) {
          apply_move(i, from, best_to);
          moved = true;
        }
      }
      if (moved) continue;
      // Pairwise exchanges reach optima single-point moves cannot. Cluster
      // sizes are unchanged by a swap, so the cost delta reduces to the mean
      // shifts of the two clusters involved.
      for (std::size_t i = 0; i < m && !moved; ++i) {
        const std::size_t a = out.assignment[i];
        for (std::size_t j = i + 1; j < m && !moved; ++j) {
          const std::size_t b = out.assignment[j];
          if (a == b) continue;
          const double na = static_cast<double>(sizes[a]);
          const double nb = static_cast<double>(sizes[b]);
          const Vec mu_a = mean_of(a);
          const Vec mu_b = mean_of(b);
          double delta = 0.0;
          for (std::size_t ch = 0; ch < keys[i].size(); ++ch) {
            const double xi = keys[i][ch];
            const double xj = keys[j][ch];
            const double ma = mu_a[ch] + (xj - xi) / na;
            const double mb = mu_b[ch] + (xi - xj) / nb;
            delta += (xj * xj - xi * xi) - na * (ma * ma - mu_a[ch] * mu_a[ch]);
            delta += (xi * xi - xj * xj) - nb * (mb * mb - mu_b[ch] * mu_b[ch]);
          }
          if (delta < -1e-12) {
            apply_move(i, a, b);
            apply_move(j, b, a);
            moved = true;
          }
        }
      }
      if (!moved) break;
    }
    for (std::size_t c = 0; c < K; ++c) out.centroids[c] = mean_of(c);
  }

  out.cost = 0.0;
  for (std::size_t i = 0; i < m; ++i)
    out.cost += dist2(keys[i], out.centroids[out.assignment[i]]);
  return out;
}

}  // namespace

KmeansClustering kmeans_cluster(std::span<const TokenId> ids,
                                std::span<const Vec> keys, std::int64_t k) {
  const std::size_t m = ids.size();
  if (m == 0 || k < 1)
    throw Error(ErrorKind::kStructural, "kmeans over an empty input");
  if (keys.size() != m)
    throw Error(ErrorKind::kStructural, "kmeans ids/keys size mismatch");
  const std::size_t K = std::min<std::size_t>(m, static_cast<std::size_t>(k));

  // Deterministic restarts, lowest-cost run wins (ties to the earlier
  // start). Small inputs enumerate every K-subset of points as a seed set;
  // larger ones fall back to farthest-first from a handful of anchors. Ids
  // arrive ascending so index order is id order.
  std::vector<std::vector<std::size_t>> seed_sets;
  double subsets = 1.0;
  for (std::size_t i = 0; i < K; ++i)
    subsets *= static_cast<double>(m - i) / static_cast<double>(i + 1);
  if (subsets <= 512.0) {
    std::vector<std::size_t> pick(K);
    for (std::size_t i = 0; i < K; ++i) pick[i] = i;
    while (true) {
      seed_sets.push_back(pick);
      std::size_t j = K;
      while (j > 0 && pick[j - 1] == m - K + j - 1) --j;
      if (j == 0) break;
      ++pick[j - 1];
      for (std::size_t l = j; l < K; ++l) pick[l] = pick[l - 1] + 1;
    }
  } else {
    Vec mean(keys[0].size(), 0.0);
    for (const Vec& key : keys)
      for (std::size_t ch = 0; ch < mean.size(); ++ch) mean[ch] += key[ch];
    for (double& x : mean) x /= static_cast<double>(m);
    std::size_t far_idx = 0, near_idx = 0;
    double far_d = -1.0, near_d = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < m; ++i) {
      const double d = dist2(keys[i], mean);
      if (d > far_d) {
        far_d = d;
        far_idx = i;
      }
      if (d < near_d) {
        near_d = d;
        near_idx = i;
      }
    }
    for (std::size_t anchor : {std::size_t{0}, far_idx, near_idx, m / 2})
      seed_sets.push_back(farthest_first_seeds(keys, K, anchor));
  }

  KmeansClustering best;
  bool first = true;
  for (const auto& seeds : seed_sets) {
    KmeansClustering run = kmeans_from_seeds(keys, K, seeds);
    if (first || run.cost < best.cost) {
      best = std::move(run);
      first = false;
    }
  }

  // Medoids: the member nearest each centroid, ties to the lowest token id.
  std::vector<std::size_t> medoid_idx(K, m);
  std::vector<double> medoid_d(K, std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < m; ++i) {
    const int a = best.assignment[i];
    const double d = dist2(keys[i], best.centroids[a]);
    if (d < medoid_d[a]) {
      medoid_d[a] = d;
      medoid_idx[a] = i;
    }
  }
  best.medoids.reserve(K);
  for (std::size_t c = 0; c < K; ++c)
    best.medoids.push_back(ids[medoid_idx[c]]);
  std::sort(best.medoids.begin(), best.medoids.end());
  return best;
}

std::vector<TokenId> kmeans_select(std::span<const TokenId> ids,
                                   std::span<const Vec> keys, std::int64_t k) {
  if (k >= static_cast<std::int64_t>(ids.size()))
    return std::vector<TokenId>(ids.begin(), ids.end());
  return kmeans_cluster(ids, keys, k).medoids;
}

// ---------------------------------------------------------------------------
// Trigger cases
// ---------------------------------------------------------------------------

namespace {

//! Anneals one segment a single level. Returns the eviction (if any tokens
//! actually left) and always advances the anneal level.
std::vector<TokenId> anneal_one(SegmentRecord& seg, const KeyLookup& key_of,
                                const RetentionSchedule& schedule) {
  const std::int64_t target =
      std::min(seg.size(), schedule.anneal_size(seg.anneal_level));
  seg.anneal_level += 1;
  if (target >= seg.size()) return {};

  std::vector<Vec> keys;
  keys.reserve(seg.member_ids.size());
  for (TokenId id : seg.member_ids) keys.push_back(key_of(id));
  std::vector<TokenId> retained =
      kmeans_select(seg.member_ids, keys, target);
  std::vector<TokenId> evicted;
  evicted.reserve(seg.member_ids.size() - retained.size());
  std::set_difference(seg.member_ids.begin(), seg.member_ids.end(),
                      retained.begin(), retained.end(),
                      std::back_inserter(evicted));
  seg.member_ids = std::move(retained);
  return evicted;
}

void merge_into_plan(EvictionPlan& plan, const SegmentRecord& seg,
                     std::vector<TokenId> evicted) {
  if (evicted.empty()) return;
  for (auto& entry : plan.segments) {
    if (entry.segment_id == seg.id) {
      entry.evicted.insert(entry.evicted.end(), evicted.begin(), evicted.end());
      std::sort(entry.evicted.begin(), entry.evicted.end());
      entry.retained = seg.member_ids;
      return;
    }
  }
  plan.segments.push_back({seg.id, seg.member_ids, std::move(evicted)});
}

}  // namespace

EvictionPlan on_transition_end(std::vector<SegmentRecord>& segments,
                               std::int64_t closing_start_step,
                               const KeyLookup& key_of,
                               const RetentionSchedule& schedule) {
  EvictionPlan plan;
  plan.trigger = TriggerCase::kTransitionEnd;
  for (auto& seg : segments) {
    if (seg.open || seg.start_step >= closing_start_step) continue;
    merge_into_plan(plan, seg, anneal_one(seg, key_of, schedule));
  }
  return plan;
}

EvictionPlan on_budget_overflow(std::vector<SegmentRecord>& segments,
                                std::int64_t budget, const KeyLookup& key_of,
                                const RetentionSchedule& schedule,
                                int num_thoughts) {
  EvictionPlan plan;
  plan.trigger = TriggerCase::kBudgetOverflow;
  const std::int64_t floor = schedule.floor();
  std::int64_t total = total_members(segments);
  // Each pass either shrinks the selected segment or advances its level past
  // a retention step it has already beaten, so this terminates.
  const std::size_t max_passes =
      segments.size() * (schedule.levels.size() + 2) + 1;
  for (std::size_t pass = 0; total > budget && pass < max_passes; ++pass) {
    SegmentRecord* victim = nullptr;
    for (auto& seg : segments) {
      if (seg.open || seg.size() <= floor) continue;
      if (victim == nullptr) {
        victim = &seg;
        continue;
      }
      const int rho_seg = thought_importance(seg.thought, num_thoughts);
      const int rho_vic = thought_importance(victim->thought, num_thoughts);
      if (rho_seg < rho_vic ||
          (rho_seg == rho_vic && seg.start_step < victim->start_step)) {
        victim = &seg;
      }
    }
    if (victim == nullptr) {
      plan.budget_infeasible = true;
      break;
    }
    merge_into_plan(plan, *victim, anneal_one(*victim, key_of, schedule));
    total = total_members(segments);
  }
  return plan;
}

}  // namespace thinkv
