// Copyright (C) 2026 ThinKV Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace thinkv {

inline constexpr const char* kArtifactVersion = "0.1.0";

using TokenId = std::int64_t;
using Vec = std::vector<double>;

//! Sparsity-band label for a thought category. Band 0 is the lowest-sparsity
//! band. Under the canonical three-category taxonomy the bands are
//! E (0, execution), R (1, reasoning) and T (2, transition).
struct ThoughtLabel {
  int band = 0;

  friend bool operator==(const ThoughtLabel&, const ThoughtLabel&) = default;
  friend auto operator<=>(const ThoughtLabel&, const ThoughtLabel&) = default;
};

inline constexpr ThoughtLabel kThoughtE{0};
inline constexpr ThoughtLabel kThoughtR{1};
inline constexpr ThoughtLabel kThoughtT{2};

std::string thought_name(ThoughtLabel label, int num_thoughts);
ThoughtLabel thought_from_name(const std::string& name, int num_thoughts);

//! Importance score rho. The three-category taxonomy uses the canonical
//! ordering rho(R)=2 > rho(E)=1 > rho(T)=0; for any other category count the
//! fallback is "higher sparsity band = less important".
int thought_importance(ThoughtLabel label, int num_thoughts);

//! Trajectory-changing (transition) thoughts exist only in taxonomies with at
//! least three bands; they are always the highest-sparsity band.
bool is_transition(ThoughtLabel label, int num_thoughts);

//! The thought type assigned to prompt tokens (R under the canonical
//! taxonomy, the lowest band otherwise).
ThoughtLabel prefill_thought(int num_thoughts);

//! One token's cache contribution at one layer: a key vector (post-RoPE), a
//! value vector, the thought label and position bookkeeping.
struct KVEntry {
  Vec key;
  Vec value;
  ThoughtLabel thought;
  std::int64_t step = 0;
  int layer = 0;
};

}  // namespace thinkv
