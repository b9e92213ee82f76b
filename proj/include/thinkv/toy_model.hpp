// Copyright (C) 2026 ThinKV Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <vector>

#include "thinkv/attention.hpp"
#include "thinkv/common.hpp"

namespace thinkv {

//! Deterministic autoregressive attention model. All weights are
//! pseudo-random projections derived from ModelConfig::seed; there is no
//! training. The model exists to produce reproducible, realistically shaped
//! attention distributions for the simulator, not task accuracy.
//!
//! Each layer owns one key/value projection (the cache stores one KV pair per
//! token per layer) and num_heads query projections; GQA groups of
//! gqa_group_size queries are consolidated by max pooling. Rotary embeddings
//! are applied to queries and keys before caching, so cached keys are
//! post-RoPE.
class ToyModel {
 public:
  explicit ToyModel(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }

  Vec embed(TokenId token) const;

  struct LayerProjection {
    std::vector<Vec> queries;  // one per head, post-RoPE, sink-biased
    Vec key;                   // post-RoPE
    Vec value;
  };
  LayerProjection project(int layer, const Vec& hidden,
                          std::int64_t position) const;

  //! Residual update from the per-group attention outputs.
  Vec combine(int layer, const Vec& hidden,
              std::span<const Vec> group_outputs) const;

  //! Deterministic greedy sampling: argmax over a fixed random readout.
  TokenId readout(const Vec& hidden) const;

  //! Random prompt of the given length drawn from a run seed.
  std::vector<TokenId> sample_prompt(std::uint64_t run_seed,
                                     std::int64_t length) const;

 private:
  using Mat = std::vector<Vec>;  // row-major

  Mat make_matrix(std::uint64_t tag, int rows, int cols) const;
  static Vec matvec(const Mat& m, const Vec& x);

  ModelConfig cfg_;
  std::vector<std::vector<Mat>> w_query_;  // [layer][head]: head_dim x embed
  std::vector<Mat> w_key_, w_value_;       // [layer]: head_dim x embed
  std::vector<Mat> w_out_;                 // [layer]: embed x (head_dim * groups)
  Mat w_readout_;                          // embed x embed
  std::vector<Vec> sink_dir_;              // [layer]: unit direction, head_dim
};

}  // namespace thinkv
