// Copyright (C) 2026 ThinKV Authors
// SPDX-License-Identifier: Apache-2.0

#include "thinkv/toy_model.hpp"

#include <cmath>

#include "thinkv/errors.hpp"
#include "thinkv/rng.hpp"

namespace thinkv {

namespace {
// Weight-family tags for deriving independent streams from the model seed.
constexpr std::uint64_t kTagQuery = 0x11;
constexpr std::uint64_t kTagKey = 0x22;
constexpr std::uint64_t kTagValue = 0x33;
constexpr std::uint64_t kTagOut = 0x44;
constexpr std::uint64_t kTagReadout = 0x55;
constexpr std::uint64_t kTagEmbed = 0x66;
constexpr std::uint64_t kTagSink = 0x77;
}  // namespace

ToyModel::ToyModel(const ModelConfig& cfg) : cfg_(cfg) {
  const auto errors = cfg.validate();
  if (!errors.empty()) {
    throw Error(ErrorKind::kConfig, "invalid model config: " + errors.front());
  }
  const int d = cfg_.head_dim;
  const int e = cfg_.embed_dim;
  const int groups = cfg_.num_groups();
  w_query_.resize(cfg_.num_layers);
  w_key_.reserve(cfg_.num_layers);
  w_value_.reserve(cfg_.num_layers);
  w_out_.reserve(cfg_.num_layers);
  sink_dir_.reserve(cfg_.num_layers);
  for (int l = 0; l < cfg_.num_layers; ++l) {
    w_query_[l].reserve(cfg_.num_heads);
    for (int h = 0; h < cfg_.num_heads; ++h) {
      w_query_[l].push_back(
          make_matrix(Rng::mix(kTagQuery, l * 1000 + h), d, e));
    }
    w_key_.push_back(make_matrix(Rng::mix(kTagKey, l), d, e));
    w_value_.push_back(make_matrix(Rng::mix(kTagValue, l), d, e));
    w_out_.push_back(make_matrix(Rng::mix(kTagOut, l), e, d * groups));

    Rng rng(Rng::mix(cfg_.seed, Rng::mix(kTagSink, l)));
    Vec dir(d);
    double norm = 0.0;
    for (double& x : dir) {
      x = rng.gaussian();
      norm += x * x;
    }
    norm = std::sqrt(norm);
    for (double& x : dir) x /= norm > 0.0 ? norm : 1.0;
    sink_dir_.push_back(std::move(dir));
  }
  w_readout_ = make_matrix(kTagReadout, e, e);
}

ToyModel::Mat ToyModel::make_matrix(std::uint64_t tag, int rows,
                                    int cols) const {
  Rng rng(Rng::mix(cfg_.seed, tag));
  Mat m(rows, Vec(cols));
  const double scale = 1.0 / std::sqrt(static_cast<double>(cols));
  for (auto& row : m) {
    for (double& x : row) x = rng.gaussian() * scale;
  }
  return m;
}

Vec ToyModel::matvec(const Mat& m, const Vec& x) {
  Vec out(m.size(), 0.0);
  for (std::size_t r = 0; r < m.size(); ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < x.size(); ++c) acc += m[r][c] * x[c];
    out[r] = acc;
  }
  return out;
}

Vec ToyModel::embed(TokenId token) const {
  Rng rng(Rng::mix(cfg_.seed, Rng::mix(kTagEmbed, static_cast<std::uint64_t>(token))));
  Vec v(cfg_.embed_dim);
  for (double& x : v) x = rng.gaussian();
  return v;
}

ToyModel::LayerProjection ToyModel::project(int layer, const Vec& hidden,
                                            std::int64_t position) const {
  LayerProjection p;
  p.key = matvec(w_key_[layer], hidden);
  p.value = matvec(w_value_[layer], hidden);
  apply_rotary(p.key, position);
  // Sink bias is applied after rotation so early-position keys stay aligned
  // with every later query regardless of relative rotation.
  const Vec& dir = sink_dir_[layer];
  if (position < cfg_.sink_tokens) {
    for (std::size_t c = 0; c < p.key.size(); ++c)
      p.key[c] += cfg_.sink_scale * dir[c];
  }
  p.queries.reserve(cfg_.num_heads);
  for (int h = 0; h < cfg_.num_heads; ++h) {
    Vec q = matvec(w_query_[layer][h], hidden);
    apply_rotary(q, position);
    for (std::size_t c = 0; c < q.size(); ++c)
      q[c] += 0.5 * cfg_.sink_scale * dir[c];
    p.queries.push_back(std::move(q));
  }
  return p;
}

Vec ToyModel::combine(int layer, const Vec& hidden,
                      std::span<const Vec> group_outputs) const {
  Vec cat;
  cat.reserve(static_cast<std::size_t>(cfg_.head_dim) * group_outputs.size());
  for (const Vec& g : group_outputs) cat.insert(cat.end(), g.begin(), g.end());
  Vec mixed = matvec(w_out_[layer], cat);
  Vec next(hidden.size());
  for (std::size_t i = 0; i < hidden.size(); ++i)
    next[i] = std::tanh(hidden[i] + mixed[i]);
  return next;
}

TokenId ToyModel::readout(const Vec& hidden) const {
  const Vec logits = matvec(w_readout_, hidden);
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return static_cast<TokenId>(best);
}

std::vector<TokenId> ToyModel::sample_prompt(std::uint64_t run_seed,
                                             std::int64_t length) const {
  Rng rng(Rng::mix(run_seed, 0xF00D));
  std::vector<TokenId> prompt;
  prompt.reserve(length);
  for (std::int64_t i = 0; i < length; ++i)
    prompt.push_back(rng.uniform_int(0, cfg_.embed_dim - 1));
  return prompt;
}

}  // namespace thinkv
