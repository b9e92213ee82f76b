// Copyright (C) 2026 ThinKV Authors
// SPDX-License-Identifier: Apache-2.0

#include "thinkv/pager.hpp"

#include <algorithm>

#include "thinkv/errors.hpp"

namespace thinkv {

double GroupScaleRecord::value() const {
  return f32 ? static_cast<double>(scale_f32) : e4m3_decode(scale_code);
}

BlockPager::BlockPager(int block_size, int pool_blocks)
    : block_size_(block_size), pool_blocks_(pool_blocks) {
  if (block_size < 1 || pool_blocks < 1)
    throw Error(ErrorKind::kConfig, "pager needs block_size >= 1 and a pool");
  blocks_.resize(pool_blocks);
  for (int i = 0; i < pool_blocks; ++i) {
    free_.insert(i);
    blocks_[i].slots.resize(block_size);
    blocks_[i].occupied.assign(block_size, 0);
  }
}

int BlockPager::allocate_block(ThoughtLabel thought) {
  if (free_.empty()) {
    const auto stats = fragmentation_stats();
    throw Error(ErrorKind::kOutOfMemory,
                "physical block pool exhausted (" +
                    std::to_string(stats.blocks_in_use) + "/" +
                    std::to_string(pool_blocks_) + " blocks in use, " +
                    std::to_string(stats.live_slots) + " live slots, " +
                    std::to_string(stats.masked_slots) + " masked)");
  }
  const int id = *free_.begin();  // lowest freed id first
  free_.erase(free_.begin());
  BlockTableEntry entry;
  entry.physical_block = id;
  entry.filled = 0;
  entry.thought = thought;
  entry.eviction_mask.assign(block_size_, 0);
  table_[id] = std::move(entry);
  return id;
}

void BlockPager::install_group(std::uint64_t group_id, GroupScaleRecord record) {
  record.refs = 0;
  groups_[group_id] = record;
}

void BlockPager::add_slot_groups(const SlotPayload& p) {
  if (p.raw) return;
  auto bump = [&](std::uint64_t id) {
    const auto it = groups_.find(id);
    if (it == groups_.end())
      throw Error(ErrorKind::kIntegrity,
                  "slot references unknown group " + std::to_string(id));
    it->second.refs += 1;
  };
  if (p.shared_scale) {
    bump(p.key_group_base);
    bump(p.value_group_base);
    return;
  }
  for (int c = 0; c < p.head_dim(); ++c) bump(p.key_group_base + c);
  for (int j = 0; j < p.value_chunks; ++j) bump(p.value_group_base + j);
}

void BlockPager::release_slot_groups(const SlotPayload& p) {
  if (p.raw) return;
  auto drop = [&](std::uint64_t id) {
    const auto it = groups_.find(id);
    if (it == groups_.end()) return;
    it->second.refs -= 1;
    if (it->second.refs <= 0) groups_.erase(it);
  };
  if (p.shared_scale) {
    drop(p.key_group_base);
    drop(p.value_group_base);
    return;
  }
  for (int c = 0; c < p.head_dim(); ++c) drop(p.key_group_base + c);
  for (int j = 0; j < p.value_chunks; ++j) drop(p.value_group_base + j);
}

void BlockPager::decode_payload(SlotPayload& p) const {
  if (p.raw) return;
  const int d = p.head_dim();
  p.key_fp.resize(d);
  p.value_fp.resize(d);
  if (p.shared_scale) {
    const double ks = groups_.at(p.key_group_base).value();
    const double vs = groups_.at(p.value_group_base).value();
    for (int c = 0; c < d; ++c) {
      p.key_fp[c] = decode_code(p.format, p.key_codes[c], ks);
      p.value_fp[c] = decode_code(p.format, p.value_codes[c], vs);
    }
    return;
  }
  for (int c = 0; c < d; ++c)
    p.key_fp[c] = decode_code(p.format, p.key_codes[c],
                              groups_.at(p.key_group_base + c).value());
  for (int c = 0; c < d; ++c) {
    const int chunk = std::min(c / std::max(1, p.group_size),
                               std::max(0, p.value_chunks - 1));
    p.value_fp[c] = decode_code(p.format, p.value_codes[c],
                                groups_.at(p.value_group_base + chunk).value());
  }
}

std::vector<Placement> BlockPager::append_tokens(ThoughtLabel thought,
                                                 std::vector<SlotPayload> tokens,
                                                 std::int64_t segment_start) {
  if (tokens.empty()) return {};
  for (const auto& t : tokens) {
    if (t.thought != thought)
      throw Error(ErrorKind::kStructural, "append_tokens: mixed thought labels");
  }

  struct Claim {
    int block;
    int slot;
    bool reused;
    bool tail;
  };
  std::vector<Claim> claims;
  const std::size_t need = tokens.size();

  // (1) soft-evicted slots of same-thought blocks, in physical order.
  for (const auto& [bid, entry] : table_) {
    if (claims.size() == need) break;
    if (entry.thought != thought) continue;
    for (int s = 0; s < entry.filled && claims.size() < need; ++s)
      if (entry.eviction_mask[s]) claims.push_back({bid, s, true, false});
  }
  // (2) unfilled tail slots of same-thought blocks.
  for (const auto& [bid, entry] : table_) {
    if (claims.size() == need) break;
    if (entry.thought != thought) continue;
    for (int s = entry.filled; s < block_size_ && claims.size() < need; ++s)
      claims.push_back({bid, s, false, true});
  }
  // (3) fresh blocks; verify capacity before touching anything.
  const std::size_t remaining = need - claims.size();
  const std::size_t fresh_blocks =
      (remaining + static_cast<std::size_t>(block_size_) - 1) /
      static_cast<std::size_t>(block_size_);
  if (fresh_blocks > free_.size()) {
    const auto stats = fragmentation_stats();
    throw Error(ErrorKind::kOutOfMemory,
                "append of " + std::to_string(need) + " tokens needs " +
                    std::to_string(fresh_blocks) + " new blocks but only " +
                    std::to_string(free_.size()) + " are free (" +
                    std::to_string(stats.live_slots) + " live, " +
                    std::to_string(stats.masked_slots) + " masked slots)");
  }
  for (std::size_t b = 0; b < fresh_blocks; ++b) {
    const int bid = allocate_block(thought);
    for (int s = 0; s < block_size_ && claims.size() < need; ++s)
      claims.push_back({bid, s, false, true});
  }

  std::vector<Placement> placements;
  placements.reserve(need);
  for (std::size_t i = 0; i < need; ++i) {
    const Claim& claim = claims[i];
    BlockTableEntry& entry = table_[claim.block];
    PhysicalBlock& block = blocks_[claim.block];
    SlotPayload payload = std::move(tokens[i]);

    if (claim.reused) {
      entry.eviction_mask[claim.slot] = 0;
      // The slot changes segment ownership; drop it from any older mask so
      // every slot maps to exactly one segment.
      for (auto& mask : entry.segment_masks) mask[claim.slot] = 0;
    } else {
      entry.filled += 1;
    }

    decode_payload(payload);
    add_slot_groups(payload);
    index_[payload.id] = {claim.block, claim.slot};
    placements.push_back({payload.id, claim.block, claim.slot, claim.reused});
    block.slots[claim.slot] = std::move(payload);
    block.occupied[claim.slot] = 1;

    // Segment bookkeeping: the block's first segment is implicit (slots not
    // claimed by a later mask); later segments carry explicit masks.
    const auto found = std::find(entry.start_indices.begin(),
                                 entry.start_indices.end(), segment_start);
    if (found == entry.start_indices.end()) {
      if (entry.start_indices.empty()) {
        entry.start_indices.push_back(segment_start);
      } else {
        entry.start_indices.push_back(segment_start);
        entry.segment_masks.emplace_back(block_size_, 0);
        entry.segment_masks.back()[claim.slot] = 1;
      }
    } else if (found != entry.start_indices.begin()) {
      const std::size_t mask_idx =
          static_cast<std::size_t>(found - entry.start_indices.begin()) - 1;
      entry.segment_masks[mask_idx][claim.slot] = 1;
    }

    // Prune later segments whose masks emptied out after reuse.
    for (std::size_t mi = entry.segment_masks.size(); mi-- > 0;) {
      const auto& mask = entry.segment_masks[mi];
      if (std::all_of(mask.begin(), mask.end(),
                      [](std::uint8_t b) { return b == 0; })) {
        entry.segment_masks.erase(entry.segment_masks.begin() + mi);
        entry.start_indices.erase(entry.start_indices.begin() + mi + 1);
      }
    }
  }
  return placements;
}

int BlockPager::live_in_block(const BlockTableEntry& entry) const {
  int live = 0;
  for (int s = 0; s < entry.filled; ++s)
    if (!entry.eviction_mask[s]) ++live;
  return live;
}

void BlockPager::free_block(int block_id) {
  PhysicalBlock& block = blocks_[block_id];
  for (int s = 0; s < block_size_; ++s) {
    block.slots[s] = SlotPayload{};
    block.occupied[s] = 0;
  }
  table_.erase(block_id);
  free_.insert(block_id);
}

void BlockPager::apply_eviction_plan(const EvictionPlan& plan) {
  std::set<int> touched;
  for (const auto& seg : plan.segments) {
    for (TokenId id : seg.evicted) {
      const auto it = index_.find(id);
      if (it == index_.end()) {
        throw Error(ErrorKind::kIntegrity,
                    "eviction plan references unknown token id " +
                        std::to_string(id));
      }
      const auto [bid, slot] = it->second;
      BlockTableEntry& entry = table_.at(bid);
      entry.eviction_mask[slot] = 1;
      release_slot_groups(blocks_[bid].slots[slot]);
      index_.erase(it);
      touched.insert(bid);
    }
  }
  for (int bid : touched) {
    if (live_in_block(table_.at(bid)) == 0) free_block(bid);
  }
}

std::vector<const SlotPayload*> BlockPager::read_active() const {
  std::vector<const SlotPayload*> out;
  out.reserve(index_.size());
  for (const auto& [bid, entry] : table_) {
    const PhysicalBlock& block = blocks_[bid];
    for (int s = 0; s < entry.filled; ++s) {
      if (!entry.eviction_mask[s]) out.push_back(&block.slots[s]);
    }
  }
  return out;
}

std::vector<TokenId> BlockPager::live_token_ids() const {
  std::vector<TokenId> ids;
  ids.reserve(index_.size());
  for (const SlotPayload* p : read_active()) ids.push_back(p->id);
  return ids;
}

const Vec& BlockPager::key_of(TokenId id) const {
  const auto it = index_.find(id);
  if (it == index_.end()) {
    throw Error(ErrorKind::kIntegrity,
                "key_of: token " + std::to_string(id) + " is not live");
  }
  return blocks_[it->second.first].slots[it->second.second].key_fp;
}

const SlotPayload& BlockPager::slot(int block, int slot_idx) const {
  return blocks_.at(block).slots.at(slot_idx);
}

std::int64_t FragmentationStats::total_live_code_bits() const {
  std::int64_t total = 0;
  for (const auto& [_, bits] : live_code_bits_by_format) total += bits;
  return total;
}

FragmentationStats BlockPager::fragmentation_stats() const {
  FragmentationStats stats;
  for (const auto& [bid, entry] : table_) {
    stats.blocks_in_use += 1;
    stats.unfilled_slots += block_size_ - entry.filled;
    const PhysicalBlock& block = blocks_[bid];
    for (int s = 0; s < entry.filled; ++s) {
      const SlotPayload& p = block.slots[s];
      const std::int64_t bits =
          static_cast<std::int64_t>(p.raw ? 16 : format_code_bits(p.format)) *
          p.head_dim() * 2;  // key + value codes
      const std::string name = p.raw ? "RAW16" : format_name(p.format);
      stats.resident_code_bits_by_format[name] += bits;
      if (entry.eviction_mask[s]) {
        stats.masked_slots += 1;
      } else {
        stats.live_slots += 1;
        stats.live_code_bits_by_format[name] += bits;
      }
    }
  }
  stats.free_blocks = static_cast<std::int64_t>(free_.size());
  for (const auto& [_, rec] : groups_) {
    if (rec.refs > 0) stats.live_scale_bytes += rec.f32 ? 4 : 1;
  }
  return stats;
}

nlohmann::json BlockPager::dump() const {
  nlohmann::json j;
  j["block_size"] = block_size_;
  j["pool_blocks"] = pool_blocks_;
  auto mask_string = [&](const std::vector<std::uint8_t>& mask) {
    std::string s(block_size_, '0');
    for (int i = 0; i < block_size_; ++i)
      if (mask[i]) s[i] = '1';
    return s;
  };
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& [bid, entry] : table_) {
    nlohmann::json b;
    b["physical_block"] = bid;
    b["filled"] = entry.filled;
    b["thought"] = entry.thought.band;
    b["start_indices"] = entry.start_indices;
    nlohmann::json masks = nlohmann::json::array();
    for (const auto& m : entry.segment_masks) masks.push_back(mask_string(m));
    b["segment_masks"] = masks;
    b["eviction_mask"] = mask_string(entry.eviction_mask);
    nlohmann::json tokens = nlohmann::json::array();
    for (int s = 0; s < block_size_; ++s) {
      if (s < entry.filled) {
        tokens.push_back(blocks_[bid].slots[s].id);
      } else {
        tokens.push_back(nullptr);
      }
    }
    b["tokens"] = tokens;
    blocks.push_back(std::move(b));
  }
  j["blocks"] = std::move(blocks);
  j["free_blocks"] = std::vector<int>(free_.begin(), free_.end());
  return j;
}

}  // namespace thinkv
