// Copyright (C) 2026 ThinKV Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "thinkv/evictor.hpp"
#include "thinkv/quant.hpp"

#include "json.hpp"

namespace thinkv {

//! Shared scale for one quantization group, kept in a side table keyed by
//! group id. refs counts the live slots referencing the record.
struct GroupScaleRecord {
  Format format = Format::kNvfp4;
  bool f32 = false;
  std::uint8_t scale_code = 0;
  float scale_f32 = 0.0f;
  int refs = 0;
  TokenId first_token = 0;
  TokenId last_token = 0;  // span covered, for placements crossing blocks

  double value() const;
};

//! One token's residence in a physical slot: quantized key/value codes plus
//! the decoded vectors (slot contents are immutable once written, so decoding
//! once at placement is exact).
struct SlotPayload {
  TokenId id = -1;
  std::int64_t step = 0;
  ThoughtLabel thought;
  Format format = Format::kNvfp4;
  bool raw = false;
  std::vector<std::uint8_t> key_codes, value_codes;  // one per channel
  std::uint64_t key_group_base = 0;
  std::uint64_t value_group_base = 0;
  int value_chunks = 0;
  int group_size = 16;        // channel span of each per-token value group
  bool shared_scale = false;  // fp8: one record per window side
  Vec key_fp, value_fp;       // decoded at placement

  int head_dim() const {
    return static_cast<int>(raw ? key_fp.size() : key_codes.size());
  }
};

struct BlockTableEntry {
  int physical_block = 0;
  int filled = 0;
  ThoughtLabel thought;
  std::vector<std::int64_t> start_indices;            // global segment starts
  std::vector<std::vector<std::uint8_t>> segment_masks;  // per start beyond the first
  std::vector<std::uint8_t> eviction_mask;            // length block_size
};

struct FragmentationStats {
  std::int64_t live_slots = 0;
  std::int64_t masked_slots = 0;
  std::int64_t unfilled_slots = 0;
  std::int64_t blocks_in_use = 0;
  std::int64_t free_blocks = 0;
  std::map<std::string, std::int64_t> live_code_bits_by_format;
  std::map<std::string, std::int64_t> resident_code_bits_by_format;
  std::int64_t live_scale_bytes = 0;

  std::int64_t total_live_code_bits() const;
};

struct Placement {
  TokenId id = -1;
  int block = 0;
  int slot = 0;
  bool reused = false;  // overwrote a soft-evicted slot
};

//! Thought-aware paged KV store for one layer. Tokens are placed into
//! fixed-size physical blocks that never mix thought types; eviction is
//! deferred via per-block masks and reclaimed slots are reused in place, so
//! nothing is ever compacted or relocated.
class BlockPager {
 public:
  BlockPager(int block_size, int pool_blocks);

  int block_size() const { return block_size_; }
  int pool_blocks() const { return pool_blocks_; }

  //! Allocates a fresh block table entry for the given thought type.
  //! Throws an out-of-memory error with pool statistics when the pool is
  //! exhausted.
  int allocate_block(ThoughtLabel thought);

  //! Registers a group-scale record before the slots that reference it are
  //! appended.
  void install_group(std::uint64_t group_id, GroupScaleRecord record);

  //! Places same-thought tokens, preferring (1) soft-evicted slots in blocks
  //! of that thought, then (2) unfilled tail slots, then (3) fresh blocks.
  //! New segments entering a block append a start index and segment mask.
  std::vector<Placement> append_tokens(ThoughtLabel thought,
                                       std::vector<SlotPayload> tokens,
                                       std::int64_t segment_start);

  //! Soft-marks the plan's evicted ids; slot contents stay put. Blocks whose
  //! live count reaches zero return to the free pool. Unknown token ids raise
  //! an integrity error.
  void apply_eviction_plan(const EvictionPlan& plan);

  //! Live payloads in physical (block, slot) order.
  std::vector<const SlotPayload*> read_active() const;
  std::vector<TokenId> live_token_ids() const;
  std::int64_t live_count() const { return static_cast<std::int64_t>(index_.size()); }

  //! Decoded post-RoPE key of a live token. Integrity error if unknown.
  const Vec& key_of(TokenId id) const;

  FragmentationStats fragmentation_stats() const;

  //! Slots relocated since construction; in-place reuse keeps this at zero,
  //! which the acceptance suite checks against the gather baseline.
  std::int64_t moved_slot_count() const { return moved_slots_; }

  nlohmann::json dump() const;

  const std::map<int, BlockTableEntry>& table() const { return table_; }
  const SlotPayload& slot(int block, int slot) const;
  const std::map<std::uint64_t, GroupScaleRecord>& group_table() const {
    return groups_;
  }

 private:
  struct PhysicalBlock {
    std::vector<SlotPayload> slots;
    std::vector<std::uint8_t> occupied;
  };

  int live_in_block(const BlockTableEntry& entry) const;
  void release_slot_groups(const SlotPayload& payload);
  void add_slot_groups(const SlotPayload& payload);
  void decode_payload(SlotPayload& payload) const;
  void free_block(int block_id);

  int block_size_;
  int pool_blocks_;
  std::set<int> free_;
  std::map<int, BlockTableEntry> table_;           // keyed by physical id
  std::vector<PhysicalBlock> blocks_;
  std::unordered_map<TokenId, std::pair<int, int>> index_;  // live tokens only
  std::map<std::uint64_t, GroupScaleRecord> groups_;
  std::int64_t moved_slots_ = 0;
};

}  // namespace thinkv
