// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include <blockattn/block_mask.hpp>
#include <blockattn/modifiers.hpp>
#include <blockattn/tensor.hpp>

namespace blockattn {

// Logical-page -> physical-page mapping for a paged kv cache, plus the
// inverse direction needed when a kernel running in physical coordinates has
// to recover logical positions. Both directions are plain arrays so every
// lookup during attention is O(1); the cache maintains them incrementally on
// assign/append/erase.
struct PageTable {
  static constexpr std::int32_t kSentinel = -1;

  i64 batches = 0;
  i64 max_logical_pages = 0;
  i64 num_physical_pages = 0;
  i64 page_size = 0;

  // (batches, max_logical_pages): physical page backing each logical page,
  // kSentinel where nothing is mapped.
  std::vector<std::int32_t> table;
  // Per physical page: the logical page it backs / the batch element owning
  // it, kSentinel when free.
  std::vector<std::int32_t> phys_to_logical;
  std::vector<std::int32_t> owner;
  // Tokens currently stored per batch element. Physical pages hold whole
  // pages, so the tail of the last page can be slack; converted masks hide
  // it (logical index >= seq_len evaluates false).
  std::vector<i64> seq_len;

  std::int32_t lookup(i64 b, i64 logical_page) const {
    return table[static_cast<std::size_t>(b * max_logical_pages + logical_page)];
  }
};

// Key/value storage for several sequences multiplexed onto one physical
// buffer of shape (1, kv_heads, num_pages * page_size, dim). Pages are the
// allocation unit; a free-list keeps assignment O(pages touched).
//
// Mutations are atomic with respect to capacity: an assign or append that
// would need more pages than are free throws OutOfPages and changes nothing.
template <typename Real>
class PagedKVCache {
 public:
  PagedKVCache(i64 batches, i64 num_pages, i64 page_size, i64 kv_heads, i64 dim);

  // Replaces batch element b's sequence with the given tokens. k_tokens and
  // v_tokens have shape (1, kv_heads, n_tokens, dim).
  void assign(i64 b, const Tensor4<Real>& k_tokens, const Tensor4<Real>& v_tokens);

  // Extends batch element b. Fills the slack of its last page first, then
  // allocates.
  void append_tokens(i64 b, const Tensor4<Real>& k_new, const Tensor4<Real>& v_new);

  // Frees all pages of batch element b. Idempotent.
  void erase(i64 b);

  // Deterministically permutes the free list, so the next allocations
  // scatter across the physical buffer. Lets tests exercise arbitrary
  // logical->physical layouts without faking a workload.
  void shuffle_free_pages(std::uint64_t seed);

  const Tensor4<Real>& k_phys() const { return k_; }
  const Tensor4<Real>& v_phys() const { return v_; }
  const PageTable& table() const { return table_; }

  i64 page_size() const { return table_.page_size; }
  i64 max_tokens() const { return table_.num_physical_pages * table_.page_size; }
  i64 seq_len(i64 b) const;
  i64 free_pages() const { return static_cast<i64>(free_.size()); }

 private:
  void check_batch(i64 b) const;
  void check_tokens(const Tensor4<Real>& k_t, const Tensor4<Real>& v_t) const;
  // Copies n tokens into the pages mapped for b starting at logical token
  // position `start`.
  void write_tokens(i64 b, i64 start, const Tensor4<Real>& k_t, const Tensor4<Real>& v_t);

  Tensor4<Real> k_, v_;
  PageTable table_;
  std::vector<std::int32_t> free_;  // LIFO
};

// Rewrites a BlockMask built in logical kv coordinates into physical page
// coordinates: every stored block column c becomes the physical page backing
// logical page c for its batch element. Counts and traversal order are
// untouched -- only index values change -- which is what keeps the paged run
// bit-identical to the unpaged one. The result spans the whole physical
// buffer (kv_len becomes num_pages * page_size) and materializes the batch
// dimension, since different batch elements map pages differently.
//
// Preconditions: bm.bs_kv == page table page size; every referenced logical
// block is mapped (UnmappedBlock otherwise); bm.b_dims is 1 or pt.batches.
BlockMask convert_block_mask(const BlockMask& bm, const PageTable& pt);

struct ConvertedMods {
  MaskMod mask;
  ScoreMod score;
};

// Wraps positional callables written in logical coordinates so they can be
// evaluated at physical kv indices: physical index -> (physical page, offset)
// -> logical page via the inverse table -> logical index. Slack positions
// past seq_len evaluate to false (mask) / identity (score). Evaluating at a
// physical page that is unmapped or owned by a different batch element
// throws UnmappedPhysicalIndex.
//
// The page table is snapshotted by value: cache mutations after conversion
// do not retroactively change the returned callables.
ConvertedMods convert_mods(const MaskMod& mask, const ScoreMod& smod, const PageTable& pt);

}  // namespace blockattn
