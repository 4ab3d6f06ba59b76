// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include <blockattn/modifiers.hpp>

namespace blockattn {

// Classification of one (q-block, kv-block) tile of the score matrix.
enum class BlockKind : unsigned char {
  kEmpty = 0,    // every position masked; the kernel never visits it
  kPartial = 1,  // mixed; the kernel visits it and evaluates the mask per position
  kFull = 2,     // every position live; the kernel visits it and skips the mask
};

// Block-level sparsity summary of the score matrix for one mask. Storage is
// O(rows * cols) blocks rather than O(q_len * kv_len) positions.
//
// For every (b, h, row) the structure holds two ascending index lists: the
// partial blocks (mask must be evaluated inside) and the full blocks (mask
// provably true everywhere inside, so per-position evaluation is skipped).
// Blocks in neither list are empty and contribute nothing.
//
// A merged visit list (both kinds, in ascending column order at build time)
// is kept alongside. The kernels traverse that list, and index remappings --
// e.g. rewriting logical block columns to physical cache pages -- rewrite the
// stored indices without reordering them. Online softmax results depend on
// traversal order at the bit level, so preserving the order is what makes a
// remapped run reproduce the original exactly.
//
// b_dims/h_dims may be 1 to broadcast one mask across the batch or head
// dimension of the tensors it is used with.
struct BlockMask {
  i64 b_dims = 1;
  i64 h_dims = 1;
  i64 rows = 0;  // ceil(q_len / bs_q)
  i64 cols = 0;  // ceil(kv_len / bs_kv)
  i64 bs_q = 0;
  i64 bs_kv = 0;
  i64 q_len = 0;
  i64 kv_len = 0;

  // Counts: (b_dims, h_dims, rows). Indices: (b_dims, h_dims, rows, cols),
  // only the first `count` slots of each row are meaningful.
  std::vector<i64> partial_num;
  std::vector<i64> partial_idx;
  std::vector<i64> full_num;
  std::vector<i64> full_idx;

  // Merged traversal order; same shapes as the count/index arrays above.
  std::vector<i64> visit_num;
  std::vector<i64> visit_idx;
  std::vector<unsigned char> visit_full_flag;  // 1 = full, 0 = partial

  // What the kernel evaluates inside partial blocks: the source mask AND the
  // bounds check q < q_len && kv < kv_len. Unset after deserialization until
  // with_mask() re-attaches one.
  MaskMod runtime_mask;

  i64 row_slot(i64 b, i64 h, i64 r) const { return (b * h_dims + h) * rows + r; }
  i64 idx_slot(i64 b, i64 h, i64 r, i64 i) const { return row_slot(b, h, r) * cols + i; }

  i64 partial_count(i64 b, i64 h, i64 r) const { return partial_num[static_cast<std::size_t>(row_slot(b, h, r))]; }
  i64 partial_index(i64 b, i64 h, i64 r, i64 i) const { return partial_idx[static_cast<std::size_t>(idx_slot(b, h, r, i))]; }
  i64 full_count(i64 b, i64 h, i64 r) const { return full_num[static_cast<std::size_t>(row_slot(b, h, r))]; }
  i64 full_index(i64 b, i64 h, i64 r, i64 i) const { return full_idx[static_cast<std::size_t>(idx_slot(b, h, r, i))]; }
  i64 visit_count(i64 b, i64 h, i64 r) const { return visit_num[static_cast<std::size_t>(row_slot(b, h, r))]; }
  i64 visit_index(i64 b, i64 h, i64 r, i64 i) const { return visit_idx[static_cast<std::size_t>(idx_slot(b, h, r, i))]; }
  bool visit_is_full(i64 b, i64 h, i64 r, i64 i) const { return visit_full_flag[static_cast<std::size_t>(idx_slot(b, h, r, i))] != 0; }

  bool has_runtime_mask() const { return static_cast<bool>(runtime_mask); }

  // Copy of this mask with a fresh runtime mask built from `user_mask` plus
  // the bounds check. Used after deserialization (the callable itself cannot
  // be stored in a file) and by index conversions that change coordinates.
  BlockMask with_mask(const MaskMod& user_mask) const;
};

// Dense (b_dims, h_dims, rows, cols) grid of block kinds; the explicit view
// of a BlockMask used for inspection and for round-trip rebuilds.
struct BlockGrid {
  i64 b_dims = 1, h_dims = 1, rows = 0, cols = 0;
  std::vector<BlockKind> kind;

  BlockKind at(i64 b, i64 h, i64 r, i64 c) const {
    return kind[static_cast<std::size_t>(((b * h_dims + h) * rows + r) * cols + c)];
  }
  BlockKind& at(i64 b, i64 h, i64 r, i64 c) {
    return kind[static_cast<std::size_t>(((b * h_dims + h) * rows + r) * cols + c)];
  }
};

struct SparsityReport {
  i64 total_blocks = 0;
  i64 full_blocks = 0;
  i64 partial_blocks = 0;
  i64 empty_blocks = 0;
  double density = 0.0;  // (full + partial) / total
};

// Classifies every block of the score matrix by exhaustive evaluation of
// `mask` over the block's in-range positions: all true and the block fully in
// range -> full; any true -> partial; none -> empty. Ragged boundary blocks
// (overhanging q_len or kv_len) are never classified full, even if every
// in-range position is true. Pass b_dims = 1 (h_dims = 1) when the mask does
// not depend on batch (head).
BlockMask create_block_mask(const MaskMod& mask, i64 b_dims, i64 h_dims, i64 q_len, i64 kv_len,
                            i64 bs_q = 128, i64 bs_kv = 128);

// Transposed view: block (r, c) of the result is block (c, r) of the input,
// with q/kv roles swapped. Kinds carry over unchanged (a tile's position set
// is the same set transposed). The backward pass iterates this to own kv rows.
BlockMask transpose(const BlockMask& bm);

BlockGrid to_dense(const BlockMask& bm);

// Rebuilds a BlockMask from an explicit grid (ascending index lists, merged
// visit order). Exact inverse of to_dense given the same geometry.
BlockMask block_mask_from_grid(const BlockGrid& grid, i64 bs_q, i64 bs_kv, i64 q_len, i64 kv_len,
                               const MaskMod& user_mask);

SparsityReport sparsity(const BlockMask& bm);

// Reclassifies every full block as partial. Observable behaviour of the
// kernels must not change (the mask is true everywhere in those blocks); the
// per-position mask evaluation count goes up by exactly the positions the
// full blocks covered. Exists to test that claim and to measure what the
// full-block fast path buys.
BlockMask demote_full_to_partial(const BlockMask& bm);

// Adds every empty block to the partial list (rows become dense, ascending).
// The extra blocks are fully masked, so kernel output must not change; this
// is the negative control proving that skipped blocks truly contribute
// nothing.
BlockMask promote_empty_to_partial(const BlockMask& bm);

// Binary format: eight u64 little-endian header fields (b_dims, h_dims,
// rows, cols, bs_q, bs_kv, q_len, kv_len), then the four count/index arrays
// as i64 little-endian in declaration order. The visit list is rebuilt on
// load by merging the two ascending lists; the runtime mask cannot be
// serialized, so the loaded mask has none until with_mask() is called.
void save_block_mask(const std::string& path, const BlockMask& bm);
BlockMask load_block_mask(const std::string& path);

// One character per block, one line per block row: '.' empty, '+' partial,
// '#' full rendered as UTF-8 squares (white / shaded / solid).
std::string render_ascii(const BlockMask& bm, i64 b = 0, i64 h = 0);

// Binary PPM (P6), one pixel per block: white empty, mid-gray partial,
// black full.
std::string render_ppm(const BlockMask& bm, i64 b = 0, i64 h = 0);
void write_ppm(const std::string& path, const BlockMask& bm, i64 b = 0, i64 h = 0);

}  // namespace blockattn
