// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include <blockattn/modifiers.hpp>

namespace blockattn {

// ---------------------------------------------------------------------------
// Stock masks. Each is a pure positional predicate; none of them depends on
// score values, so they all compose with any score modifier.
// ---------------------------------------------------------------------------

// q may attend to kv iff q_idx >= kv_idx.
MaskMod causal();

// Causal plus a lookback limit: q_idx >= kv_idx and q_idx - kv_idx <= window.
// The causal half is part of the definition here -- a sliding window over an
// autoregressive stream never looks ahead, so baking it in avoids every call
// site writing and_mask(causal(), ...). window must be >= 0.
MaskMod sliding_window(i64 window);

// Tokens attend only within their own document. doc_ids[i] is the document
// id of token i; evaluating at an index outside the table throws
// IndexOutOfRange.
MaskMod document_mask(std::vector<i64> doc_ids);

// Bidirectional attention inside the first prefix_len tokens, causal
// afterwards: kv_idx < prefix_len or q_idx >= kv_idx.
MaskMod prefix_lm(i64 prefix_len);

// Everything attends to everything.
MaskMod noop_mask();

// ---------------------------------------------------------------------------
// Stock score modifiers.
// ---------------------------------------------------------------------------

// Identity transform (derivative 1).
ScoreMod noop_score();

// Linear positional bias: score + slopes[h] * (q_idx - kv_idx). The bias does
// not depend on the score, so the derivative is exactly 1. Evaluating at a
// head index outside the slope table throws IndexOutOfRange.
ScoreMod alibi(std::vector<double> slopes);

// Conventional geometric slope ladder for `heads` heads:
// slopes[h] = -2^(-8 * (h + 1) / heads).
std::vector<double> alibi_slopes(i64 heads);

// Smooth score clamp: cap * tanh(score / cap), derivative
// 1 - tanh^2(score / cap). cap must be strictly positive (NonPositiveCap).
ScoreMod soft_cap(double cap);

// ---------------------------------------------------------------------------
// Combinators.
// ---------------------------------------------------------------------------

// Logical conjunction / disjunction of two masks.
MaskMod and_mask(MaskMod a, MaskMod b);
MaskMod or_mask(MaskMod a, MaskMod b);

// Shift the query coordinate: the returned mask evaluated at (b,h,q,kv)
// answers m at (b,h,q+offset,kv). This is how a decode step sees a mask whose
// definition is in absolute positions while its q tensor holds only the new
// rows.
MaskMod offset_mask(MaskMod m, i64 offset);
ScoreMod offset_score(ScoreMod s, i64 offset);

// ---------------------------------------------------------------------------
// Neighborhood attention on a 2-D canvas.
// ---------------------------------------------------------------------------

// Canvas dimensions and odd kernel size for 2-D neighborhood attention.
// Validation (GeometryMismatch): dims >= 1, kernel odd, >= 1 and
// <= min(canvas_h, canvas_w).
struct NAGeometry {
  i64 canvas_h = 0;
  i64 canvas_w = 0;
  i64 kernel = 0;

  NAGeometry(i64 h, i64 w, i64 k);
  i64 tokens() const { return canvas_h * canvas_w; }
};

// Neighborhood attention with tokens laid out in row-major pixel order:
// token t sits at (t / canvas_w, t % canvas_w), and q attends to kv iff the
// Chebyshev distance between their pixels is <= kernel / 2 (integer
// division). Windows are centered and not clamped at the canvas edge, so
// border pixels simply see a truncated neighborhood. Indices outside the
// canvas throw IndexOutOfRange.
MaskMod na_naive(NAGeometry g);

// A relabeling of token positions. forward[slot] is the canvas (row-major
// pixel) index stored at that slot; it must be a bijection on
// [0, forward.size()).
struct Permutation {
  std::vector<i64> forward;
};

// Tile layout: the canvas is cut into tile x tile squares; tiles are visited
// row-major, pixels row-major within each tile. tile must divide both canvas
// dims. Keeping a neighborhood inside one tile keeps it inside a short slot
// range, which is what turns spatial locality into block sparsity.
Permutation tile_permutation(NAGeometry g, i64 tile);

// Morton (Z-order) layout for square power-of-two canvases: slot bit 2i is
// bit i of the pixel column, slot bit 2i+1 is bit i of the pixel row.
Permutation morton_permutation(NAGeometry g);

// View a mask through a relabeling: the returned mask at slot coordinates
// (q, kv) answers base at canvas coordinates (forward[q], forward[kv]).
// Throws GeometryMismatch if p is not a bijection, IndexOutOfRange when
// evaluated outside [0, n).
MaskMod remap_mask(MaskMod base, Permutation p);

}  // namespace blockattn
