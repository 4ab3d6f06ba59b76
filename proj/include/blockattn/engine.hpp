// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include <blockattn/block_mask.hpp>
#include <blockattn/config.hpp>
#include <blockattn/modifiers.hpp>
#include <blockattn/tensor.hpp>

namespace blockattn {

// Deterministic work counters, summed across workers in worker order.
//   madds      : fused multiply-add-equivalents actually executed (q.k dots,
//                weighted-v accumulation, accumulator rescales; backward adds
//                its recomputation and gradient products).
//   mask_evals : runtime mask evaluations (partial blocks only; full blocks
//                are the point of not paying this).
//   score_evals: score-modifier applications.
struct OpCounters {
  std::uint64_t madds = 0;
  std::uint64_t mask_evals = 0;
  std::uint64_t score_evals = 0;

  OpCounters& operator+=(const OpCounters& o) {
    madds += o.madds;
    mask_evals += o.mask_evals;
    score_evals += o.score_evals;
    return *this;
  }
};

// Forward result: attention output plus the log-sum-exp statistic per query
// row, laid out (batch, heads, q_len) row-major. lse is what the backward
// pass uses to rebuild softmax weights without storing the score matrix.
// Fully masked rows have a zero output row and lse == -inf.
template <typename Real>
struct AttentionOutput {
  Tensor4<Real> out;
  std::vector<Real> lse;

  Real lse_at(i64 b, i64 h, i64 q) const {
    return lse[static_cast<std::size_t>((b * out.heads() + h) * out.length() + q)];
  }
};

template <typename Real>
struct Gradients {
  Tensor4<Real> dq, dk, dv;
};

// Tiled forward pass. Walks only the blocks the BlockMask lists, maintaining
// a running max / running sum / rescaled accumulator per query row (one pass
// over kv, no materialized score matrix). The score modifier is applied in
// every visited block; the runtime mask only inside partial blocks.
//
// Numerical contract worth calling out: a masked score is -inf and produces
// an exact zero weight, and a block that leaves the running max at -inf is
// skipped before it can touch the accumulator. Consequently visiting extra
// fully-masked blocks, or renaming kv indices (paging) while preserving
// visit order, reproduces the unpaged result bit for bit.
//
// Requirements checked here (BlockMaskMismatch): bm lengths/block sizes match
// the tensors and config, bm.b_dims in {1, B}, bm.h_dims in {1, H_q}, and bm
// carries a runtime mask. Input tensors are validated via validate_inputs.
// Query head h reads kv head h / gqa_group.
template <typename Real>
AttentionOutput<Real> forward(const Tensor4<Real>& q, const Tensor4<Real>& k,
                              const Tensor4<Real>& v, const ScoreMod& smod, const BlockMask& bm,
                              const AttentionConfig& cfg, OpCounters* counters = nullptr);

// Backward pass with recomputation: scores are rebuilt from q/k and the saved
// lse, never stored. fwd must be the untouched result of forward on the same
// tensors (StaleStatistics otherwise). bm_t is transpose(bm) and drives the
// dk/dv loops so each worker owns whole kv rows; dq iterates bm directly.
// The score modifier's dapply supplies the transform derivative.
template <typename Real>
Gradients<Real> backward(const Tensor4<Real>& q, const Tensor4<Real>& k, const Tensor4<Real>& v,
                         const AttentionOutput<Real>& fwd, const Tensor4<Real>& d_out,
                         const ScoreMod& smod, const BlockMask& bm, const BlockMask& bm_t,
                         const AttentionConfig& cfg, OpCounters* counters = nullptr);

// Single decode step: q_step holds n_new query rows that logically sit at
// absolute positions [offset, offset + n_new) of the sequence whose keys and
// values fill k_cache/v_cache. mask/smod are written in absolute positions;
// this routine shifts them by offset and runs the tiled forward over the
// cache. bm must describe the shifted mask at q_len == n_new (its runtime
// mask is ignored; the shift applied here is authoritative). Equivalent to
// the corresponding rows of a full forward, which is the tested contract.
// Throws OffsetOutOfRange unless 0 <= offset and offset + n_new <= cache len.
template <typename Real>
AttentionOutput<Real> decode(const Tensor4<Real>& q_step, const Tensor4<Real>& k_cache,
                             const Tensor4<Real>& v_cache, i64 offset, const MaskMod& mask,
                             const ScoreMod& smod, const BlockMask& bm,
                             const AttentionConfig& cfg, OpCounters* counters = nullptr);

}  // namespace blockattn
