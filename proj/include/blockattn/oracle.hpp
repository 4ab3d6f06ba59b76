// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <blockattn/config.hpp>
#include <blockattn/engine.hpp>
#include <blockattn/modifiers.hpp>
#include <blockattn/tensor.hpp>

namespace blockattn {

// Reference implementations the tiled engine is judged against. Deliberately
// written the slow, obvious way -- materialize the score row, subtract the
// row max, normalize -- sharing no traversal logic with the engine, so an
// agreement between the two is evidence rather than tautology.
//
// dense_forward matches the engine's conventions exactly: scores are scaled
// by cfg.effective_scale, the score modifier runs in double, masked rows
// yield zero output and lse == -inf, and query head h reads kv head
// h / gqa_group. The block sizes in cfg are ignored (there are no blocks
// here).
template <typename Real>
AttentionOutput<Real> dense_forward(const Tensor4<Real>& q, const Tensor4<Real>& k,
                                    const Tensor4<Real>& v, const ScoreMod& smod,
                                    const MaskMod& mask, const AttentionConfig& cfg);

// Central-difference gradients of the scalar loss L = sum(out^2) / 2 under
// dense_forward, perturbing every element of q, k and v by +/-eps. With that
// loss the upstream gradient equals the forward output, so the engine
// comparison is backward(..., d_out = out). O(elements) full forwards -- the
// guard throws SizeTooLarge beyond 16 tokens or 8 features to keep misuse
// from hanging a test run.
template <typename Real>
Gradients<Real> dense_backward_fd(const Tensor4<Real>& q, const Tensor4<Real>& k,
                                  const Tensor4<Real>& v, const ScoreMod& smod,
                                  const MaskMod& mask, const AttentionConfig& cfg,
                                  double eps = 1e-5);

// Root-mean-square difference, accumulated in double regardless of input
// precision. Shapes must match.
template <typename RealA, typename RealB>
double rmse(const Tensor4<RealA>& a, const Tensor4<RealB>& b);

template <typename RealA, typename RealB>
double max_abs_diff(const Tensor4<RealA>& a, const Tensor4<RealB>& b);

// 64-bit reference run of float inputs: upcast, dense_forward in double.
// The gold standard the 32-bit paths are scored against.
using GoldenResult = AttentionOutput<double>;
GoldenResult golden_forward(const Tensor4<float>& q, const Tensor4<float>& k,
                            const Tensor4<float>& v, const ScoreMod& smod, const MaskMod& mask,
                            const AttentionConfig& cfg);

}  // namespace blockattn
