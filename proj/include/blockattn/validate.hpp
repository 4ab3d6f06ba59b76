// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <blockattn/config.hpp>
#include <blockattn/tensor.hpp>

namespace blockattn {

namespace detail {
struct ShapeInfo {
  i64 b, h, l, d;
};
// Shared shape/finiteness rules for q/k/v against a config; throws
// ShapeMismatch or NonFiniteInput. Lives in the .cpp so the message wording
// stays in one place.
void validate_shapes(const ShapeInfo& q, const ShapeInfo& k, const ShapeInfo& v,
                     const AttentionConfig& cfg);
}  // namespace detail

// Checks every precondition the kernels rely on:
//   - config values are self-consistent,
//   - k and v agree exactly in shape,
//   - head dims match, query heads == gqa_group * kv heads,
//   - kv batch is either q batch or 1 (broadcast; a shared physical cache
//     uses batch 1),
//   - all elements finite.
// Tensor4 already refuses non-finite values at construction, but tensors are
// mutable afterwards, so this re-scans. It is O(elements) and cheap next to
// the attention itself.
template <typename Real>
void validate_inputs(const Tensor4<Real>& q, const Tensor4<Real>& k, const Tensor4<Real>& v,
                     const AttentionConfig& cfg) {
  detail::validate_shapes({q.batch(), q.heads(), q.length(), q.dim()},
                          {k.batch(), k.heads(), k.length(), k.dim()},
                          {v.batch(), v.heads(), v.length(), v.dim()}, cfg);
  if (!q.all_finite()) throw NonFiniteInput("validate_inputs: q contains NaN or inf");
  if (!k.all_finite()) throw NonFiniteInput("validate_inputs: k contains NaN or inf");
  if (!v.all_finite()) throw NonFiniteInput("validate_inputs: v contains NaN or inf");
}

}  // namespace blockattn
