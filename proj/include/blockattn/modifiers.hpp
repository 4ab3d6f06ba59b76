// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <limits>

#include <blockattn/tensor.hpp>

namespace blockattn {

// A mask modifier: pure predicate over (batch, head, query index, kv index).
// True means the score participates in attention; false means it is removed
// (set to -inf before the softmax). Implementations must be pure functions of
// their arguments -- the engine evaluates them in arbitrary order, possibly
// from several threads, and block classification assumes the answer never
// changes between calls.
struct MaskMod {
  std::function<bool(i64 b, i64 h, i64 q_idx, i64 kv_idx)> eval;

  bool operator()(i64 b, i64 h, i64 q_idx, i64 kv_idx) const { return eval(b, h, q_idx, kv_idx); }
  explicit operator bool() const { return static_cast<bool>(eval); }
};

// A score modifier: transforms an already-scaled attention score, plus the
// exact derivative of that transform with respect to the score. `dapply` is
// what makes the backward pass possible without autograd; it must be the
// analytic derivative of `apply` in its first argument. Both are evaluated in
// double precision regardless of the tensor element type.
struct ScoreMod {
  std::function<double(double score, i64 b, i64 h, i64 q_idx, i64 kv_idx)> apply;
  std::function<double(double score, i64 b, i64 h, i64 q_idx, i64 kv_idx)> dapply;

  // Promise that apply returns its score unchanged and dapply returns 1 for
  // every input. noop_score() sets it; wrappers (paged-coordinate
  // conversion) use it to skip the indirect call in their hot path while
  // still validating coordinates. Leave false when in doubt.
  bool identity = false;

  explicit operator bool() const { return static_cast<bool>(apply); }
};

// Fold a mask into score space: masked positions become -inf, which the
// softmax turns into an exact zero weight. The derivative is 1 where the mask
// passes and 0 where it does not (the branch is piecewise constant in score).
// This is the bridge the dense reference uses so masks and score transforms
// can share one code path.
inline ScoreMod mod_from_mask(const MaskMod& m) {
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  auto mask = m.eval;
  return ScoreMod{
      [mask](double s, i64 b, i64 h, i64 q, i64 kv) { return mask(b, h, q, kv) ? s : kNegInf; },
      [mask](double, i64 b, i64 h, i64 q, i64 kv) { return mask(b, h, q, kv) ? 1.0 : 0.0; }};
}

// Compose two score modifiers: outer(inner(s)). Chain rule for the
// derivative.
inline ScoreMod compose(const ScoreMod& outer, const ScoreMod& inner) {
  auto oa = outer.apply, od = outer.dapply, ia = inner.apply, id = inner.dapply;
  return ScoreMod{[oa, ia](double s, i64 b, i64 h, i64 q, i64 kv) {
                    return oa(ia(s, b, h, q, kv), b, h, q, kv);
                  },
                  [oa, od, ia, id](double s, i64 b, i64 h, i64 q, i64 kv) {
                    const double inner_val = ia(s, b, h, q, kv);
                    return od(inner_val, b, h, q, kv) * id(s, b, h, q, kv);
                  }};
}

}  // namespace blockattn
