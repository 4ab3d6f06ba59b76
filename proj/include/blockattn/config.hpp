// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <optional>
#include <string>

#include <blockattn/errors.hpp>
#include <blockattn/tensor.hpp>

namespace blockattn {

// Knobs shared by the forward, backward and decode paths. A default
// constructed config is the common case: softmax scale 1/sqrt(head_dim),
// no grouped-query sharing, 128x128 score blocks.
struct AttentionConfig {
  // Softmax temperature applied to raw q.k scores. Unset means 1/sqrt(D).
  std::optional<double> scale;

  // Number of query heads sharing one kv head. H_q == gqa_group * H_kv.
  i64 gqa_group = 1;

  // Block sizes of the tiled score-matrix traversal. These must match the
  // BlockMask the engine is given.
  i64 block_size_q = 128;
  i64 block_size_kv = 128;

  double effective_scale(i64 head_dim) const {
    if (scale.has_value()) return *scale;
    return 1.0 / std::sqrt(static_cast<double>(head_dim));
  }

  void validate() const {
    if (scale.has_value() && !(std::isfinite(*scale) && *scale > 0.0)) {
      throw ShapeMismatch("AttentionConfig: scale must be finite and positive");
    }
    if (gqa_group < 1) {
      throw ShapeMismatch("AttentionConfig: gqa_group must be >= 1, got " +
                          std::to_string(gqa_group));
    }
    if (block_size_q < 1 || block_size_kv < 1) {
      throw ShapeMismatch("AttentionConfig: block sizes must be >= 1");
    }
  }
};

}  // namespace blockattn
