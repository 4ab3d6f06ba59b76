// SPDX-License-Identifier: Apache-2.0
#include <blockattn/validate.hpp>

#include <string>

namespace blockattn {
namespace detail {

namespace {
std::string fmt(const ShapeInfo& s) {
  return "(" + std::to_string(s.b) + "," + std::to_string(s.h) + "," + std::to_string(s.l) + "," +
         std::to_string(s.d) + ")";
}
}  // namespace

void validate_shapes(const ShapeInfo& q, const ShapeInfo& k, const ShapeInfo& v,
                     const AttentionConfig& cfg) {
  cfg.validate();
  if (k.b != v.b || k.h != v.h || k.l != v.l || k.d != v.d) {
    throw ShapeMismatch("validate_inputs: k " + fmt(k) + " and v " + fmt(v) + " must agree");
  }
  if (q.d != k.d) {
    throw ShapeMismatch("validate_inputs: head dim mismatch, q " + fmt(q) + " vs k " + fmt(k));
  }
  if (k.b != q.b && k.b != 1) {
    throw ShapeMismatch("validate_inputs: kv batch must be q batch or 1, q " + fmt(q) + " vs k " +
                        fmt(k));
  }
  if (q.h != cfg.gqa_group * k.h) {
    throw ShapeMismatch("validate_inputs: query heads (" + std::to_string(q.h) +
                        ") must equal gqa_group (" + std::to_string(cfg.gqa_group) +
                        ") * kv heads (" + std::to_string(k.h) + ")");
  }
}

}  // namespace detail
}  // namespace blockattn
