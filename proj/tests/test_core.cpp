// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <limits>

#include <blockattn/config.hpp>
#include <blockattn/mask_library.hpp>
#include <blockattn/modifiers.hpp>
#include <blockattn/random.hpp>
#include <blockattn/tensor.hpp>
#include <blockattn/validate.hpp>

#include "test_support.hpp"

using namespace blockattn;

TEST_CASE("Tensor4 construction and indexing") {
  Tensor4<float> t(2, 3, 4, 5);
  CHECK(t.size() == 120);
  CHECK(t(1, 2, 3, 4) == 0.0f);
  t(1, 2, 3, 4) = 7.5f;
  CHECK(t.at(1, 2, 3, 4) == 7.5f);
  CHECK_THROWS_AS(t.at(2, 0, 0, 0), IndexOutOfRange);
  CHECK_THROWS_AS(t.at(0, 0, 0, 5), IndexOutOfRange);
  CHECK_THROWS_AS(Tensor4<float>(0, 1, 1, 1), ShapeMismatch);
  CHECK_THROWS_AS(Tensor4<float>(1, 1, 2, 2, {1.0f, 2.0f}), ShapeMismatch);
  CHECK_THROWS_AS(Tensor4<float>(1, 1, 1, 2, {1.0f, std::nanf("")}), NonFiniteInput);
  CHECK_THROWS_AS(
      Tensor4<float>(1, 1, 1, 2, {1.0f, std::numeric_limits<float>::infinity()}),
      NonFiniteInput);

  const auto d = t.cast<double>();
  CHECK(d(1, 2, 3, 4) == 7.5);
  CHECK(d.same_shape(Tensor4<double>(2, 3, 4, 5)));
}

TEST_CASE("tensor fixture files round-trip bit for bit") {
  const auto t32 = random_tensor<float>(41, 2, 2, 3, 4);
  const std::string p32 = testsupport::tmp_path("fix32.bin");
  save_tensor(p32, t32);
  const auto back32 = load_tensor<float>(p32);
  REQUIRE(back32.same_shape(t32));
  CHECK(back32.data() == t32.data());

  const auto t64 = random_tensor<double>(42, 1, 3, 2, 2);
  const std::string p64 = testsupport::tmp_path("fix64.bin");
  save_tensor(p64, t64);
  CHECK(load_tensor<double>(p64).data() == t64.data());

  // A 32-bit file refuses a 64-bit load and vice versa.
  CHECK_THROWS_AS(load_tensor<double>(p32), Error);
  CHECK_THROWS_AS(load_tensor<float>(p64), Error);

  // Truncated payload is detected.
  {
    std::FILE* f = std::fopen(p32.c_str(), "rb+");
    REQUIRE(f != nullptr);
    std::fseek(f, 0, SEEK_END);
    const long size = std::ftell(f);
    std::fclose(f);
    REQUIRE(truncate(p32.c_str(), size - 5) == 0);
  }
  CHECK_THROWS_AS(load_tensor<float>(p32), Error);
}

TEST_CASE("SplitMix64 is deterministic and bounded") {
  SplitMix64 a(123), b(123), c(124);
  bool all_equal = true, any_diff_seed = false;
  for (int i = 0; i < 1000; ++i) {
    const double x = a.next_pm1();
    if (x != b.next_pm1()) all_equal = false;
    if (x != c.next_pm1()) any_diff_seed = true;
    CHECK(x >= -1.0);
    CHECK(x < 1.0);
  }
  CHECK(all_equal);
  CHECK(any_diff_seed);

  const auto t1 = random_tensor<float>(7, 1, 2, 3, 4);
  const auto t2 = random_tensor<float>(7, 1, 2, 3, 4);
  CHECK(t1.data() == t2.data());
}

TEST_CASE("AttentionConfig defaults and validation") {
  AttentionConfig cfg;
  CHECK(cfg.effective_scale(16) == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(cfg.effective_scale(64) == doctest::Approx(0.125).epsilon(1e-15));
  cfg.scale = 0.5;
  CHECK(cfg.effective_scale(16) == 0.5);

  AttentionConfig bad;
  bad.gqa_group = 0;
  CHECK_THROWS_AS(bad.validate(), ShapeMismatch);
  bad = AttentionConfig{};
  bad.scale = -1.0;
  CHECK_THROWS_AS(bad.validate(), ShapeMismatch);
  bad = AttentionConfig{};
  bad.block_size_kv = 0;
  CHECK_THROWS_AS(bad.validate(), ShapeMismatch);
}

TEST_CASE("validate_inputs accepts broadcast kv batch and rejects mismatches") {
  AttentionConfig cfg;
  const auto q = random_tensor<float>(1, 2, 4, 8, 16);
  const auto k = random_tensor<float>(2, 2, 4, 6, 16);
  const auto v = random_tensor<float>(3, 2, 4, 6, 16);
  CHECK_NOTHROW(validate_inputs(q, k, v, cfg));

  // kv batch 1 broadcasts across q batch 2.
  const auto k1 = random_tensor<float>(4, 1, 4, 6, 16);
  const auto v1 = random_tensor<float>(5, 1, 4, 6, 16);
  CHECK_NOTHROW(validate_inputs(q, k1, v1, cfg));

  // Grouped queries: 4 query heads over 2 kv heads.
  AttentionConfig gqa;
  gqa.gqa_group = 2;
  const auto k2 = random_tensor<float>(6, 2, 2, 6, 16);
  const auto v2 = random_tensor<float>(7, 2, 2, 6, 16);
  CHECK_NOTHROW(validate_inputs(q, k2, v2, gqa));
  CHECK_THROWS_AS(validate_inputs(q, k2, v2, cfg), ShapeMismatch);  // group 1: heads differ

  // k/v must agree exactly.
  CHECK_THROWS_AS(validate_inputs(q, k, v1, cfg), ShapeMismatch);
  // head dim mismatch
  const auto k3 = random_tensor<float>(8, 2, 4, 6, 8);
  const auto v3 = random_tensor<float>(9, 2, 4, 6, 8);
  CHECK_THROWS_AS(validate_inputs(q, k3, v3, cfg), ShapeMismatch);
  // kv batch neither 1 nor q batch
  const auto k4 = random_tensor<float>(10, 3, 4, 6, 16);
  const auto v4 = random_tensor<float>(11, 3, 4, 6, 16);
  CHECK_THROWS_AS(validate_inputs(q, k4, v4, cfg), ShapeMismatch);

  // Tensors are re-scanned for finiteness (mutation after construction).
  auto qb = q;
  qb(0, 1, 2, 3) = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(validate_inputs(qb, k, v, cfg), NonFiniteInput);
}

TEST_CASE("mod_from_mask folds a mask into score space") {
  const auto sm = mod_from_mask(causal());
  CHECK(sm.apply(3.25, 0, 0, 5, 3) == 3.25);  // live: exact pass-through
  CHECK(sm.apply(3.25, 0, 0, 3, 5) == -std::numeric_limits<double>::infinity());
  CHECK(sm.dapply(3.25, 0, 0, 5, 3) == 1.0);
  CHECK(sm.dapply(3.25, 0, 0, 3, 5) == 0.0);
}

TEST_CASE("compose chains score modifiers with the chain rule") {
  const auto inner = alibi({-0.5, -0.25});
  const auto outer = soft_cap(5.0);
  const auto chained = compose(outer, inner);
  const double s = 1.75;
  const double manual = outer.apply(inner.apply(s, 0, 1, 9, 2), 0, 1, 9, 2);
  CHECK(chained.apply(s, 0, 1, 9, 2) == doctest::Approx(manual).epsilon(1e-15));
  // derivative: FD against the composed apply
  const double eps = 1e-6;
  const double fd = (chained.apply(s + eps, 0, 1, 9, 2) - chained.apply(s - eps, 0, 1, 9, 2)) /
                    (2.0 * eps);
  CHECK(chained.dapply(s, 0, 1, 9, 2) == doctest::Approx(fd).epsilon(1e-7));
}

// Every stock score modifier must ship the exact derivative of its transform.
// Central differences at 1000 points is the oracle.
TEST_CASE("score modifier derivatives agree with finite differences") {
  struct Named {
    const char* name;
    ScoreMod sm;
  };
  const Named mods[] = {
      {"noop", noop_score()},
      {"alibi", alibi(alibi_slopes(4))},
      {"soft_cap(3.7)", soft_cap(3.7)},
      {"soft_cap(20)", soft_cap(20.0)},
      {"compose(soft_cap,alibi)", compose(soft_cap(7.0), alibi(alibi_slopes(4)))},
  };
  SplitMix64 rng(2024);
  for (const auto& m : mods) {
    CAPTURE(m.name);
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
      const double s = rng.next_pm1() * 30.0;
      const i64 b = static_cast<i64>(rng.next_below(2));
      const i64 h = static_cast<i64>(rng.next_below(4));
      const i64 q = static_cast<i64>(rng.next_below(64));
      const i64 kv = static_cast<i64>(rng.next_below(64));
      const double eps = 1e-4;
      const double fd = (m.sm.apply(s + eps, b, h, q, kv) - m.sm.apply(s - eps, b, h, q, kv)) /
                        (2.0 * eps);
      const double got = m.sm.dapply(s, b, h, q, kv);
      worst = std::max(worst, std::abs(got - fd) / std::max(1.0, std::abs(got)));
    }
    CHECK(worst <= 1e-5);
  }
}
