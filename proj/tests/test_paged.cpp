// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cstring>
#include <set>
#include <vector>

#include <blockattn/engine.hpp>
#include <blockattn/mask_library.hpp>
#include <blockattn/paged_kv.hpp>
#include <blockattn/random.hpp>

#include "test_support.hpp"

using namespace blockattn;

namespace {

// Every structural invariant the table must keep, checked in one sweep.
void check_table(const PageTable& pt, i64 free_pages) {
  std::set<std::int32_t> mapped;
  for (i64 b = 0; b < pt.batches; ++b) {
    const i64 pages_needed = (pt.seq_len[static_cast<std::size_t>(b)] + pt.page_size - 1) / pt.page_size;
    for (i64 lp = 0; lp < pt.max_logical_pages; ++lp) {
      const auto phys = pt.lookup(b, lp);
      if (lp < pages_needed) {
        REQUIRE(phys != PageTable::kSentinel);
        REQUIRE(pt.phys_to_logical[static_cast<std::size_t>(phys)] == lp);
        REQUIRE(pt.owner[static_cast<std::size_t>(phys)] == b);
        REQUIRE(mapped.insert(phys).second);  // no page serves two masters
      } else {
        REQUIRE(phys == PageTable::kSentinel);
      }
    }
  }
  for (i64 p = 0; p < pt.num_physical_pages; ++p) {
    if (!mapped.count(static_cast<std::int32_t>(p))) {
      REQUIRE(pt.owner[static_cast<std::size_t>(p)] == PageTable::kSentinel);
      REQUIRE(pt.phys_to_logical[static_cast<std::size_t>(p)] == PageTable::kSentinel);
    }
  }
  REQUIRE(static_cast<i64>(mapped.size()) + free_pages == pt.num_physical_pages);
}

// Reads batch b's logical tokens back out of the physical buffer.
template <typename Real>
Tensor4<Real> gather(const PagedKVCache<Real>& cache, i64 b, bool keys) {
  const auto& phys = keys ? cache.k_phys() : cache.v_phys();
  const auto& pt = cache.table();
  const i64 n = cache.seq_len(b), heads = phys.heads(), dim = phys.dim();
  Tensor4<Real> out(1, heads, n, dim);
  for (i64 t = 0; t < n; ++t) {
    const i64 page = pt.lookup(b, t / pt.page_size);
    const i64 slot = page * pt.page_size + t % pt.page_size;
    for (i64 h = 0; h < heads; ++h) {
      for (i64 d = 0; d < dim; ++d) out(0, h, t, d) = phys(0, h, slot, d);
    }
  }
  return out;
}

template <typename Real>
bool tensors_equal(const Tensor4<Real>& a, const Tensor4<Real>& b) {
  return a.same_shape(b) &&
         std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(Real)) == 0;
}

}  // namespace

TEST_CASE("cache lifecycle: assign, read back, replace, erase") {
  PagedKVCache<float> cache(/*batches=*/2, /*num_pages=*/8, /*page_size=*/4, /*kv_heads=*/2, /*dim=*/3);
  CHECK(cache.free_pages() == 8);
  CHECK(cache.max_tokens() == 32);
  CHECK(cache.seq_len(0) == 0);

  const auto k0 = random_tensor<float>(1, 1, 2, 10, 3);
  const auto v0 = random_tensor<float>(2, 1, 2, 10, 3);
  cache.assign(0, k0, v0);
  CHECK(cache.seq_len(0) == 10);
  CHECK(cache.free_pages() == 5);  // ceil(10/4) = 3 pages taken
  check_table(cache.table(), cache.free_pages());
  CHECK(tensors_equal(gather(cache, 0, true), k0));
  CHECK(tensors_equal(gather(cache, 0, false), v0));

  const auto k1 = random_tensor<float>(3, 1, 2, 5, 3);
  const auto v1 = random_tensor<float>(4, 1, 2, 5, 3);
  cache.assign(1, k1, v1);
  CHECK(cache.free_pages() == 3);
  check_table(cache.table(), cache.free_pages());
  CHECK(tensors_equal(gather(cache, 1, true), k1));

  // replacing a sequence frees the old pages first
  const auto k0b = random_tensor<float>(5, 1, 2, 3, 3);
  const auto v0b = random_tensor<float>(6, 1, 2, 3, 3);
  cache.assign(0, k0b, v0b);
  CHECK(cache.seq_len(0) == 3);
  CHECK(cache.free_pages() == 5);
  check_table(cache.table(), cache.free_pages());
  CHECK(tensors_equal(gather(cache, 0, true), k0b));
  CHECK(tensors_equal(gather(cache, 1, false), v1));  // neighbor untouched

  cache.erase(0);
  CHECK(cache.seq_len(0) == 0);
  CHECK(cache.free_pages() == 6);
  cache.erase(0);  // idempotent
  CHECK(cache.free_pages() == 6);
  check_table(cache.table(), cache.free_pages());
}

TEST_CASE("append fills slack before allocating") {
  PagedKVCache<float> cache(1, 4, 4, 1, 2);
  const auto mk = [](std::uint64_t seed, i64 n) { return random_tensor<float>(seed, 1, 1, n, 2); };
  cache.assign(0, mk(11, 6), mk(12, 6));  // 2 pages, 2 slack slots
  CHECK(cache.free_pages() == 2);

  cache.append_tokens(0, mk(13, 2), mk(14, 2));  // fits in the slack
  CHECK(cache.seq_len(0) == 8);
  CHECK(cache.free_pages() == 2);

  cache.append_tokens(0, mk(15, 5), mk(16, 5));  // needs 2 more pages
  CHECK(cache.seq_len(0) == 13);
  CHECK(cache.free_pages() == 0);
  check_table(cache.table(), cache.free_pages());

  // readback equals the concatenation of everything appended
  const auto got = gather(cache, 0, true);
  const auto a = mk(11, 6), b = mk(13, 2), c = mk(15, 5);
  for (i64 t = 0; t < 13; ++t) {
    const auto& src = t < 6 ? a : (t < 8 ? b : c);
    const i64 off = t < 6 ? t : (t < 8 ? t - 6 : t - 8);
    for (i64 d = 0; d < 2; ++d) CHECK(got(0, 0, t, d) == src(0, 0, off, d));
  }
}

TEST_CASE("capacity overflow throws and mutates nothing") {
  PagedKVCache<float> cache(2, 4, 4, 1, 2);
  const auto mk = [](std::uint64_t seed, i64 n) { return random_tensor<float>(seed, 1, 1, n, 2); };
  cache.assign(0, mk(21, 9), mk(22, 9));  // 3 of 4 pages
  const auto before_k = cache.k_phys().data();
  const auto before_free = cache.free_pages();

  CHECK_THROWS_AS(cache.assign(1, mk(23, 5), mk(24, 5)), OutOfPages);
  CHECK(cache.seq_len(1) == 0);
  CHECK(cache.free_pages() == before_free);
  CHECK(cache.k_phys().data() == before_k);
  check_table(cache.table(), cache.free_pages());

  CHECK_THROWS_AS(cache.append_tokens(0, mk(25, 8), mk(26, 8)), OutOfPages);
  CHECK(cache.seq_len(0) == 9);
  CHECK(cache.free_pages() == before_free);
  check_table(cache.table(), cache.free_pages());

  // replacing the same sequence may reuse its own pages: 4 pages fit
  cache.assign(0, mk(27, 16), mk(28, 16));
  CHECK(cache.seq_len(0) == 16);
  CHECK(cache.free_pages() == 0);
  check_table(cache.table(), cache.free_pages());
}

TEST_CASE("table invariants survive a random workload") {
  PagedKVCache<double> cache(3, 16, 4, 1, 2);
  SplitMix64 rng(0xabcdef);
  for (int step = 0; step < 200; ++step) {
    const i64 b = static_cast<i64>(rng.next_below(3));
    const int op = static_cast<int>(rng.next_below(4));
    const i64 n = 1 + static_cast<i64>(rng.next_below(10));
    const auto k = random_tensor<double>(rng.next_u64(), 1, 1, n, 2);
    const auto v = random_tensor<double>(rng.next_u64(), 1, 1, n, 2);
    try {
      if (op == 0) {
        cache.assign(b, k, v);
      } else if (op == 1) {
        cache.append_tokens(b, k, v);
      } else if (op == 2) {
        cache.erase(b);
      } else {
        cache.shuffle_free_pages(rng.next_u64());
      }
    } catch (const OutOfPages&) {
      // expected now and then; the checks below prove it was harmless
    }
    check_table(cache.table(), cache.free_pages());
  }
}

TEST_CASE("block mask conversion rewrites columns through the page table") {
  // hand-built table: batch 0 maps logical pages {0,1,2} -> physical {2,9,5}
  PageTable pt;
  pt.batches = 1;
  pt.max_logical_pages = 4;
  pt.num_physical_pages = 10;
  pt.page_size = 16;
  pt.table.assign(4, PageTable::kSentinel);
  pt.table[0] = 2;
  pt.table[1] = 9;
  pt.table[2] = 5;
  pt.phys_to_logical.assign(10, PageTable::kSentinel);
  pt.owner.assign(10, PageTable::kSentinel);
  pt.phys_to_logical[2] = 0; pt.owner[2] = 0;
  pt.phys_to_logical[9] = 1; pt.owner[9] = 0;
  pt.phys_to_logical[5] = 2; pt.owner[5] = 0;
  pt.seq_len = {41};  // 2 full pages + 9 tokens

  const auto bm = create_block_mask(causal(), 1, 1, 41, 41, 16, 16);
  REQUIRE(bm.cols == 3);
  const auto conv = convert_block_mask(bm, pt);
  CHECK(conv.b_dims == 1);
  CHECK(conv.rows == bm.rows);
  CHECK(conv.cols == 10);                  // spans the physical buffer
  CHECK(conv.kv_len == 160);
  CHECK(conv.q_len == bm.q_len);
  const std::vector<std::int32_t> map = {2, 9, 5};
  for (i64 r = 0; r < bm.rows; ++r) {
    REQUIRE(conv.visit_count(0, 0, r) == bm.visit_count(0, 0, r));
    CHECK(conv.partial_count(0, 0, r) == bm.partial_count(0, 0, r));
    CHECK(conv.full_count(0, 0, r) == bm.full_count(0, 0, r));
    for (i64 i = 0; i < bm.visit_count(0, 0, r); ++i) {
      // traversal order preserved, indices renamed
      CHECK(conv.visit_index(0, 0, r, i) == map[static_cast<std::size_t>(bm.visit_index(0, 0, r, i))]);
      CHECK(conv.visit_is_full(0, 0, r, i) == bm.visit_is_full(0, 0, r, i));
    }
  }
  CHECK(conv.has_runtime_mask());
  // physical position 2*16+3 is logical 3; causal row 5 sees it
  CHECK(conv.runtime_mask(0, 0, 5, 2 * 16 + 3));
  CHECK_FALSE(conv.runtime_mask(0, 0, 2, 2 * 16 + 3));
  // slack on the last mapped page (past token 41) is dead
  CHECK_FALSE(conv.runtime_mask(0, 0, 40, 5 * 16 + 9));

  // a mask referencing an unmapped logical page cannot convert
  const auto too_long = create_block_mask(causal(), 1, 1, 60, 60, 16, 16);
  CHECK_THROWS_AS(convert_block_mask(too_long, pt), UnmappedBlock);

  // page size disagreement is refused
  const auto wrong_bs = create_block_mask(causal(), 1, 1, 41, 41, 16, 8);
  CHECK_THROWS_AS(convert_block_mask(wrong_bs, pt), BlockMaskMismatch);
}

TEST_CASE("converted modifiers recover logical coordinates") {
  PagedKVCache<float> cache(2, 6, 4, 1, 2);
  const auto mk = [](std::uint64_t seed, i64 n) { return random_tensor<float>(seed, 1, 1, n, 2); };
  cache.assign(0, mk(31, 7), mk(32, 7));
  cache.assign(1, mk(33, 4), mk(34, 4));
  const auto& pt = cache.table();

  const auto conv = convert_mods(causal(), alibi({-1.0}), pt);
  for (i64 b = 0; b < 2; ++b) {
    for (i64 lp = 0; lp * pt.page_size < cache.seq_len(b); ++lp) {
      const i64 phys = pt.lookup(b, lp);
      for (i64 o = 0; o < pt.page_size; ++o) {
        const i64 logical = lp * pt.page_size + o;
        const i64 physical = phys * pt.page_size + o;
        if (logical < cache.seq_len(b)) {
          for (i64 qrow : {i64(0), i64(3), i64(6)}) {
            CHECK(conv.mask(b, 0, qrow, physical) == causal()(b, 0, qrow, logical));
            CHECK(conv.score.apply(0.5, b, 0, qrow, physical) ==
                  alibi({-1.0}).apply(0.5, b, 0, qrow, logical));
          }
        } else {
          CHECK_FALSE(conv.mask(b, 0, 6, physical));            // slack hidden
          CHECK(conv.score.apply(0.5, b, 0, 6, physical) == 0.5);  // identity
          CHECK(conv.score.dapply(0.5, b, 0, 6, physical) == 1.0);
        }
      }
    }
  }

  // unmapped page, or one owned by the other batch element: hard error
  i64 foreign = -1, unmapped = -1;
  for (i64 p = 0; p < 6; ++p) {
    if (pt.owner[static_cast<std::size_t>(p)] == 1) foreign = p;
    if (pt.owner[static_cast<std::size_t>(p)] == PageTable::kSentinel) unmapped = p;
  }
  REQUIRE(foreign >= 0);
  REQUIRE(unmapped >= 0);
  CHECK_THROWS_AS(conv.mask(0, 0, 0, foreign * 4), UnmappedPhysicalIndex);
  CHECK_THROWS_AS(conv.mask(0, 0, 0, unmapped * 4), UnmappedPhysicalIndex);
  CHECK_THROWS_AS(conv.mask(0, 0, 0, 6 * 4), UnmappedPhysicalIndex);  // out of buffer
  CHECK_THROWS_AS(conv.score.apply(0.0, 0, 0, 0, foreign * 4), UnmappedPhysicalIndex);

  // the conversion is a snapshot: erasing afterwards must not change it
  const i64 phys00 = pt.lookup(0, 0);
  cache.erase(0);
  CHECK(conv.mask(0, 0, 6, phys00 * 4 + 2) == causal()(0, 0, 6, 2));
}

TEST_CASE("identity score mods convert without losing coordinate checks") {
  PagedKVCache<float> cache(2, 6, 4, 1, 2);
  const auto mk = [](std::uint64_t seed, i64 n) { return random_tensor<float>(seed, 1, 1, n, 2); };
  cache.assign(0, mk(41, 7), mk(42, 7));
  cache.assign(1, mk(43, 4), mk(44, 4));
  const auto& pt = cache.table();

  REQUIRE(noop_score().identity);
  const auto conv = convert_mods(causal(), noop_score(), pt);
  // the wrapper still throws on foreign pages, so it must not claim identity
  CHECK_FALSE(conv.score.identity);

  const i64 phys00 = pt.lookup(0, 0);
  CHECK(conv.score.apply(2.5, 0, 0, 3, phys00 * 4 + 1) == 2.5);   // mapped
  const i64 phys01 = pt.lookup(0, 1);
  CHECK(conv.score.apply(-7.0, 0, 0, 6, phys01 * 4 + 3) == -7.0);  // slack
  CHECK(conv.score.dapply(9.0, 0, 0, 6, phys01 * 4 + 3) == 1.0);

  i64 foreign = -1;
  for (i64 p = 0; p < 6; ++p)
    if (pt.owner[static_cast<std::size_t>(p)] == 1) foreign = p;
  REQUIRE(foreign >= 0);
  CHECK_THROWS_AS(conv.score.apply(0.0, 0, 0, 0, foreign * 4), UnmappedPhysicalIndex);
  CHECK_THROWS_AS(conv.score.dapply(0.0, 0, 0, 0, 6 * 4), UnmappedPhysicalIndex);
}

TEST_CASE("paged attention is bit-identical to contiguous attention") {
  const i64 B = 2, Hq = 4, Hkv = 2, D = 8, page = 16;
  const std::vector<i64> lens = {53, 37};
  AttentionConfig cfg;
  cfg.gqa_group = 2;
  cfg.block_size_q = cfg.block_size_kv = page;

  PagedKVCache<float> cache(B, 10, page, Hkv, D);
  cache.shuffle_free_pages(0xfeed);  // scatter the layout
  std::vector<Tensor4<float>> ks, vs, qs;
  for (i64 b = 0; b < B; ++b) {
    ks.push_back(random_tensor<float>(700 + static_cast<std::uint64_t>(b), 1, Hkv, lens[static_cast<std::size_t>(b)], D));
    vs.push_back(random_tensor<float>(710 + static_cast<std::uint64_t>(b), 1, Hkv, lens[static_cast<std::size_t>(b)], D));
    qs.push_back(random_tensor<float>(720 + static_cast<std::uint64_t>(b), 1, Hq, lens[static_cast<std::size_t>(b)], D));
    cache.assign(b, ks.back(), vs.back());
  }

  const auto smod = soft_cap(8.0);
  for (i64 b = 0; b < B; ++b) {
    const i64 n = lens[static_cast<std::size_t>(b)];
    // contiguous reference for this sequence alone
    const auto bm = create_block_mask(causal(), 1, 1, n, n, page, page);
    const auto want = forward(qs[static_cast<std::size_t>(b)], ks[static_cast<std::size_t>(b)],
                              vs[static_cast<std::size_t>(b)], smod, bm, cfg);

    // paged run: same mask converted to physical coordinates. The physical
    // buffer has batch dim 1, which broadcasts under the engine's kv rules,
    // and the converted runtime mask pins physical pages to their owner.
    const PageTable one = [&] {
      PageTable t = cache.table();
      // narrow the table to this batch element so coordinates stay b=0
      PageTable s;
      s.batches = 1;
      s.max_logical_pages = t.max_logical_pages;
      s.num_physical_pages = t.num_physical_pages;
      s.page_size = t.page_size;
      s.table.assign(t.table.begin() + b * t.max_logical_pages,
                     t.table.begin() + (b + 1) * t.max_logical_pages);
      s.phys_to_logical = t.phys_to_logical;
      s.owner = t.owner;
      for (auto& o : s.owner) o = (o == b) ? 0 : (o == PageTable::kSentinel ? PageTable::kSentinel : 1);
      s.seq_len = {t.seq_len[static_cast<std::size_t>(b)]};
      return s;
    }();
    const auto conv = convert_block_mask(bm, one);
    const auto got = forward(qs[static_cast<std::size_t>(b)], cache.k_phys(), cache.v_phys(),
                             convert_mods(causal(), smod, one).score, conv, cfg);
    CHECK(tensors_equal(got.out, want.out));
    REQUIRE(got.lse.size() == want.lse.size());
    CHECK(std::memcmp(got.lse.data(), want.lse.data(), got.lse.size() * sizeof(float)) == 0);
  }
}

TEST_CASE("cache rejects malformed token tensors") {
  PagedKVCache<float> cache(1, 4, 4, 2, 3);
  const auto good_k = random_tensor<float>(41, 1, 2, 5, 3);
  const auto good_v = random_tensor<float>(42, 1, 2, 5, 3);
  CHECK_THROWS_AS(cache.assign(0, good_k, random_tensor<float>(43, 1, 2, 4, 3)), ShapeMismatch);
  CHECK_THROWS_AS(cache.assign(0, random_tensor<float>(44, 1, 1, 5, 3), good_v), ShapeMismatch);
  CHECK_THROWS_AS(cache.assign(0, random_tensor<float>(45, 1, 2, 5, 2), good_v), ShapeMismatch);
  CHECK_THROWS_AS(cache.assign(1, good_k, good_v), IndexOutOfRange);
  CHECK_THROWS_AS(cache.erase(-1), IndexOutOfRange);
  CHECK_NOTHROW(cache.assign(0, good_k, good_v));
}
