// SPDX-License-Identifier: Apache-2.0
#include <blockattn/paged_kv.hpp>

#include <algorithm>
#include <memory>
#include <string>

#include <blockattn/errors.hpp>
#include <blockattn/random.hpp>

namespace blockattn {

template <typename Real>
PagedKVCache<Real>::PagedKVCache(i64 batches, i64 num_pages, i64 page_size, i64 kv_heads, i64 dim)
    : k_(1, kv_heads, num_pages * page_size, dim), v_(1, kv_heads, num_pages * page_size, dim) {
  if (batches < 1 || num_pages < 1 || page_size < 1) {
    throw ShapeMismatch("PagedKVCache: batches, num_pages and page_size must be >= 1");
  }
  table_.batches = batches;
  table_.max_logical_pages = num_pages;
  table_.num_physical_pages = num_pages;
  table_.page_size = page_size;
  table_.table.assign(static_cast<std::size_t>(batches * num_pages), PageTable::kSentinel);
  table_.phys_to_logical.assign(static_cast<std::size_t>(num_pages), PageTable::kSentinel);
  table_.owner.assign(static_cast<std::size_t>(num_pages), PageTable::kSentinel);
  table_.seq_len.assign(static_cast<std::size_t>(batches), 0);
  free_.resize(static_cast<std::size_t>(num_pages));
  // LIFO: page 0 is allocated first.
  for (i64 p = 0; p < num_pages; ++p) {
    free_[static_cast<std::size_t>(num_pages - 1 - p)] = static_cast<std::int32_t>(p);
  }
}

template <typename Real>
void PagedKVCache<Real>::check_batch(i64 b) const {
  if (b < 0 || b >= table_.batches) {
    throw IndexOutOfRange("PagedKVCache: batch " + std::to_string(b) + " outside [0, " +
                          std::to_string(table_.batches) + ")");
  }
}

template <typename Real>
void PagedKVCache<Real>::check_tokens(const Tensor4<Real>& k_t, const Tensor4<Real>& v_t) const {
  if (!k_t.same_shape(v_t)) {
    throw ShapeMismatch("PagedKVCache: k tokens " + k_t.shape_str() + " and v tokens " +
                        v_t.shape_str() + " must agree");
  }
  if (k_t.batch() != 1 || k_t.heads() != k_.heads() || k_t.dim() != k_.dim()) {
    throw ShapeMismatch("PagedKVCache: token tensors must be (1," + std::to_string(k_.heads()) +
                        ",n," + std::to_string(k_.dim()) + "), got " + k_t.shape_str());
  }
}

template <typename Real>
void PagedKVCache<Real>::write_tokens(i64 b, i64 start, const Tensor4<Real>& k_t,
                                      const Tensor4<Real>& v_t) {
  const i64 n = k_t.length();
  const i64 ps = table_.page_size;
  for (i64 t = 0; t < n; ++t) {
    const i64 logical = start + t;
    const std::int32_t page = table_.lookup(b, logical / ps);
    const i64 phys = static_cast<i64>(page) * ps + logical % ps;
    for (i64 h = 0; h < k_.heads(); ++h) {
      const Real* ks = k_t.row_ptr(0, h, t);
      const Real* vs = v_t.row_ptr(0, h, t);
      std::copy(ks, ks + k_.dim(), k_.row_ptr(0, h, phys));
      std::copy(vs, vs + k_.dim(), v_.row_ptr(0, h, phys));
    }
  }
}

template <typename Real>
void PagedKVCache<Real>::assign(i64 b, const Tensor4<Real>& k_tokens,
                                const Tensor4<Real>& v_tokens) {
  check_batch(b);
  check_tokens(k_tokens, v_tokens);
  const i64 n = k_tokens.length();
  const i64 ps = table_.page_size;
  const i64 needed = (n + ps - 1) / ps;
  const i64 owned = (table_.seq_len[static_cast<std::size_t>(b)] + ps - 1) / ps;
  // Capacity check before any mutation so failure leaves the cache intact.
  if (needed > static_cast<i64>(free_.size()) + owned) {
    throw OutOfPages("PagedKVCache: assign of " + std::to_string(n) + " tokens needs " +
                     std::to_string(needed) + " pages, only " +
                     std::to_string(free_.size() + static_cast<std::size_t>(owned)) +
                     " available");
  }
  erase(b);
  for (i64 lp = 0; lp < needed; ++lp) {
    const std::int32_t page = free_.back();
    free_.pop_back();
    table_.table[static_cast<std::size_t>(b * table_.max_logical_pages + lp)] = page;
    table_.phys_to_logical[static_cast<std::size_t>(page)] = static_cast<std::int32_t>(lp);
    table_.owner[static_cast<std::size_t>(page)] = static_cast<std::int32_t>(b);
  }
  table_.seq_len[static_cast<std::size_t>(b)] = n;
  write_tokens(b, 0, k_tokens, v_tokens);
}

template <typename Real>
void PagedKVCache<Real>::append_tokens(i64 b, const Tensor4<Real>& k_new,
                                       const Tensor4<Real>& v_new) {
  check_batch(b);
  check_tokens(k_new, v_new);
  const i64 n = k_new.length();
  const i64 ps = table_.page_size;
  const i64 old_len = table_.seq_len[static_cast<std::size_t>(b)];
  const i64 owned = (old_len + ps - 1) / ps;
  const i64 total = (old_len + n + ps - 1) / ps;
  const i64 extra = total - owned;
  if (extra > static_cast<i64>(free_.size())) {
    throw OutOfPages("PagedKVCache: append of " + std::to_string(n) + " tokens needs " +
                     std::to_string(extra) + " new pages, only " + std::to_string(free_.size()) +
                     " free");
  }
  for (i64 lp = owned; lp < total; ++lp) {
    const std::int32_t page = free_.back();
    free_.pop_back();
    table_.table[static_cast<std::size_t>(b * table_.max_logical_pages + lp)] = page;
    table_.phys_to_logical[static_cast<std::size_t>(page)] = static_cast<std::int32_t>(lp);
    table_.owner[static_cast<std::size_t>(page)] = static_cast<std::int32_t>(b);
  }
  table_.seq_len[static_cast<std::size_t>(b)] = old_len + n;
  write_tokens(b, old_len, k_new, v_new);
}

template <typename Real>
void PagedKVCache<Real>::erase(i64 b) {
  check_batch(b);
  const i64 ps = table_.page_size;
  const i64 owned = (table_.seq_len[static_cast<std::size_t>(b)] + ps - 1) / ps;
  for (i64 lp = 0; lp < owned; ++lp) {
    const std::size_t slot = static_cast<std::size_t>(b * table_.max_logical_pages + lp);
    const std::int32_t page = table_.table[slot];
    table_.table[slot] = PageTable::kSentinel;
    table_.phys_to_logical[static_cast<std::size_t>(page)] = PageTable::kSentinel;
    table_.owner[static_cast<std::size_t>(page)] = PageTable::kSentinel;
    free_.push_back(page);
  }
  table_.seq_len[static_cast<std::size_t>(b)] = 0;
}

template <typename Real>
void PagedKVCache<Real>::shuffle_free_pages(std::uint64_t seed) {
  deterministic_shuffle(free_, seed);
}

template <typename Real>
i64 PagedKVCache<Real>::seq_len(i64 b) const {
  check_batch(b);
  return table_.seq_len[static_cast<std::size_t>(b)];
}

BlockMask convert_block_mask(const BlockMask& bm, const PageTable& pt) {
  if (bm.bs_kv != pt.page_size) {
    throw BlockMaskMismatch("convert_block_mask: kv block size " + std::to_string(bm.bs_kv) +
                            " must equal page size " + std::to_string(pt.page_size));
  }
  if (bm.b_dims != 1 && bm.b_dims != pt.batches) {
    throw BlockMaskMismatch("convert_block_mask: mask batch dim " + std::to_string(bm.b_dims) +
                            " must be 1 or " + std::to_string(pt.batches));
  }

  BlockMask out;
  out.b_dims = pt.batches;  // page layouts differ per batch; always materialize
  out.h_dims = bm.h_dims;
  out.rows = bm.rows;
  out.cols = pt.num_physical_pages;
  out.bs_q = bm.bs_q;
  out.bs_kv = bm.bs_kv;
  out.q_len = bm.q_len;
  out.kv_len = pt.num_physical_pages * pt.page_size;
  const std::size_t nrows = static_cast<std::size_t>(out.b_dims * out.h_dims * out.rows);
  const std::size_t ncells = nrows * static_cast<std::size_t>(out.cols);
  out.partial_num.assign(nrows, 0);
  out.full_num.assign(nrows, 0);
  out.visit_num.assign(nrows, 0);
  out.partial_idx.assign(ncells, 0);
  out.full_idx.assign(ncells, 0);
  out.visit_idx.assign(ncells, 0);
  out.visit_full_flag.assign(ncells, 0);

  auto map_block = [&pt](i64 b, i64 c) -> i64 {
    const std::int32_t page = pt.lookup(b, c);
    if (page == PageTable::kSentinel) {
      throw UnmappedBlock("convert_block_mask: logical block " + std::to_string(c) +
                          " of batch " + std::to_string(b) + " has no physical page");
    }
    return static_cast<i64>(page);
  };

  for (i64 b = 0; b < out.b_dims; ++b) {
    const i64 sb = bm.b_dims == 1 ? 0 : b;
    for (i64 h = 0; h < out.h_dims; ++h) {
      for (i64 r = 0; r < out.rows; ++r) {
        const std::size_t src_row = static_cast<std::size_t>(bm.row_slot(sb, h, r));
        const std::size_t src_base = src_row * static_cast<std::size_t>(bm.cols);
        const std::size_t dst_row = static_cast<std::size_t>(out.row_slot(b, h, r));
        const std::size_t dst_base = dst_row * static_cast<std::size_t>(out.cols);
        const i64 np = bm.partial_num[src_row];
        const i64 nf = bm.full_num[src_row];
        const i64 nv = bm.visit_num[src_row];
        out.partial_num[dst_row] = np;
        out.full_num[dst_row] = nf;
        out.visit_num[dst_row] = nv;
        for (i64 i = 0; i < np; ++i) {
          out.partial_idx[dst_base + static_cast<std::size_t>(i)] =
              map_block(b, bm.partial_idx[src_base + static_cast<std::size_t>(i)]);
        }
        for (i64 i = 0; i < nf; ++i) {
          out.full_idx[dst_base + static_cast<std::size_t>(i)] =
              map_block(b, bm.full_idx[src_base + static_cast<std::size_t>(i)]);
        }
        for (i64 i = 0; i < nv; ++i) {
          out.visit_idx[dst_base + static_cast<std::size_t>(i)] =
              map_block(b, bm.visit_idx[src_base + static_cast<std::size_t>(i)]);
          out.visit_full_flag[dst_base + static_cast<std::size_t>(i)] =
              bm.visit_full_flag[src_base + static_cast<std::size_t>(i)];
        }
      }
    }
  }

  if (bm.runtime_mask) {
    out.runtime_mask = convert_mods(bm.runtime_mask, ScoreMod{}, pt).mask;
  }
  return out;
}

ConvertedMods convert_mods(const MaskMod& mask, const ScoreMod& smod, const PageTable& pt) {
  // The callables run once per score evaluation in the kernel's hot loop,
  // so the page arithmetic and owner checks are baked into one flat
  // (batch, physical index) -> logical index table up front. The bake also
  // IS the snapshot: later cache mutations cannot reach into it.
  constexpr i64 kSlack = -1;    // past the owner's seq_len: mask false, score identity
  constexpr i64 kForeign = -2;  // unmapped or another batch element's page: hard error
  const i64 ps = pt.page_size;
  const i64 limit = pt.num_physical_pages * ps;
  const i64 batches = pt.batches;
  auto baked = std::make_shared<std::vector<i64>>(
      static_cast<std::size_t>(batches * limit), kForeign);
  for (i64 page = 0; page < pt.num_physical_pages; ++page) {
    const std::int32_t lp = pt.phys_to_logical[static_cast<std::size_t>(page)];
    const std::int32_t own = pt.owner[static_cast<std::size_t>(page)];
    // an owner outside [0, batches) marks the page as not addressable here
    if (lp == PageTable::kSentinel || own < 0 || own >= batches) continue;
    const i64 seq = pt.seq_len[static_cast<std::size_t>(own)];
    for (i64 o = 0; o < ps; ++o) {
      const i64 logical = static_cast<i64>(lp) * ps + o;
      (*baked)[static_cast<std::size_t>(own * limit + page * ps + o)] =
          logical < seq ? logical : kSlack;
    }
  }
  const i64* tbl = baked->data();

  // physical kv index -> logical token index for batch b, or kSlack for the
  // tail of the owner's last page. Throws if the page is not b's.
  auto to_logical = [baked, tbl, limit, batches](i64 b, i64 phys) -> i64 {
    if (phys < 0 || phys >= limit) {
      throw UnmappedPhysicalIndex("converted modifier: physical index " + std::to_string(phys) +
                                  " outside cache of " + std::to_string(limit) + " tokens");
    }
    if (b < 0 || b >= batches) {
      throw UnmappedPhysicalIndex("converted modifier: batch " + std::to_string(b) +
                                  " outside page table of " + std::to_string(batches));
    }
    const i64 logical = tbl[b * limit + phys];
    if (logical == kForeign) {
      throw UnmappedPhysicalIndex("converted modifier: physical index " + std::to_string(phys) +
                                  " is not mapped for batch " + std::to_string(b));
    }
    return logical;
  };

  ConvertedMods out;
  if (mask) {
    auto f = mask.eval;
    out.mask = MaskMod{[f, to_logical](i64 b, i64 h, i64 q, i64 kv) {
      const i64 logical = to_logical(b, kv);
      return logical >= 0 && f(b, h, q, logical);
    }};
  }
  if (smod) {
    if (smod.identity) {
      // inner mod promised identity, so skip the dispatch; coordinates are
      // still validated (foreign pages must throw), which is why the result
      // is deliberately not marked identity itself
      out.score = ScoreMod{[to_logical](double s, i64 b, i64, i64, i64 kv) {
                             to_logical(b, kv);
                             return s;
                           },
                           [to_logical](double, i64 b, i64, i64, i64 kv) {
                             to_logical(b, kv);
                             return 1.0;
                           }};
    } else {
      auto fa = smod.apply;
      auto fd = smod.dapply;
      out.score = ScoreMod{[fa, to_logical](double s, i64 b, i64 h, i64 q, i64 kv) {
                             const i64 logical = to_logical(b, kv);
                             return logical >= 0 ? fa(s, b, h, q, logical) : s;
                           },
                           [fd, to_logical](double s, i64 b, i64 h, i64 q, i64 kv) {
                             const i64 logical = to_logical(b, kv);
                             return logical >= 0 ? fd(s, b, h, q, logical) : 1.0;
                           }};
    }
  }
  return out;
}

template class PagedKVCache<float>;
template class PagedKVCache<double>;

}  // namespace blockattn
