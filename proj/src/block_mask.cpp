// SPDX-License-Identifier: Apache-2.0
#include <blockattn/block_mask.hpp>

#include <algorithm>
#include <fstream>

#include <blockattn/errors.hpp>
#include <blockattn/tensor.hpp>

namespace blockattn {

namespace {

MaskMod bound_mask(const MaskMod& user, i64 q_len, i64 kv_len) {
  auto f = user.eval;
  return MaskMod{[f, q_len, kv_len](i64 b, i64 h, i64 q, i64 kv) {
    return q < q_len && kv < kv_len && f(b, h, q, kv);
  }};
}

void check_bh(const BlockMask& bm, i64 b, i64 h) {
  if (b < 0 || b >= bm.b_dims || h < 0 || h >= bm.h_dims) {
    throw IndexOutOfRange("BlockMask: (b,h)=(" + std::to_string(b) + "," + std::to_string(h) +
                          ") outside mask dims (" + std::to_string(bm.b_dims) + "," +
                          std::to_string(bm.h_dims) + ")");
  }
}

BlockMask make_empty(i64 b_dims, i64 h_dims, i64 q_len, i64 kv_len, i64 bs_q, i64 bs_kv) {
  if (b_dims < 1 || h_dims < 1) {
    throw ShapeMismatch("create_block_mask: mask dims must be >= 1");
  }
  if (q_len < 1 || kv_len < 1 || bs_q < 1 || bs_kv < 1) {
    throw ShapeMismatch("create_block_mask: lengths and block sizes must be >= 1");
  }
  BlockMask bm;
  bm.b_dims = b_dims;
  bm.h_dims = h_dims;
  bm.bs_q = bs_q;
  bm.bs_kv = bs_kv;
  bm.q_len = q_len;
  bm.kv_len = kv_len;
  bm.rows = (q_len + bs_q - 1) / bs_q;
  bm.cols = (kv_len + bs_kv - 1) / bs_kv;
  const std::size_t nrows = static_cast<std::size_t>(b_dims * h_dims * bm.rows);
  const std::size_t ncells = nrows * static_cast<std::size_t>(bm.cols);
  bm.partial_num.assign(nrows, 0);
  bm.full_num.assign(nrows, 0);
  bm.visit_num.assign(nrows, 0);
  bm.partial_idx.assign(ncells, 0);
  bm.full_idx.assign(ncells, 0);
  bm.visit_idx.assign(ncells, 0);
  bm.visit_full_flag.assign(ncells, 0);
  return bm;
}

void push_block(BlockMask& bm, i64 b, i64 h, i64 r, i64 c, BlockKind kind) {
  if (kind == BlockKind::kEmpty) return;
  const std::size_t row = static_cast<std::size_t>(bm.row_slot(b, h, r));
  const std::size_t base = row * static_cast<std::size_t>(bm.cols);
  if (kind == BlockKind::kFull) {
    bm.full_idx[base + static_cast<std::size_t>(bm.full_num[row]++)] = c;
  } else {
    bm.partial_idx[base + static_cast<std::size_t>(bm.partial_num[row]++)] = c;
  }
  const std::size_t v = base + static_cast<std::size_t>(bm.visit_num[row]++);
  bm.visit_idx[v] = c;
  bm.visit_full_flag[v] = kind == BlockKind::kFull ? 1 : 0;
}

}  // namespace

BlockMask BlockMask::with_mask(const MaskMod& user_mask) const {
  BlockMask out = *this;
  out.runtime_mask = bound_mask(user_mask, q_len, kv_len);
  return out;
}

BlockMask create_block_mask(const MaskMod& mask, i64 b_dims, i64 h_dims, i64 q_len, i64 kv_len,
                            i64 bs_q, i64 bs_kv) {
  if (!mask) throw ShapeMismatch("create_block_mask: mask has no callable");
  BlockMask bm = make_empty(b_dims, h_dims, q_len, kv_len, bs_q, bs_kv);
  for (i64 b = 0; b < b_dims; ++b) {
    for (i64 h = 0; h < h_dims; ++h) {
      for (i64 r = 0; r < bm.rows; ++r) {
        const i64 q0 = r * bs_q;
        const i64 q1 = std::min(q0 + bs_q, q_len);
        for (i64 c = 0; c < bm.cols; ++c) {
          const i64 k0 = c * bs_kv;
          const i64 k1 = std::min(k0 + bs_kv, kv_len);
          // Overhanging blocks are never full: the full-block fast path
          // skips per-position masking, which is only sound when every
          // position of the bs_q x bs_kv tile is live and in range.
          const bool ragged = (q1 - q0 != bs_q) || (k1 - k0 != bs_kv);
          bool any = false, all = true;
          for (i64 q = q0; q < q1 && !(any && !all); ++q) {
            for (i64 kv = k0; kv < k1; ++kv) {
              if (mask(b, h, q, kv)) {
                any = true;
              } else {
                all = false;
                if (any) break;
              }
            }
          }
          const BlockKind kind = !any ? BlockKind::kEmpty
                                      : (all && !ragged) ? BlockKind::kFull : BlockKind::kPartial;
          push_block(bm, b, h, r, c, kind);
        }
      }
    }
  }
  bm.runtime_mask = bound_mask(mask, q_len, kv_len);
  return bm;
}

BlockGrid to_dense(const BlockMask& bm) {
  BlockGrid g;
  g.b_dims = bm.b_dims;
  g.h_dims = bm.h_dims;
  g.rows = bm.rows;
  g.cols = bm.cols;
  g.kind.assign(static_cast<std::size_t>(bm.b_dims * bm.h_dims * bm.rows * bm.cols),
                BlockKind::kEmpty);
  for (i64 b = 0; b < bm.b_dims; ++b) {
    for (i64 h = 0; h < bm.h_dims; ++h) {
      for (i64 r = 0; r < bm.rows; ++r) {
        for (i64 i = 0; i < bm.partial_count(b, h, r); ++i) {
          g.at(b, h, r, bm.partial_index(b, h, r, i)) = BlockKind::kPartial;
        }
        for (i64 i = 0; i < bm.full_count(b, h, r); ++i) {
          g.at(b, h, r, bm.full_index(b, h, r, i)) = BlockKind::kFull;
        }
      }
    }
  }
  return g;
}

BlockMask block_mask_from_grid(const BlockGrid& grid, i64 bs_q, i64 bs_kv, i64 q_len, i64 kv_len,
                               const MaskMod& user_mask) {
  BlockMask bm = make_empty(grid.b_dims, grid.h_dims, q_len, kv_len, bs_q, bs_kv);
  if (bm.rows != grid.rows || bm.cols != grid.cols) {
    throw BlockMaskMismatch("block_mask_from_grid: grid is " + std::to_string(grid.rows) + "x" +
                            std::to_string(grid.cols) + " blocks but lengths give " +
                            std::to_string(bm.rows) + "x" + std::to_string(bm.cols));
  }
  for (i64 b = 0; b < grid.b_dims; ++b) {
    for (i64 h = 0; h < grid.h_dims; ++h) {
      for (i64 r = 0; r < grid.rows; ++r) {
        for (i64 c = 0; c < grid.cols; ++c) {
          push_block(bm, b, h, r, c, grid.at(b, h, r, c));
        }
      }
    }
  }
  if (user_mask) bm.runtime_mask = bound_mask(user_mask, q_len, kv_len);
  return bm;
}

BlockMask transpose(const BlockMask& bm) {
  BlockMask out = make_empty(bm.b_dims, bm.h_dims, bm.kv_len, bm.q_len, bm.bs_kv, bm.bs_q);
  const BlockGrid g = to_dense(bm);
  for (i64 b = 0; b < bm.b_dims; ++b) {
    for (i64 h = 0; h < bm.h_dims; ++h) {
      for (i64 c = 0; c < bm.cols; ++c) {
        for (i64 r = 0; r < bm.rows; ++r) {
          push_block(out, b, h, c, r, g.at(b, h, r, c));
        }
      }
    }
  }
  if (bm.runtime_mask) {
    auto f = bm.runtime_mask.eval;
    out.runtime_mask = MaskMod{[f](i64 b, i64 h, i64 q, i64 kv) { return f(b, h, kv, q); }};
  }
  return out;
}

SparsityReport sparsity(const BlockMask& bm) {
  SparsityReport rep;
  rep.total_blocks = bm.b_dims * bm.h_dims * bm.rows * bm.cols;
  for (const i64 n : bm.partial_num) rep.partial_blocks += n;
  for (const i64 n : bm.full_num) rep.full_blocks += n;
  rep.empty_blocks = rep.total_blocks - rep.partial_blocks - rep.full_blocks;
  rep.density = rep.total_blocks == 0
                    ? 0.0
                    : static_cast<double>(rep.partial_blocks + rep.full_blocks) /
                          static_cast<double>(rep.total_blocks);
  return rep;
}

BlockMask demote_full_to_partial(const BlockMask& bm) {
  BlockMask out = bm;
  // Partial list becomes the visit list verbatim so traversal order is
  // untouched (this keeps the transform valid even after index conversion,
  // where stored indices are no longer ascending).
  out.partial_num = bm.visit_num;
  out.partial_idx = bm.visit_idx;
  std::fill(out.full_num.begin(), out.full_num.end(), i64(0));
  std::fill(out.full_idx.begin(), out.full_idx.end(), i64(0));
  std::fill(out.visit_full_flag.begin(), out.visit_full_flag.end(),
            static_cast<unsigned char>(0));
  return out;
}

BlockMask promote_empty_to_partial(const BlockMask& bm) {
  const BlockGrid g = to_dense(bm);
  BlockMask out = make_empty(bm.b_dims, bm.h_dims, bm.q_len, bm.kv_len, bm.bs_q, bm.bs_kv);
  for (i64 b = 0; b < bm.b_dims; ++b) {
    for (i64 h = 0; h < bm.h_dims; ++h) {
      for (i64 r = 0; r < bm.rows; ++r) {
        for (i64 c = 0; c < bm.cols; ++c) {
          const BlockKind k = g.at(b, h, r, c);
          push_block(out, b, h, r, c,
                     k == BlockKind::kFull ? BlockKind::kFull : BlockKind::kPartial);
        }
      }
    }
  }
  out.runtime_mask = bm.runtime_mask;
  return out;
}

void save_block_mask(const std::string& path, const BlockMask& bm) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("save_block_mask: cannot open " + path);
  for (const i64 v : {bm.b_dims, bm.h_dims, bm.rows, bm.cols, bm.bs_q, bm.bs_kv, bm.q_len,
                      bm.kv_len}) {
    detail::write_u64le(os, static_cast<std::uint64_t>(v));
  }
  for (const auto* arr : {&bm.partial_num, &bm.partial_idx, &bm.full_num, &bm.full_idx}) {
    for (const i64 v : *arr) detail::write_u64le(os, static_cast<std::uint64_t>(v));
  }
  if (!os) throw Error("save_block_mask: write failed for " + path);
}

BlockMask load_block_mask(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("load_block_mask: cannot open " + path);
  i64 hdr[8];
  for (auto& v : hdr) v = static_cast<i64>(detail::read_u64le(is));
  BlockMask bm = make_empty(hdr[0], hdr[1], hdr[6], hdr[7], hdr[4], hdr[5]);
  if (bm.rows != hdr[2] || bm.cols != hdr[3]) {
    throw Error("load_block_mask: header rows/cols inconsistent with lengths in " + path);
  }
  for (auto* arr : {&bm.partial_num, &bm.partial_idx, &bm.full_num, &bm.full_idx}) {
    for (auto& v : *arr) v = static_cast<i64>(detail::read_u64le(is));
  }
  // Visit order is not stored; rebuild it as the ascending merge of the two
  // lists, which is exactly how construction ordered them.
  for (i64 b = 0; b < bm.b_dims; ++b) {
    for (i64 h = 0; h < bm.h_dims; ++h) {
      for (i64 r = 0; r < bm.rows; ++r) {
        const std::size_t row = static_cast<std::size_t>(bm.row_slot(b, h, r));
        const std::size_t base = row * static_cast<std::size_t>(bm.cols);
        i64 p = 0, f = 0, v = 0;
        const i64 np = bm.partial_num[row], nf = bm.full_num[row];
        while (p < np || f < nf) {
          const bool take_full =
              p >= np || (f < nf && bm.full_idx[base + static_cast<std::size_t>(f)] <
                                        bm.partial_idx[base + static_cast<std::size_t>(p)]);
          const std::size_t slot = base + static_cast<std::size_t>(v++);
          if (take_full) {
            bm.visit_idx[slot] = bm.full_idx[base + static_cast<std::size_t>(f++)];
            bm.visit_full_flag[slot] = 1;
          } else {
            bm.visit_idx[slot] = bm.partial_idx[base + static_cast<std::size_t>(p++)];
            bm.visit_full_flag[slot] = 0;
          }
        }
        bm.visit_num[row] = v;
      }
    }
  }
  return bm;
}

std::string render_ascii(const BlockMask& bm, i64 b, i64 h) {
  check_bh(bm, b, h);
  const BlockGrid g = to_dense(bm);
  std::string out;
  for (i64 r = 0; r < bm.rows; ++r) {
    for (i64 c = 0; c < bm.cols; ++c) {
      switch (g.at(b, h, r, c)) {
        case BlockKind::kEmpty: out += "\xe2\x96\xa1"; break;    // white square
        case BlockKind::kPartial: out += "\xe2\x96\x92"; break;  // medium shade
        case BlockKind::kFull: out += "\xe2\x96\x88"; break;     // full block
      }
    }
    out += '\n';
  }
  return out;
}

std::string render_ppm(const BlockMask& bm, i64 b, i64 h) {
  check_bh(bm, b, h);
  const BlockGrid g = to_dense(bm);
  std::string out = "P6\n" + std::to_string(bm.cols) + " " + std::to_string(bm.rows) + "\n255\n";
  for (i64 r = 0; r < bm.rows; ++r) {
    for (i64 c = 0; c < bm.cols; ++c) {
      unsigned char v = 255;
      switch (g.at(b, h, r, c)) {
        case BlockKind::kEmpty: v = 255; break;
        case BlockKind::kPartial: v = 128; break;
        case BlockKind::kFull: v = 0; break;
      }
      out.push_back(static_cast<char>(v));
      out.push_back(static_cast<char>(v));
      out.push_back(static_cast<char>(v));
    }
  }
  return out;
}

void write_ppm(const std::string& path, const BlockMask& bm, i64 b, i64 h) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("write_ppm: cannot open " + path);
  const std::string data = render_ppm(bm, b, h);
  os.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!os) throw Error("write_ppm: write failed for " + path);
}

}  // namespace blockattn
