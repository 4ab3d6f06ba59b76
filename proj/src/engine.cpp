// SPDX-License-Identifier: Apache-2.0
#include <blockattn/engine.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include <blockattn/mask_library.hpp>
#include <blockattn/parallel.hpp>
#include <blockattn/validate.hpp>

namespace blockattn {
namespace {

template <typename Real>
constexpr Real neg_inf() {
  return -std::numeric_limits<Real>::infinity();
}

void check_block_mask(const BlockMask& bm, i64 batch, i64 heads, i64 q_len, i64 kv_len,
                      const AttentionConfig& cfg) {
  if (bm.q_len != q_len || bm.kv_len != kv_len) {
    throw BlockMaskMismatch("block mask covers " + std::to_string(bm.q_len) + "x" +
                            std::to_string(bm.kv_len) + " but tensors are " +
                            std::to_string(q_len) + "x" + std::to_string(kv_len));
  }
  if (bm.bs_q != cfg.block_size_q || bm.bs_kv != cfg.block_size_kv) {
    throw BlockMaskMismatch("block mask block sizes (" + std::to_string(bm.bs_q) + "," +
                            std::to_string(bm.bs_kv) + ") disagree with config (" +
                            std::to_string(cfg.block_size_q) + "," +
                            std::to_string(cfg.block_size_kv) + ")");
  }
  if (bm.b_dims != 1 && bm.b_dims != batch) {
    throw BlockMaskMismatch("block mask batch dim " + std::to_string(bm.b_dims) +
                            " must be 1 or " + std::to_string(batch));
  }
  if (bm.h_dims != 1 && bm.h_dims != heads) {
    throw BlockMaskMismatch("block mask head dim " + std::to_string(bm.h_dims) +
                            " must be 1 or " + std::to_string(heads));
  }
}

// Shared core of forward and decode. `mask` is what partial blocks evaluate;
// forward passes bm.runtime_mask, decode passes its shifted mask instead.
template <typename Real>
AttentionOutput<Real> forward_impl(const Tensor4<Real>& q, const Tensor4<Real>& k,
                                   const Tensor4<Real>& v, const ScoreMod& smod,
                                   const BlockMask& bm, const MaskMod& mask,
                                   const AttentionConfig& cfg, OpCounters* counters) {
  validate_inputs(q, k, v, cfg);
  if (!smod) throw BlockMaskMismatch("forward: score modifier has no callable");
  if (!mask) throw BlockMaskMismatch("forward: block mask has no runtime mask attached");
  const i64 batch = q.batch(), heads = q.heads(), q_len = q.length(), dim = q.dim();
  const i64 kv_len = k.length();
  check_block_mask(bm, batch, heads, q_len, kv_len, cfg);

  const double scale = cfg.effective_scale(dim);
  const Real scale_r = static_cast<Real>(scale);
  const i64 bs_q = bm.bs_q, bs_kv = bm.bs_kv;

  AttentionOutput<Real> res{Tensor4<Real>(batch, heads, q_len, dim),
                            std::vector<Real>(static_cast<std::size_t>(batch * heads * q_len),
                                              neg_inf<Real>())};

  const int nworkers = worker_count();
  std::vector<OpCounters> worker_ctr(static_cast<std::size_t>(nworkers));
  const i64 tasks = batch * heads * bm.rows;

  parallel_for(tasks, [&](i64 begin, i64 end, int worker) {
    OpCounters& ctr = worker_ctr[static_cast<std::size_t>(worker)];
    std::vector<Real> sbuf(static_cast<std::size_t>(bs_kv));
    std::vector<Real> acc(static_cast<std::size_t>(dim));
    for (i64 task = begin; task < end; ++task) {
      const i64 r = task % bm.rows;
      const i64 h = (task / bm.rows) % heads;
      const i64 b = task / (bm.rows * heads);
      const i64 mb = bm.b_dims == 1 ? 0 : b;
      const i64 mh = bm.h_dims == 1 ? 0 : h;
      const i64 kb = k.batch() == 1 ? 0 : b;
      const i64 kh = h / cfg.gqa_group;
      const i64 nvisit = bm.visit_count(mb, mh, r);
      const i64 q_end = std::min((r + 1) * bs_q, q_len);

      for (i64 iq = r * bs_q; iq < q_end; ++iq) {
        const Real* qrow = q.row_ptr(b, h, iq);
        Real run_max = neg_inf<Real>();
        Real run_sum = Real(0);
        std::fill(acc.begin(), acc.end(), Real(0));

        for (i64 vi = 0; vi < nvisit; ++vi) {
          const i64 c = bm.visit_index(mb, mh, r, vi);
          const bool full = bm.visit_is_full(mb, mh, r, vi);
          const i64 j0 = c * bs_kv;
          const i64 j1 = std::min(j0 + bs_kv, kv_len);

          Real block_max = neg_inf<Real>();
          for (i64 j = j0; j < j1; ++j) {
            // Mask first: masked positions skip the dot product and the
            // score modifier entirely. Inside full blocks the mask is known
            // true and is not consulted -- that is the full-block fast path.
            if (!full) {
              ++ctr.mask_evals;
              if (!mask(b, h, iq, j)) {
                sbuf[static_cast<std::size_t>(j - j0)] = neg_inf<Real>();
                continue;
              }
            }
            const Real* krow = k.row_ptr(kb, kh, j);
            Real dot = Real(0);
            for (i64 d = 0; d < dim; ++d) dot += qrow[d] * krow[d];
            ctr.madds += static_cast<std::uint64_t>(dim);
            const Real s_scaled = dot * scale_r;
            const Real s = static_cast<Real>(
                smod.apply(static_cast<double>(s_scaled), b, h, iq, j));
            ++ctr.score_evals;
            sbuf[static_cast<std::size_t>(j - j0)] = s;
            if (s > block_max) block_max = s;
          }

          // A block whose every score is -inf leaves the row state alone;
          // skipping it outright is an exact identity, which is what lets a
          // mask over-visit blocks without perturbing results.
          const Real new_max = run_max > block_max ? run_max : block_max;
          if (new_max == neg_inf<Real>()) continue;
          if (new_max > run_max) {
            if (run_max != neg_inf<Real>()) {
              const Real alpha = std::exp(run_max - new_max);
              run_sum *= alpha;
              for (i64 d = 0; d < dim; ++d) acc[static_cast<std::size_t>(d)] *= alpha;
              ctr.madds += static_cast<std::uint64_t>(dim);
            }
            run_max = new_max;
          }
          for (i64 j = j0; j < j1; ++j) {
            const Real s = sbuf[static_cast<std::size_t>(j - j0)];
            if (s == neg_inf<Real>()) continue;  // exact zero weight
            const Real p = std::exp(s - run_max);
            run_sum += p;
            const Real* vrow = v.row_ptr(kb, kh, j);
            for (i64 d = 0; d < dim; ++d) acc[static_cast<std::size_t>(d)] += p * vrow[d];
            ctr.madds += static_cast<std::uint64_t>(dim);
          }
        }

        Real* orow = res.out.row_ptr(b, h, iq);
        const std::size_t lse_slot = static_cast<std::size_t>((b * heads + h) * q_len + iq);
        if (run_sum > Real(0)) {
          for (i64 d = 0; d < dim; ++d) orow[d] = acc[static_cast<std::size_t>(d)] / run_sum;
          res.lse[lse_slot] = run_max + std::log(run_sum);
        } else {
          for (i64 d = 0; d < dim; ++d) orow[d] = Real(0);
          res.lse[lse_slot] = neg_inf<Real>();
        }
      }
    }
  });

  if (counters != nullptr) {
    for (const auto& c : worker_ctr) *counters += c;
  }
  return res;
}

}  // namespace

template <typename Real>
AttentionOutput<Real> forward(const Tensor4<Real>& q, const Tensor4<Real>& k,
                              const Tensor4<Real>& v, const ScoreMod& smod, const BlockMask& bm,
                              const AttentionConfig& cfg, OpCounters* counters) {
  return forward_impl(q, k, v, smod, bm, bm.runtime_mask, cfg, counters);
}

template <typename Real>
Gradients<Real> backward(const Tensor4<Real>& q, const Tensor4<Real>& k, const Tensor4<Real>& v,
                         const AttentionOutput<Real>& fwd, const Tensor4<Real>& d_out,
                         const ScoreMod& smod, const BlockMask& bm, const BlockMask& bm_t,
                         const AttentionConfig& cfg, OpCounters* counters) {
  validate_inputs(q, k, v, cfg);
  if (!smod || !smod.dapply) {
    throw BlockMaskMismatch("backward: score modifier must provide apply and dapply");
  }
  const i64 batch = q.batch(), heads = q.heads(), q_len = q.length(), dim = q.dim();
  const i64 kv_len = k.length();
  check_block_mask(bm, batch, heads, q_len, kv_len, cfg);
  if (!bm.has_runtime_mask()) {
    throw BlockMaskMismatch("backward: block mask has no runtime mask attached");
  }
  if (bm_t.rows != bm.cols || bm_t.cols != bm.rows || bm_t.q_len != bm.kv_len ||
      bm_t.kv_len != bm.q_len || bm_t.bs_q != bm.bs_kv || bm_t.bs_kv != bm.bs_q ||
      bm_t.b_dims != bm.b_dims || bm_t.h_dims != bm.h_dims) {
    throw BlockMaskMismatch("backward: bm_t is not the transpose of bm");
  }
  if (!d_out.same_shape(q)) {
    throw ShapeMismatch("backward: d_out " + d_out.shape_str() + " must match q " + q.shape_str());
  }
  if (!d_out.all_finite()) throw NonFiniteInput("backward: d_out contains NaN or inf");
  if (!fwd.out.same_shape(q) ||
      fwd.lse.size() != static_cast<std::size_t>(batch * heads * q_len)) {
    throw StaleStatistics("backward: saved forward statistics do not match these tensors");
  }

  const double scale = cfg.effective_scale(dim);
  const Real scale_r = static_cast<Real>(scale);
  const i64 bs_q = bm.bs_q, bs_kv = bm.bs_kv;
  const MaskMod& mask = bm.runtime_mask;
  const i64 group = cfg.gqa_group;
  const i64 kv_heads = k.heads();
  const i64 kv_batch = k.batch();

  Gradients<Real> grads{Tensor4<Real>(batch, heads, q_len, dim),
                        Tensor4<Real>(kv_batch, kv_heads, kv_len, dim),
                        Tensor4<Real>(kv_batch, kv_heads, kv_len, dim)};

  const int nworkers = worker_count();
  std::vector<OpCounters> worker_ctr(static_cast<std::size_t>(nworkers));

  // Row dot products d_out . out, needed by every ds term. One cheap pass.
  std::vector<double> row_dot(static_cast<std::size_t>(batch * heads * q_len), 0.0);
  parallel_for(batch * heads * q_len, [&](i64 begin, i64 end, int worker) {
    OpCounters& ctr = worker_ctr[static_cast<std::size_t>(worker)];
    for (i64 idx = begin; idx < end; ++idx) {
      const i64 iq = idx % q_len;
      const i64 h = (idx / q_len) % heads;
      const i64 b = idx / (q_len * heads);
      const Real* dorow = d_out.row_ptr(b, h, iq);
      const Real* orow = fwd.out.row_ptr(b, h, iq);
      double acc = 0.0;
      for (i64 d = 0; d < dim; ++d) {
        acc += static_cast<double>(dorow[d]) * static_cast<double>(orow[d]);
      }
      ctr.madds += static_cast<std::uint64_t>(dim);
      row_dot[static_cast<std::size_t>(idx)] = acc;
    }
  });

  // Pass 1: dq. Partitioned like the forward -- each worker owns whole query
  // rows, so writes are disjoint.
  parallel_for(batch * heads * bm.rows, [&](i64 begin, i64 end, int worker) {
    OpCounters& ctr = worker_ctr[static_cast<std::size_t>(worker)];
    std::vector<double> dq_acc(static_cast<std::size_t>(dim));
    for (i64 task = begin; task < end; ++task) {
      const i64 r = task % bm.rows;
      const i64 h = (task / bm.rows) % heads;
      const i64 b = task / (bm.rows * heads);
      const i64 mb = bm.b_dims == 1 ? 0 : b;
      const i64 mh = bm.h_dims == 1 ? 0 : h;
      const i64 kb = kv_batch == 1 ? 0 : b;
      const i64 kh = h / group;
      const i64 nvisit = bm.visit_count(mb, mh, r);
      const i64 q_end = std::min((r + 1) * bs_q, q_len);

      for (i64 iq = r * bs_q; iq < q_end; ++iq) {
        Real* dqrow = grads.dq.row_ptr(b, h, iq);
        const std::size_t row_slot = static_cast<std::size_t>((b * heads + h) * q_len + iq);
        const double lse_i = static_cast<double>(fwd.lse[row_slot]);
        if (lse_i == -std::numeric_limits<double>::infinity()) {
          for (i64 d = 0; d < dim; ++d) dqrow[d] = Real(0);
          continue;
        }
        const Real* qrow = q.row_ptr(b, h, iq);
        const Real* dorow = d_out.row_ptr(b, h, iq);
        const double di = row_dot[row_slot];
        std::fill(dq_acc.begin(), dq_acc.end(), 0.0);

        for (i64 vi = 0; vi < nvisit; ++vi) {
          const i64 c = bm.visit_index(mb, mh, r, vi);
          const bool full = bm.visit_is_full(mb, mh, r, vi);
          const i64 j0 = c * bs_kv;
          const i64 j1 = std::min(j0 + bs_kv, kv_len);
          for (i64 j = j0; j < j1; ++j) {
            if (!full) {
              ++ctr.mask_evals;
              if (!mask(b, h, iq, j)) continue;
            }
            const Real* krow = k.row_ptr(kb, kh, j);
            Real dot = Real(0);
            for (i64 d = 0; d < dim; ++d) dot += qrow[d] * krow[d];
            ctr.madds += static_cast<std::uint64_t>(dim);
            const Real s_scaled = dot * scale_r;
            const double s_mod = smod.apply(static_cast<double>(s_scaled), b, h, iq, j);
            ++ctr.score_evals;
            if (s_mod == -std::numeric_limits<double>::infinity()) continue;
            const double p = std::exp(s_mod - lse_i);
            const Real* vrow = v.row_ptr(kb, kh, j);
            double dp = 0.0;
            for (i64 d = 0; d < dim; ++d) {
              dp += static_cast<double>(dorow[d]) * static_cast<double>(vrow[d]);
            }
            ctr.madds += static_cast<std::uint64_t>(dim);
            const double ds_mod = p * (dp - di);
            const double coeff =
                ds_mod * smod.dapply(static_cast<double>(s_scaled), b, h, iq, j) * scale;
            for (i64 d = 0; d < dim; ++d) {
              dq_acc[static_cast<std::size_t>(d)] += coeff * static_cast<double>(krow[d]);
            }
            ctr.madds += static_cast<std::uint64_t>(dim);
          }
        }
        for (i64 d = 0; d < dim; ++d) {
          dqrow[d] = static_cast<Real>(dq_acc[static_cast<std::size_t>(d)]);
        }
      }
    }
  });

  // Pass 2: dk/dv. Partitioned over kv block columns via the transposed mask
  // so each worker owns whole kv rows. When the kv tensors broadcast over
  // batch (shared cache), the batch loop moves inside the worker because all
  // batches accumulate into the same rows.
  const i64 outer_batch = kv_batch;  // 1 when broadcasting
  parallel_for(outer_batch * kv_heads * bm_t.rows, [&](i64 begin, i64 end, int worker) {
    OpCounters& ctr = worker_ctr[static_cast<std::size_t>(worker)];
    std::vector<double> dk_acc, dv_acc;
    for (i64 task = begin; task < end; ++task) {
      const i64 c = task % bm_t.rows;
      const i64 kh = (task / bm_t.rows) % kv_heads;
      const i64 ob = task / (bm_t.rows * kv_heads);
      const i64 j0 = c * bs_kv;
      const i64 j1 = std::min(j0 + bs_kv, kv_len);
      const i64 nj = j1 - j0;
      if (nj <= 0) continue;
      dk_acc.assign(static_cast<std::size_t>(nj * dim), 0.0);
      dv_acc.assign(static_cast<std::size_t>(nj * dim), 0.0);

      const i64 b_begin = kv_batch == 1 ? 0 : ob;
      const i64 b_end = kv_batch == 1 ? batch : ob + 1;
      for (i64 b = b_begin; b < b_end; ++b) {
        const i64 kb = kv_batch == 1 ? 0 : b;
        for (i64 gi = 0; gi < group; ++gi) {
          const i64 h = kh * group + gi;
          const i64 mb = bm.b_dims == 1 ? 0 : b;
          const i64 mh = bm.h_dims == 1 ? 0 : h;
          const i64 nvisit = bm_t.visit_count(mb, mh, c);
          for (i64 vi = 0; vi < nvisit; ++vi) {
            const i64 r = bm_t.visit_index(mb, mh, c, vi);
            const bool full = bm_t.visit_is_full(mb, mh, c, vi);
            const i64 i0 = r * bs_q;
            const i64 i1 = std::min(i0 + bs_q, q_len);
            for (i64 iq = i0; iq < i1; ++iq) {
              const std::size_t row_slot =
                  static_cast<std::size_t>((b * heads + h) * q_len + iq);
              const double lse_i = static_cast<double>(fwd.lse[row_slot]);
              if (lse_i == -std::numeric_limits<double>::infinity()) continue;
              const Real* qrow = q.row_ptr(b, h, iq);
              const Real* dorow = d_out.row_ptr(b, h, iq);
              const double di = row_dot[row_slot];
              for (i64 j = j0; j < j1; ++j) {
                if (!full) {
                  ++ctr.mask_evals;
                  if (!mask(b, h, iq, j)) continue;
                }
                const Real* krow = k.row_ptr(kb, kh, j);
                Real dot = Real(0);
                for (i64 d = 0; d < dim; ++d) dot += qrow[d] * krow[d];
                ctr.madds += static_cast<std::uint64_t>(dim);
                const Real s_scaled = dot * scale_r;
                const double s_mod = smod.apply(static_cast<double>(s_scaled), b, h, iq, j);
                ++ctr.score_evals;
                if (s_mod == -std::numeric_limits<double>::infinity()) continue;
                const double p = std::exp(s_mod - lse_i);
                double* dvj = dv_acc.data() + static_cast<std::size_t>((j - j0) * dim);
                const Real* vrow = v.row_ptr(kb, kh, j);
                double dp = 0.0;
                for (i64 d = 0; d < dim; ++d) {
                  dvj[d] += p * static_cast<double>(dorow[d]);
                  dp += static_cast<double>(dorow[d]) * static_cast<double>(vrow[d]);
                }
                ctr.madds += static_cast<std::uint64_t>(2 * dim);
                const double ds_mod = p * (dp - di);
                const double coeff =
                    ds_mod * smod.dapply(static_cast<double>(s_scaled), b, h, iq, j) * scale;
                double* dkj = dk_acc.data() + static_cast<std::size_t>((j - j0) * dim);
                for (i64 d = 0; d < dim; ++d) {
                  dkj[d] += coeff * static_cast<double>(qrow[d]);
                }
                ctr.madds += static_cast<std::uint64_t>(dim);
              }
            }
          }
        }
      }

      for (i64 j = j0; j < j1; ++j) {
        Real* dkrow = grads.dk.row_ptr(ob, kh, j);
        Real* dvrow = grads.dv.row_ptr(ob, kh, j);
        const double* dkj = dk_acc.data() + static_cast<std::size_t>((j - j0) * dim);
        const double* dvj = dv_acc.data() + static_cast<std::size_t>((j - j0) * dim);
        for (i64 d = 0; d < dim; ++d) {
          dkrow[d] = static_cast<Real>(dkj[d]);
          dvrow[d] = static_cast<Real>(dvj[d]);
        }
      }
    }
  });

  if (counters != nullptr) {
    for (const auto& c : worker_ctr) *counters += c;
  }
  return grads;
}

template <typename Real>
AttentionOutput<Real> decode(const Tensor4<Real>& q_step, const Tensor4<Real>& k_cache,
                             const Tensor4<Real>& v_cache, i64 offset, const MaskMod& mask,
                             const ScoreMod& smod, const BlockMask& bm,
                             const AttentionConfig& cfg, OpCounters* counters) {
  const i64 n_new = q_step.length();
  const i64 cache_len = k_cache.length();
  if (offset < 0 || offset + n_new > cache_len) {
    throw OffsetOutOfRange("decode: rows [" + std::to_string(offset) + ", " +
                           std::to_string(offset + n_new) + ") fall outside cache of length " +
                           std::to_string(cache_len));
  }
  if (!mask) throw BlockMaskMismatch("decode: mask has no callable");
  if (!smod) throw BlockMaskMismatch("decode: score modifier has no callable");
  // The caller's mask speaks absolute positions; the q tensor holds rows
  // [offset, offset + n_new). Shift, then bound to the step's geometry. The
  // block mask's own runtime mask is ignored so there is no way to
  // double-apply an offset.
  auto shifted = offset_mask(mask, offset).eval;
  const MaskMod runtime{[shifted, n_new, cache_len](i64 b, i64 h, i64 q, i64 kv) {
    return q < n_new && kv < cache_len && shifted(b, h, q, kv);
  }};
  return forward_impl(q_step, k_cache, v_cache, offset_score(smod, offset), bm, runtime, cfg,
                      counters);
}

template AttentionOutput<float> forward(const Tensor4<float>&, const Tensor4<float>&,
                                        const Tensor4<float>&, const ScoreMod&, const BlockMask&,
                                        const AttentionConfig&, OpCounters*);
template AttentionOutput<double> forward(const Tensor4<double>&, const Tensor4<double>&,
                                         const Tensor4<double>&, const ScoreMod&,
                                         const BlockMask&, const AttentionConfig&, OpCounters*);
template Gradients<float> backward(const Tensor4<float>&, const Tensor4<float>&,
                                   const Tensor4<float>&, const AttentionOutput<float>&,
                                   const Tensor4<float>&, const ScoreMod&, const BlockMask&,
                                   const BlockMask&, const AttentionConfig&, OpCounters*);
template Gradients<double> backward(const Tensor4<double>&, const Tensor4<double>&,
                                    const Tensor4<double>&, const AttentionOutput<double>&,
                                    const Tensor4<double>&, const ScoreMod&, const BlockMask&,
                                    const BlockMask&, const AttentionConfig&, OpCounters*);
template AttentionOutput<float> decode(const Tensor4<float>&, const Tensor4<float>&,
                                       const Tensor4<float>&, i64, const MaskMod&,
                                       const ScoreMod&, const BlockMask&, const AttentionConfig&,
                                       OpCounters*);
template AttentionOutput<double> decode(const Tensor4<double>&, const Tensor4<double>&,
                                        const Tensor4<double>&, i64, const MaskMod&,
                                        const ScoreMod&, const BlockMask&, const AttentionConfig&,
                                        OpCounters*);

}  // namespace blockattn
