// SPDX-License-Identifier: Apache-2.0
#include <blockattn/oracle.hpp>

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <blockattn/validate.hpp>

namespace blockattn {

template <typename Real>
AttentionOutput<Real> dense_forward(const Tensor4<Real>& q, const Tensor4<Real>& k,
                                    const Tensor4<Real>& v, const ScoreMod& smod,
                                    const MaskMod& mask, const AttentionConfig& cfg) {
  validate_inputs(q, k, v, cfg);
  if (!smod) throw BlockMaskMismatch("dense_forward: score modifier has no callable");
  if (!mask) throw BlockMaskMismatch("dense_forward: mask has no callable");
  const i64 batch = q.batch(), heads = q.heads(), q_len = q.length(), dim = q.dim();
  const i64 kv_len = k.length();
  const Real scale_r = static_cast<Real>(cfg.effective_scale(dim));
  constexpr Real kNegInf = -std::numeric_limits<Real>::infinity();

  AttentionOutput<Real> res{
      Tensor4<Real>(batch, heads, q_len, dim),
      std::vector<Real>(static_cast<std::size_t>(batch * heads * q_len), kNegInf)};
  std::vector<Real> srow(static_cast<std::size_t>(kv_len));

  for (i64 b = 0; b < batch; ++b) {
    for (i64 h = 0; h < heads; ++h) {
      const i64 kb = k.batch() == 1 ? 0 : b;
      const i64 kh = h / cfg.gqa_group;
      for (i64 iq = 0; iq < q_len; ++iq) {
        const Real* qrow = q.row_ptr(b, h, iq);
        Real row_max = kNegInf;
        for (i64 j = 0; j < kv_len; ++j) {
          if (!mask(b, h, iq, j)) {
            srow[static_cast<std::size_t>(j)] = kNegInf;
            continue;
          }
          const Real* krow = k.row_ptr(kb, kh, j);
          Real dot = Real(0);
          for (i64 d = 0; d < dim; ++d) dot += qrow[d] * krow[d];
          const Real s_scaled = dot * scale_r;
          const Real s =
              static_cast<Real>(smod.apply(static_cast<double>(s_scaled), b, h, iq, j));
          srow[static_cast<std::size_t>(j)] = s;
          if (s > row_max) row_max = s;
        }

        Real* orow = res.out.row_ptr(b, h, iq);
        const std::size_t lse_slot = static_cast<std::size_t>((b * heads + h) * q_len + iq);
        if (row_max == kNegInf) {
          for (i64 d = 0; d < dim; ++d) orow[d] = Real(0);
          continue;  // lse stays -inf
        }
        Real denom = Real(0);
        for (i64 j = 0; j < kv_len; ++j) {
          const Real s = srow[static_cast<std::size_t>(j)];
          srow[static_cast<std::size_t>(j)] = s == kNegInf ? Real(0) : std::exp(s - row_max);
          denom += srow[static_cast<std::size_t>(j)];
        }
        for (i64 d = 0; d < dim; ++d) {
          Real acc = Real(0);
          for (i64 j = 0; j < kv_len; ++j) {
            acc += srow[static_cast<std::size_t>(j)] * v(kb, kh, j, d);
          }
          orow[d] = acc / denom;
        }
        res.lse[lse_slot] = row_max + std::log(denom);
      }
    }
  }
  return res;
}

namespace {

template <typename Real>
double loss_of(const Tensor4<Real>& q, const Tensor4<Real>& k, const Tensor4<Real>& v,
               const ScoreMod& smod, const MaskMod& mask, const AttentionConfig& cfg) {
  const auto res = dense_forward(q, k, v, smod, mask, cfg);
  double acc = 0.0;
  for (const Real x : res.out.data()) acc += static_cast<double>(x) * static_cast<double>(x);
  return acc * 0.5;
}

template <typename Real>
Tensor4<Real> fd_grad_of(Tensor4<Real> target, const Tensor4<Real>& q, const Tensor4<Real>& k,
                         const Tensor4<Real>& v, const ScoreMod& smod, const MaskMod& mask,
                         const AttentionConfig& cfg, double eps, int which) {
  Tensor4<Real> grad(target.batch(), target.heads(), target.length(), target.dim());
  for (std::size_t i = 0; i < target.data().size(); ++i) {
    const Real saved = target.data()[i];
    auto eval = [&](double delta) {
      target.data()[i] = static_cast<Real>(static_cast<double>(saved) + delta);
      const Tensor4<Real>& qq = which == 0 ? target : q;
      const Tensor4<Real>& kk = which == 1 ? target : k;
      const Tensor4<Real>& vv = which == 2 ? target : v;
      return loss_of(qq, kk, vv, smod, mask, cfg);
    };
    const double plus = eval(eps);
    const double minus = eval(-eps);
    target.data()[i] = saved;
    grad.data()[i] = static_cast<Real>((plus - minus) / (2.0 * eps));
  }
  return grad;
}

}  // namespace

template <typename Real>
Gradients<Real> dense_backward_fd(const Tensor4<Real>& q, const Tensor4<Real>& k,
                                  const Tensor4<Real>& v, const ScoreMod& smod,
                                  const MaskMod& mask, const AttentionConfig& cfg, double eps) {
  if (q.length() > 16 || k.length() > 16 || q.dim() > 8) {
    throw SizeTooLarge("dense_backward_fd: limited to <= 16 tokens and <= 8 features (got q " +
                       q.shape_str() + ", k " + k.shape_str() + ")");
  }
  Gradients<Real> g{fd_grad_of(q, q, k, v, smod, mask, cfg, eps, 0),
                    fd_grad_of(k, q, k, v, smod, mask, cfg, eps, 1),
                    fd_grad_of(v, q, k, v, smod, mask, cfg, eps, 2)};
  return g;
}

template <typename RealA, typename RealB>
double rmse(const Tensor4<RealA>& a, const Tensor4<RealB>& b) {
  if (a.batch() != b.batch() || a.heads() != b.heads() || a.length() != b.length() ||
      a.dim() != b.dim()) {
    throw ShapeMismatch("rmse: shapes " + a.shape_str() + " and " + b.shape_str() + " differ");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.data().size(); ++i) {
    const double d = static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i]);
    acc += d * d;
  }
  return std::sqrt(acc / static_cast<double>(a.data().size()));
}

template <typename RealA, typename RealB>
double max_abs_diff(const Tensor4<RealA>& a, const Tensor4<RealB>& b) {
  if (a.batch() != b.batch() || a.heads() != b.heads() || a.length() != b.length() ||
      a.dim() != b.dim()) {
    throw ShapeMismatch("max_abs_diff: shapes " + a.shape_str() + " and " + b.shape_str() +
                        " differ");
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.data().size(); ++i) {
    const double d = std::abs(static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i]));
    if (d > m) m = d;
  }
  return m;
}

GoldenResult golden_forward(const Tensor4<float>& q, const Tensor4<float>& k,
                            const Tensor4<float>& v, const ScoreMod& smod, const MaskMod& mask,
                            const AttentionConfig& cfg) {
  return dense_forward<double>(q.cast<double>(), k.cast<double>(), v.cast<double>(), smod, mask,
                               cfg);
}

template AttentionOutput<float> dense_forward(const Tensor4<float>&, const Tensor4<float>&,
                                              const Tensor4<float>&, const ScoreMod&,
                                              const MaskMod&, const AttentionConfig&);
template AttentionOutput<double> dense_forward(const Tensor4<double>&, const Tensor4<double>&,
                                               const Tensor4<double>&, const ScoreMod&,
                                               const MaskMod&, const AttentionConfig&);
template Gradients<float> dense_backward_fd(const Tensor4<float>&, const Tensor4<float>&,
                                            const Tensor4<float>&, const ScoreMod&,
                                            const MaskMod&, const AttentionConfig&, double);
template Gradients<double> dense_backward_fd(const Tensor4<double>&, const Tensor4<double>&,
                                             const Tensor4<double>&, const ScoreMod&,
                                             const MaskMod&, const AttentionConfig&, double);
template double rmse(const Tensor4<float>&, const Tensor4<float>&);
template double rmse(const Tensor4<float>&, const Tensor4<double>&);
template double rmse(const Tensor4<double>&, const Tensor4<float>&);
template double rmse(const Tensor4<double>&, const Tensor4<double>&);
template double max_abs_diff(const Tensor4<float>&, const Tensor4<float>&);
template double max_abs_diff(const Tensor4<float>&, const Tensor4<double>&);
template double max_abs_diff(const Tensor4<double>&, const Tensor4<float>&);
template double max_abs_diff(const Tensor4<double>&, const Tensor4<double>&);

}  // namespace blockattn
