// SPDX-License-Identifier: Apache-2.0
#include <blockattn/mask_library.hpp>

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>

#include <blockattn/errors.hpp>

namespace blockattn {

MaskMod causal() {
  return MaskMod{[](i64, i64, i64 q, i64 kv) { return q >= kv; }};
}

MaskMod sliding_window(i64 window) {
  if (window < 0) {
    throw IndexOutOfRange("sliding_window: window must be >= 0, got " + std::to_string(window));
  }
  return MaskMod{[window](i64, i64, i64 q, i64 kv) { return q >= kv && q - kv <= window; }};
}

MaskMod document_mask(std::vector<i64> doc_ids) {
  auto ids = std::make_shared<const std::vector<i64>>(std::move(doc_ids));
  return MaskMod{[ids](i64, i64, i64 q, i64 kv) {
    const i64 n = static_cast<i64>(ids->size());
    if (q < 0 || q >= n || kv < 0 || kv >= n) {
      throw IndexOutOfRange("document_mask: token index outside id table of size " +
                            std::to_string(n));
    }
    return (*ids)[static_cast<std::size_t>(q)] == (*ids)[static_cast<std::size_t>(kv)];
  }};
}

MaskMod prefix_lm(i64 prefix_len) {
  if (prefix_len < 0) {
    throw IndexOutOfRange("prefix_lm: prefix_len must be >= 0, got " + std::to_string(prefix_len));
  }
  return MaskMod{[prefix_len](i64, i64, i64 q, i64 kv) { return kv < prefix_len || q >= kv; }};
}

MaskMod noop_mask() {
  return MaskMod{[](i64, i64, i64, i64) { return true; }};
}

ScoreMod noop_score() {
  return ScoreMod{[](double s, i64, i64, i64, i64) { return s; },
                  [](double, i64, i64, i64, i64) { return 1.0; },
                  /*identity=*/true};
}

ScoreMod alibi(std::vector<double> slopes) {
  auto sl = std::make_shared<const std::vector<double>>(std::move(slopes));
  auto slope_at = [sl](i64 h) {
    if (h < 0 || h >= static_cast<i64>(sl->size())) {
      throw IndexOutOfRange("alibi: head " + std::to_string(h) + " outside slope table of size " +
                            std::to_string(sl->size()));
    }
    return (*sl)[static_cast<std::size_t>(h)];
  };
  return ScoreMod{[slope_at](double s, i64, i64 h, i64 q, i64 kv) {
                    return s + slope_at(h) * static_cast<double>(q - kv);
                  },
                  [slope_at](double, i64, i64 h, i64, i64) {
                    slope_at(h);  // same domain check as apply
                    return 1.0;
                  }};
}

std::vector<double> alibi_slopes(i64 heads) {
  if (heads < 1) {
    throw IndexOutOfRange("alibi_slopes: heads must be >= 1, got " + std::to_string(heads));
  }
  std::vector<double> slopes(static_cast<std::size_t>(heads));
  for (i64 h = 0; h < heads; ++h) {
    slopes[static_cast<std::size_t>(h)] =
        -std::exp2(-8.0 * static_cast<double>(h + 1) / static_cast<double>(heads));
  }
  return slopes;
}

ScoreMod soft_cap(double cap) {
  if (!(cap > 0.0) || !std::isfinite(cap)) {
    throw NonPositiveCap("soft_cap: cap must be finite and > 0, got " + std::to_string(cap));
  }
  return ScoreMod{[cap](double s, i64, i64, i64, i64) { return cap * std::tanh(s / cap); },
                  [cap](double s, i64, i64, i64, i64) {
                    const double t = std::tanh(s / cap);
                    return 1.0 - t * t;
                  }};
}

MaskMod and_mask(MaskMod a, MaskMod b) {
  auto fa = a.eval, fb = b.eval;
  return MaskMod{
      [fa, fb](i64 b_, i64 h, i64 q, i64 kv) { return fa(b_, h, q, kv) && fb(b_, h, q, kv); }};
}

MaskMod or_mask(MaskMod a, MaskMod b) {
  auto fa = a.eval, fb = b.eval;
  return MaskMod{
      [fa, fb](i64 b_, i64 h, i64 q, i64 kv) { return fa(b_, h, q, kv) || fb(b_, h, q, kv); }};
}

MaskMod offset_mask(MaskMod m, i64 offset) {
  auto f = m.eval;
  return MaskMod{[f, offset](i64 b, i64 h, i64 q, i64 kv) { return f(b, h, q + offset, kv); }};
}

ScoreMod offset_score(ScoreMod s, i64 offset) {
  auto fa = s.apply, fd = s.dapply;
  return ScoreMod{[fa, offset](double sc, i64 b, i64 h, i64 q, i64 kv) {
                    return fa(sc, b, h, q + offset, kv);
                  },
                  [fd, offset](double sc, i64 b, i64 h, i64 q, i64 kv) {
                    return fd(sc, b, h, q + offset, kv);
                  }};
}

NAGeometry::NAGeometry(i64 h, i64 w, i64 k) : canvas_h(h), canvas_w(w), kernel(k) {
  if (h < 1 || w < 1) {
    throw GeometryMismatch("NAGeometry: canvas dims must be >= 1, got " + std::to_string(h) + "x" +
                           std::to_string(w));
  }
  if (k < 1 || k % 2 == 0) {
    throw GeometryMismatch("NAGeometry: kernel must be odd and >= 1, got " + std::to_string(k));
  }
  if (k > std::min(h, w)) {
    throw GeometryMismatch("NAGeometry: kernel " + std::to_string(k) + " exceeds canvas " +
                           std::to_string(h) + "x" + std::to_string(w));
  }
}

MaskMod na_naive(NAGeometry g) {
  const i64 w = g.canvas_w;
  const i64 n = g.tokens();
  const i64 radius = g.kernel / 2;
  return MaskMod{[w, n, radius](i64, i64, i64 q, i64 kv) {
    if (q < 0 || q >= n || kv < 0 || kv >= n) {
      throw IndexOutOfRange("na_naive: token index outside canvas of " + std::to_string(n) +
                            " pixels");
    }
    const i64 dr = q / w - kv / w;
    const i64 dc = q % w - kv % w;
    return std::max(dr < 0 ? -dr : dr, dc < 0 ? -dc : dc) <= radius;
  }};
}

namespace {
void check_bijection(const std::vector<i64>& forward) {
  std::vector<i64> sorted = forward;
  std::sort(sorted.begin(), sorted.end());
  for (i64 i = 0; i < static_cast<i64>(sorted.size()); ++i) {
    if (sorted[static_cast<std::size_t>(i)] != i) {
      throw GeometryMismatch("Permutation: forward is not a bijection on [0, " +
                             std::to_string(sorted.size()) + ")");
    }
  }
}
}  // namespace

Permutation tile_permutation(NAGeometry g, i64 tile) {
  if (tile < 1 || g.canvas_h % tile != 0 || g.canvas_w % tile != 0) {
    throw GeometryMismatch("tile_permutation: tile " + std::to_string(tile) +
                           " must divide canvas " + std::to_string(g.canvas_h) + "x" +
                           std::to_string(g.canvas_w));
  }
  Permutation p;
  p.forward.reserve(static_cast<std::size_t>(g.tokens()));
  for (i64 tr = 0; tr < g.canvas_h; tr += tile) {
    for (i64 tc = 0; tc < g.canvas_w; tc += tile) {
      for (i64 r = tr; r < tr + tile; ++r) {
        for (i64 c = tc; c < tc + tile; ++c) {
          p.forward.push_back(r * g.canvas_w + c);
        }
      }
    }
  }
  return p;
}

Permutation morton_permutation(NAGeometry g) {
  if (g.canvas_h != g.canvas_w || (g.canvas_h & (g.canvas_h - 1)) != 0) {
    throw GeometryMismatch("morton_permutation: canvas must be square with power-of-two side, got " +
                           std::to_string(g.canvas_h) + "x" + std::to_string(g.canvas_w));
  }
  Permutation p;
  p.forward.assign(static_cast<std::size_t>(g.tokens()), 0);
  for (i64 r = 0; r < g.canvas_h; ++r) {
    for (i64 c = 0; c < g.canvas_w; ++c) {
      i64 slot = 0;
      for (i64 bit = 0; (i64(1) << bit) < g.canvas_h; ++bit) {
        slot |= ((c >> bit) & 1) << (2 * bit);
        slot |= ((r >> bit) & 1) << (2 * bit + 1);
      }
      p.forward[static_cast<std::size_t>(slot)] = r * g.canvas_w + c;
    }
  }
  return p;
}

MaskMod remap_mask(MaskMod base, Permutation p) {
  check_bijection(p.forward);
  auto f = base.eval;
  auto fwd = std::make_shared<const std::vector<i64>>(std::move(p.forward));
  return MaskMod{[f, fwd](i64 b, i64 h, i64 q, i64 kv) {
    const i64 n = static_cast<i64>(fwd->size());
    if (q < 0 || q >= n || kv < 0 || kv >= n) {
      throw IndexOutOfRange("remap_mask: slot index outside permutation of size " +
                            std::to_string(n));
    }
    return f(b, h, (*fwd)[static_cast<std::size_t>(q)], (*fwd)[static_cast<std::size_t>(kv)]);
  }};
}

}  // namespace blockattn
