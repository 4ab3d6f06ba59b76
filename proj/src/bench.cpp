// SPDX-License-Identifier: Apache-2.0
#include <blockattn/bench.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include <blockattn/block_mask.hpp>
#include <blockattn/engine.hpp>
#include <blockattn/errors.hpp>
#include <blockattn/mask_library.hpp>
#include <blockattn/oracle.hpp>
#include <blockattn/paged_kv.hpp>
#include <blockattn/random.hpp>

namespace blockattn {
namespace bench {

namespace {

// Correctness thresholds for run/verify. Fixed here, not configurable: the
// harness exists to hold the implementation to these numbers.
constexpr double kFwdMaxAbsTol = 1e-5;     // float engine vs float dense oracle
constexpr double kGoldenRmseTol = 1e-6;    // float engine vs double golden
constexpr double kLseTol = 1e-4;           // float lse vs double golden lse
constexpr double kTransformTol = 1e-6;     // demotion/promotion must be inert
constexpr double kDecodeTol = 1e-5;        // decode step vs full-forward row
constexpr double kBackwardRelTol = 1e-4;   // float grads vs double-engine grads
constexpr double kBackwardRmseTol = 1e-5;
constexpr double kGradFdTol = 1e-6;        // 64-bit engine grads vs central FD

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

// Splits on commas that are not inside parentheses, so a list like
// "causal, na_tiled(5,4)" keeps variant arguments intact.
std::vector<std::string> split_top_level(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  int depth = 0;
  for (const char c : s) {
    if (c == '(') ++depth;
    if (c == ')') --depth;
    if (c == ',' && depth == 0) {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!trim(cur).empty() || out.empty()) out.push_back(trim(cur));
  return out;
}

struct ParsedName {
  std::string name;
  std::vector<double> args;
};

ParsedName parse_name(const std::string& text) {
  const std::string t = trim(text);
  const auto open = t.find('(');
  if (open == std::string::npos) return {t, {}};
  if (t.back() != ')') throw ConfigParse("variant '" + t + "': missing closing parenthesis");
  ParsedName p;
  p.name = trim(t.substr(0, open));
  const std::string inner = t.substr(open + 1, t.size() - open - 2);
  for (const std::string& a : split_top_level(inner)) {
    if (a.empty()) throw ConfigParse("variant '" + t + "': empty argument");
    std::size_t used = 0;
    double val = 0;
    try {
      val = std::stod(a, &used);
    } catch (const std::exception&) {
      throw ConfigParse("variant '" + t + "': bad numeric argument '" + a + "'");
    }
    if (used != a.size()) {
      throw ConfigParse("variant '" + t + "': bad numeric argument '" + a + "'");
    }
    p.args.push_back(val);
  }
  return p;
}

i64 int_arg(const ParsedName& p, std::size_t i) {
  const double v = p.args[i];
  if (std::abs(v - std::llround(v)) > 1e-9) {
    throw ConfigParse("variant '" + p.name + "': argument " + std::to_string(i + 1) +
                      " must be an integer");
  }
  return static_cast<i64>(std::llround(v));
}

void need_args(const ParsedName& p, std::size_t lo, std::size_t hi) {
  if (p.args.size() < lo || p.args.size() > hi) {
    throw ConfigParse("variant '" + p.name + "': expected " + std::to_string(lo) +
                      (hi != lo ? ".." + std::to_string(hi) : "") + " argument(s), got " +
                      std::to_string(p.args.size()));
  }
}

// Contiguous random documents covering [0, len): ndocs - 1 distinct cut
// points drawn from the seed.
std::vector<i64> make_doc_ids(i64 len, i64 ndocs, std::uint64_t seed) {
  ndocs = std::max<i64>(1, std::min(ndocs, len));
  SplitMix64 rng(seed);
  std::set<i64> cuts;
  while (static_cast<i64>(cuts.size()) < ndocs - 1) {
    cuts.insert(1 + static_cast<i64>(rng.next_below(static_cast<std::uint64_t>(len - 1))));
  }
  std::vector<i64> ids(static_cast<std::size_t>(len));
  i64 doc = 0;
  for (i64 t = 0; t < len; ++t) {
    if (cuts.count(t) != 0) ++doc;
    ids[static_cast<std::size_t>(t)] = doc;
  }
  return ids;
}

NAGeometry square_canvas(const std::string& name, i64 q_len, i64 kv_len, i64 kernel) {
  if (q_len != kv_len) {
    throw ConfigParse("variant '" + name + "': needs q_len == kv_len, got " +
                      std::to_string(q_len) + " vs " + std::to_string(kv_len));
  }
  const i64 side = static_cast<i64>(std::llround(std::sqrt(static_cast<double>(q_len))));
  if (side * side != q_len) {
    throw ConfigParse("variant '" + name + "': token count " + std::to_string(q_len) +
                      " is not a square canvas");
  }
  return NAGeometry(side, side, kernel);
}

}  // namespace

Variant make_variant(const std::string& text, i64 q_heads, i64 q_len, i64 kv_len,
                     std::uint64_t seed) {
  const ParsedName p = parse_name(text);
  Variant var;
  var.canonical = trim(text);
  var.mask = noop_mask();
  var.score = noop_score();

  if (p.name == "noop") {
    need_args(p, 0, 0);
  } else if (p.name == "causal") {
    need_args(p, 0, 0);
    var.mask = causal();
  } else if (p.name == "sliding_window") {
    need_args(p, 1, 1);
    var.mask = sliding_window(int_arg(p, 0));
  } else if (p.name == "document") {
    need_args(p, 0, 1);
    const i64 ndocs = p.args.empty() ? 4 : int_arg(p, 0);
    var.mask = document_mask(make_doc_ids(std::max(q_len, kv_len), ndocs, seed ^ 0xd0c5ull));
  } else if (p.name == "prefix_lm") {
    need_args(p, 0, 1);
    const i64 prefix = p.args.empty() ? std::max<i64>(1, q_len / 4) : int_arg(p, 0);
    var.mask = prefix_lm(prefix);
  } else if (p.name == "alibi") {
    need_args(p, 0, 0);
    var.score = alibi(alibi_slopes(q_heads));
  } else if (p.name == "soft_cap") {
    need_args(p, 1, 1);
    var.score = soft_cap(p.args[0]);
  } else if (p.name == "na_naive") {
    need_args(p, 1, 1);
    var.mask = na_naive(square_canvas(p.name, q_len, kv_len, int_arg(p, 0)));
  } else if (p.name == "na_tiled") {
    need_args(p, 2, 2);
    const NAGeometry g = square_canvas(p.name, q_len, kv_len, int_arg(p, 0));
    var.mask = remap_mask(na_naive(g), tile_permutation(g, int_arg(p, 1)));
  } else if (p.name == "na_morton") {
    need_args(p, 1, 1);
    const NAGeometry g = square_canvas(p.name, q_len, kv_len, int_arg(p, 0));
    var.mask = remap_mask(na_naive(g), morton_permutation(g));
  } else {
    throw UnknownVariant("unknown variant '" + p.name + "'");
  }
  return var;
}

Mode parse_mode(const std::string& name) {
  const std::string n = trim(name);
  if (n == "forward") return Mode::kForward;
  if (n == "backward") return Mode::kBackward;
  if (n == "decode") return Mode::kDecode;
  if (n == "paged") return Mode::kPaged;
  throw ConfigParse("unknown mode '" + n + "'");
}

std::string mode_name(Mode m) {
  switch (m) {
    case Mode::kForward: return "forward";
    case Mode::kBackward: return "backward";
    case Mode::kDecode: return "decode";
    case Mode::kPaged: return "paged";
  }
  return "?";
}

void BenchConfig::validate() const {
  if (variants.empty()) throw ConfigParse("config: at least one variant required");
  if (q_lens.empty()) throw ConfigParse("config: at least one q_len required");
  if (batch < 1 || q_heads < 1 || kv_heads < 1 || dim < 1) {
    throw ConfigParse("config: batch/q_heads/kv_heads/dim must be >= 1");
  }
  if (q_heads % kv_heads != 0) {
    throw ConfigParse("config: q_heads (" + std::to_string(q_heads) +
                      ") must be a multiple of kv_heads (" + std::to_string(kv_heads) + ")");
  }
  for (const i64 l : q_lens) {
    if (l < 1) throw ConfigParse("config: q_len values must be >= 1");
  }
  for (const i64 l : kv_lens) {
    if (l < 1) throw ConfigParse("config: kv_len values must be >= 1");
  }
  if (block_sizes.empty()) throw ConfigParse("config: at least one block_size required");
  for (const i64 b : block_sizes) {
    if (b < 1) throw ConfigParse("config: block_size values must be >= 1");
  }
  if (modes.empty()) throw ConfigParse("config: at least one mode required");
  if (repeats < 3) throw ConfigParse("config: repeats must be >= 3");
  if (page_size < 0) throw ConfigParse("config: page_size must be >= 0");
}

namespace {

template <typename Setter>
void parse_i64_list(const std::string& value, const std::string& key, Setter set) {
  std::vector<i64> out;
  for (const std::string& item : split_top_level(value)) {
    if (item.empty()) throw ConfigParse("config: empty value in key '" + key + "'");
    std::size_t used = 0;
    long long v = 0;
    try {
      v = std::stoll(item, &used);
    } catch (const std::exception&) {
      throw ConfigParse("config: bad integer '" + item + "' for key '" + key + "'");
    }
    if (used != item.size()) {
      throw ConfigParse("config: bad integer '" + item + "' for key '" + key + "'");
    }
    out.push_back(static_cast<i64>(v));
  }
  set(std::move(out));
}

void apply_key(BenchConfig& c, const std::string& key, const std::string& value) {
  if (key == "variant") {
    c.variants = split_top_level(value);
  } else if (key == "q_len") {
    parse_i64_list(value, key, [&c](std::vector<i64> v) { c.q_lens = std::move(v); });
  } else if (key == "kv_len") {
    parse_i64_list(value, key, [&c](std::vector<i64> v) { c.kv_lens = std::move(v); });
  } else if (key == "block_size") {
    parse_i64_list(value, key, [&c](std::vector<i64> v) { c.block_sizes = std::move(v); });
  } else if (key == "mode") {
    c.modes.clear();
    for (const std::string& m : split_top_level(value)) c.modes.push_back(parse_mode(m));
  } else if (key == "batch") {
    parse_i64_list(value, key, [&c](std::vector<i64> v) { c.batch = v.at(0); });
  } else if (key == "q_heads") {
    parse_i64_list(value, key, [&c](std::vector<i64> v) { c.q_heads = v.at(0); });
  } else if (key == "kv_heads") {
    parse_i64_list(value, key, [&c](std::vector<i64> v) { c.kv_heads = v.at(0); });
  } else if (key == "dim") {
    parse_i64_list(value, key, [&c](std::vector<i64> v) { c.dim = v.at(0); });
  } else if (key == "repeats") {
    parse_i64_list(value, key, [&c](std::vector<i64> v) { c.repeats = v.at(0); });
  } else if (key == "page_size") {
    parse_i64_list(value, key, [&c](std::vector<i64> v) { c.page_size = v.at(0); });
  } else if (key == "seed") {
    try {
      c.seed = std::stoull(value);
    } catch (const std::exception&) {
      throw ConfigParse("config: bad seed '" + value + "'");
    }
  } else {
    throw ConfigParse("config: unknown key '" + key + "'");
  }
}

BenchConfig parse_config_kv(const std::string& text) {
  BenchConfig c;
  std::istringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigParse("config line " + std::to_string(lineno) + ": expected key = value");
    }
    apply_key(c, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return c;
}

BenchConfig parse_config_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigParse(std::string("config: JSON parse error: ") + e.what());
  }
  if (!j.is_object()) throw ConfigParse("config: JSON root must be an object");
  BenchConfig c;
  for (const auto& [key, val] : j.items()) {
    std::string flat;
    if (val.is_array()) {
      for (std::size_t i = 0; i < val.size(); ++i) {
        if (i != 0) flat += ",";
        flat += val[i].is_string() ? val[i].get<std::string>() : val[i].dump();
      }
    } else if (val.is_string()) {
      flat = val.get<std::string>();
    } else {
      flat = val.dump();
    }
    apply_key(c, key, flat);
  }
  return c;
}

}  // namespace

BenchConfig parse_config_text(const std::string& text, bool json) {
  return json ? parse_config_json(text) : parse_config_kv(text);
}

BenchConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigParse("config: cannot open " + path);
  std::stringstream buf;
  buf << is.rdbuf();
  const bool json = path.size() >= 5 && path.compare(path.size() - 5, 5, ".json") == 0;
  return parse_config_text(buf.str(), json);
}

namespace {

template <typename Fn>
std::uint64_t median_time_ns(i64 repeats, Fn&& fn) {
  fn();  // warmup
  std::vector<std::uint64_t> samples(static_cast<std::size_t>(repeats));
  for (auto& s : samples) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    s = static_cast<std::uint64_t>(
        std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count());
  }
  std::sort(samples.begin(), samples.end());
  return samples[samples.size() / 2];
}

template <typename Real>
Tensor4<Real> slice_rows(const Tensor4<Real>& t, i64 l0, i64 l1) {
  Tensor4<Real> out(t.batch(), t.heads(), l1 - l0, t.dim());
  for (i64 b = 0; b < t.batch(); ++b) {
    for (i64 h = 0; h < t.heads(); ++h) {
      for (i64 l = l0; l < l1; ++l) {
        const Real* src = t.row_ptr(b, h, l);
        std::copy(src, src + t.dim(), out.row_ptr(b, h, l - l0));
      }
    }
  }
  return out;
}

template <typename Real>
Tensor4<Real> slice_batch(const Tensor4<Real>& t, i64 b) {
  Tensor4<Real> out(1, t.heads(), t.length(), t.dim());
  for (i64 h = 0; h < t.heads(); ++h) {
    for (i64 l = 0; l < t.length(); ++l) {
      const Real* src = t.row_ptr(b, h, l);
      std::copy(src, src + t.dim(), out.row_ptr(0, h, l));
    }
  }
  return out;
}

double rel_grad_err(const Tensor4<float>& got, const Tensor4<double>& want) {
  double max_want = 0.0;
  for (const double v : want.data()) max_want = std::max(max_want, std::abs(v));
  const double denom = std::max(1.0, max_want);
  return max_abs_diff(got, want) / denom;
}

struct PointInputs {
  Tensor4<float> q, k, v;
  AttentionConfig acfg;
  Variant var;
  BlockMask bm;
};

PointInputs build_point(const BenchConfig& cfg, const std::string& variant_text, i64 q_len,
                        i64 kv_len, i64 bs, i64 point_idx) {
  const std::uint64_t seed = cfg.seed + 1000003ull * static_cast<std::uint64_t>(point_idx);
  Variant var = make_variant(variant_text, cfg.q_heads, q_len, kv_len, seed);
  AttentionConfig acfg;
  acfg.gqa_group = cfg.q_heads / cfg.kv_heads;
  acfg.block_size_q = bs;
  acfg.block_size_kv = bs;
  Tensor4<float> q = random_tensor<float>(seed + 1, cfg.batch, cfg.q_heads, q_len, cfg.dim);
  Tensor4<float> k = random_tensor<float>(seed + 2, cfg.batch, cfg.kv_heads, kv_len, cfg.dim);
  Tensor4<float> v = random_tensor<float>(seed + 3, cfg.batch, cfg.kv_heads, kv_len, cfg.dim);
  BlockMask bm = create_block_mask(var.mask, 1, 1, q_len, kv_len, bs, bs);
  return PointInputs{std::move(q), std::move(k), std::move(v), acfg, std::move(var),
                     std::move(bm)};
}

BenchRow run_point(const BenchConfig& cfg, const std::string& variant_text, Mode mode, i64 q_len,
                   i64 kv_len, i64 bs, i64 point_idx, const RunOptions& opt) {
  PointInputs in = build_point(cfg, variant_text, q_len, kv_len, bs, point_idx);
  BenchRow row;
  row.variant = in.var.canonical;
  row.batch = cfg.batch;
  row.q_heads = cfg.q_heads;
  row.kv_heads = cfg.kv_heads;
  row.q_len = q_len;
  row.kv_len = kv_len;
  row.dim = cfg.dim;
  row.block_size = bs;
  row.mode = mode;
  row.density = sparsity(in.bm).density;
  row.ok = true;

  auto fail = [&row](const std::string& why) {
    row.ok = false;
    if (!row.detail.empty()) row.detail += "; ";
    row.detail += why;
  };
  char buf[160];

  switch (mode) {
    case Mode::kForward: {
      OpCounters ctr;
      const auto got = forward(in.q, in.k, in.v, in.var.score, in.bm, in.acfg, &ctr);
      row.madds = ctr.madds;
      const auto oracle = dense_forward(in.q, in.k, in.v, in.var.score, in.var.mask, in.acfg);
      const auto golden = golden_forward(in.q, in.k, in.v, in.var.score, in.var.mask, in.acfg);
      row.max_abs_err = max_abs_diff(got.out, oracle.out);
      row.rmse_err = rmse(got.out, golden.out);
      if (row.max_abs_err > kFwdMaxAbsTol) {
        std::snprintf(buf, sizeof buf, "max abs %.3g > %.3g vs dense oracle", row.max_abs_err,
                      kFwdMaxAbsTol);
        fail(buf);
      }
      if (row.rmse_err > kGoldenRmseTol) {
        std::snprintf(buf, sizeof buf, "rmse %.3g > %.3g vs golden", row.rmse_err,
                      kGoldenRmseTol);
        fail(buf);
      }
      if (opt.with_timing) {
        row.median_ns = median_time_ns(cfg.repeats, [&] {
          forward(in.q, in.k, in.v, in.var.score, in.bm, in.acfg);
        });
      }
      break;
    }
    case Mode::kBackward: {
      const auto fwd = forward(in.q, in.k, in.v, in.var.score, in.bm, in.acfg);
      const BlockMask bm_t = transpose(in.bm);
      OpCounters ctr;
      const auto grads =
          backward(in.q, in.k, in.v, fwd, fwd.out, in.var.score, in.bm, bm_t, in.acfg, &ctr);
      row.madds = ctr.madds;
      const auto q64 = in.q.cast<double>();
      const auto k64 = in.k.cast<double>();
      const auto v64 = in.v.cast<double>();
      const auto fwd64 = forward(q64, k64, v64, in.var.score, in.bm, in.acfg);
      const auto grads64 =
          backward(q64, k64, v64, fwd64, fwd64.out, in.var.score, in.bm, bm_t, in.acfg);
      row.max_abs_err = std::max({rel_grad_err(grads.dq, grads64.dq),
                                  rel_grad_err(grads.dk, grads64.dk),
                                  rel_grad_err(grads.dv, grads64.dv)});
      row.rmse_err = std::max(
          {rmse(grads.dq, grads64.dq), rmse(grads.dk, grads64.dk), rmse(grads.dv, grads64.dv)});
      if (row.max_abs_err > kBackwardRelTol) {
        std::snprintf(buf, sizeof buf, "grad rel err %.3g > %.3g vs 64-bit engine",
                      row.max_abs_err, kBackwardRelTol);
        fail(buf);
      }
      if (row.rmse_err > kBackwardRmseTol) {
        std::snprintf(buf, sizeof buf, "grad rmse %.3g > %.3g vs 64-bit engine", row.rmse_err,
                      kBackwardRmseTol);
        fail(buf);
      }
      if (opt.with_timing) {
        row.median_ns = median_time_ns(cfg.repeats, [&] {
          backward(in.q, in.k, in.v, fwd, fwd.out, in.var.score, in.bm, bm_t, in.acfg);
        });
      }
      break;
    }
    case Mode::kDecode: {
      if (kv_len < q_len) {
        throw ConfigParse("decode mode: kv_len must be >= q_len");
      }
      const i64 offset = q_len - 1;
      const auto q_step = slice_rows(in.q, offset, q_len);
      const BlockMask bm_step = create_block_mask(offset_mask(in.var.mask, offset), 1, 1, 1,
                                                  kv_len, bs, bs);
      row.density = sparsity(bm_step).density;
      OpCounters ctr;
      const auto got = decode(q_step, in.k, in.v, offset, in.var.mask, in.var.score, bm_step,
                              in.acfg, &ctr);
      row.madds = ctr.madds;
      const auto full = forward(in.q, in.k, in.v, in.var.score, in.bm, in.acfg);
      const auto golden = golden_forward(in.q, in.k, in.v, in.var.score, in.var.mask, in.acfg);
      row.max_abs_err = max_abs_diff(got.out, slice_rows(full.out, offset, q_len));
      row.rmse_err = rmse(got.out, slice_rows(golden.out, offset, q_len));
      if (row.max_abs_err > kDecodeTol) {
        std::snprintf(buf, sizeof buf, "decode step differs from forward row by %.3g > %.3g",
                      row.max_abs_err, kDecodeTol);
        fail(buf);
      }
      if (row.rmse_err > kGoldenRmseTol) {
        std::snprintf(buf, sizeof buf, "rmse %.3g > %.3g vs golden", row.rmse_err,
                      kGoldenRmseTol);
        fail(buf);
      }
      if (opt.with_timing) {
        row.median_ns = median_time_ns(cfg.repeats, [&] {
          decode(q_step, in.k, in.v, offset, in.var.mask, in.var.score, bm_step, in.acfg);
        });
      }
      break;
    }
    case Mode::kPaged: {
      const i64 ps = cfg.page_size > 0 ? cfg.page_size : bs;
      if (ps != bs) {
        throw ConfigParse("paged mode: page_size (" + std::to_string(ps) +
                          ") must equal block_size (" + std::to_string(bs) + ")");
      }
      const auto unpaged = forward(in.q, in.k, in.v, in.var.score, in.bm, in.acfg);
      const i64 pages_per_seq = (kv_len + ps - 1) / ps;
      PagedKVCache<float> cache(cfg.batch, cfg.batch * pages_per_seq + cfg.batch, ps,
                                cfg.kv_heads, cfg.dim);
      cache.shuffle_free_pages(cfg.seed ^ 0xfa6e5ull);
      for (i64 b = 0; b < cfg.batch; ++b) {
        cache.assign(b, slice_batch(in.k, b), slice_batch(in.v, b));
      }
      const BlockMask bm_phys = convert_block_mask(in.bm, cache.table());
      const ConvertedMods mods = convert_mods(in.var.mask, in.var.score, cache.table());
      OpCounters ctr;
      const auto paged = forward(in.q, cache.k_phys(), cache.v_phys(), mods.score, bm_phys,
                                 in.acfg, &ctr);
      row.madds = ctr.madds;
      row.max_abs_err = max_abs_diff(paged.out, unpaged.out);
      const auto golden = golden_forward(in.q, in.k, in.v, in.var.score, in.var.mask, in.acfg);
      row.rmse_err = rmse(paged.out, golden.out);
      const bool bits_equal =
          paged.out.data().size() == unpaged.out.data().size() &&
          std::memcmp(paged.out.data().data(), unpaged.out.data().data(),
                      paged.out.data().size() * sizeof(float)) == 0;
      if (!bits_equal) {
        std::snprintf(buf, sizeof buf, "paged forward not bit-identical (max abs %.3g)",
                      row.max_abs_err);
        fail(buf);
      }
      if (row.rmse_err > kGoldenRmseTol) {
        std::snprintf(buf, sizeof buf, "rmse %.3g > %.3g vs golden", row.rmse_err,
                      kGoldenRmseTol);
        fail(buf);
      }
      if (opt.with_timing) {
        row.median_ns = median_time_ns(cfg.repeats, [&] {
          forward(in.q, cache.k_phys(), cache.v_phys(), mods.score, bm_phys, in.acfg);
        });
      }
      break;
    }
  }
  return row;
}

}  // namespace

std::vector<BenchRow> run_bench(const BenchConfig& cfg, const RunOptions& opt) {
  cfg.validate();
  std::vector<BenchRow> rows;
  i64 point_idx = 0;
  for (const std::string& variant : cfg.variants) {
    for (const Mode mode : cfg.modes) {
      for (const i64 q_len : cfg.q_lens) {
        const std::vector<i64> kvs = cfg.kv_lens.empty() ? std::vector<i64>{q_len} : cfg.kv_lens;
        for (const i64 kv_len : kvs) {
          for (const i64 bs : cfg.block_sizes) {
            rows.push_back(run_point(cfg, variant, mode, q_len, kv_len, bs, point_idx++, opt));
          }
        }
      }
    }
  }
  return rows;
}

const char* const kCsvHeader =
    "variant,B,Hq,Hkv,qlen,kvlen,D,bs,mode,median_ns,madds,density,maxabs_err,rmse";

namespace {
std::string csv_escape(const std::string& s) {
  if (s.find(',') == std::string::npos && s.find('"') == std::string::npos) return s;
  std::string out = "\"";
  for (const char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

std::string fmt_double(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}
}  // namespace

std::string to_csv(const std::vector<BenchRow>& rows, bool with_timing) {
  std::string out = kCsvHeader;
  out += '\n';
  for (const BenchRow& r : rows) {
    out += csv_escape(r.variant) + ',';
    out += std::to_string(r.batch) + ',' + std::to_string(r.q_heads) + ',' +
           std::to_string(r.kv_heads) + ',' + std::to_string(r.q_len) + ',' +
           std::to_string(r.kv_len) + ',' + std::to_string(r.dim) + ',' +
           std::to_string(r.block_size) + ',';
    out += mode_name(r.mode) + ',';
    out += std::to_string(with_timing ? r.median_ns : 0) + ',';
    out += std::to_string(r.madds) + ',';
    out += fmt_double(r.density) + ',' + fmt_double(r.max_abs_err) + ',' + fmt_double(r.rmse_err);
    out += '\n';
  }
  return out;
}

namespace {

// Independent classification used by the soundness check: evaluates the mask
// over every in-range position of each block and derives the expected kind.
BlockKind classify_reference(const MaskMod& mask, i64 b, i64 h, i64 r, i64 c, i64 bs_q, i64 bs_kv,
                             i64 q_len, i64 kv_len) {
  const i64 q0 = r * bs_q, q1 = std::min(q0 + bs_q, q_len);
  const i64 k0 = c * bs_kv, k1 = std::min(k0 + bs_kv, kv_len);
  bool any = false, all = true;
  for (i64 q = q0; q < q1; ++q) {
    for (i64 kv = k0; kv < k1; ++kv) {
      if (mask(b, h, q, kv)) {
        any = true;
      } else {
        all = false;
      }
    }
  }
  const bool ragged = (q1 - q0 != bs_q) || (k1 - k0 != bs_kv);
  if (!any) return BlockKind::kEmpty;
  return (all && !ragged) ? BlockKind::kFull : BlockKind::kPartial;
}

}  // namespace

std::vector<CheckResult> verify_suite(const BenchConfig& cfg,
                                      const std::string& blockmask_override) {
  cfg.validate();
  std::vector<CheckResult> results;
  auto add = [&results](const std::string& name, bool pass, const std::string& detail) {
    results.push_back(CheckResult{name, pass, detail});
  };
  char buf[200];

  i64 point_idx = 0;
  bool first_point = true;
  for (const std::string& variant_text : cfg.variants) {
    bool grad_checked = false;
    for (const i64 q_len : cfg.q_lens) {
      const std::vector<i64> kvs = cfg.kv_lens.empty() ? std::vector<i64>{q_len} : cfg.kv_lens;
      for (const i64 kv_len : kvs) {
        for (const i64 bs : cfg.block_sizes) {
          PointInputs in = build_point(cfg, variant_text, q_len, kv_len, bs, point_idx++);
          const std::string tag = in.var.canonical + " q" + std::to_string(q_len) + " kv" +
                                  std::to_string(kv_len) + " bs" + std::to_string(bs);

          if (first_point && !blockmask_override.empty()) {
            try {
              in.bm = load_block_mask(blockmask_override).with_mask(in.var.mask);
              add(tag + " blockmask-load", true, "using " + blockmask_override);
            } catch (const Error& e) {
              add(tag + " blockmask-load", false, e.what());
              first_point = false;
              continue;
            }
          }
          first_point = false;

          // Exhaustive soundness: every block's stored kind must equal the
          // kind recomputed from the mask itself.
          {
            bool sound = true;
            std::string why;
            const BlockGrid g = to_dense(in.bm);
            for (i64 b = 0; b < in.bm.b_dims && sound; ++b) {
              for (i64 h = 0; h < in.bm.h_dims && sound; ++h) {
                for (i64 r = 0; r < in.bm.rows && sound; ++r) {
                  for (i64 c = 0; c < in.bm.cols && sound; ++c) {
                    const BlockKind want = classify_reference(in.var.mask, b, h, r, c, in.bm.bs_q,
                                                              in.bm.bs_kv, in.bm.q_len,
                                                              in.bm.kv_len);
                    if (g.at(b, h, r, c) != want) {
                      sound = false;
                      std::snprintf(buf, sizeof buf,
                                    "block (b%lld,h%lld,r%lld,c%lld) stored %d, expected %d",
                                    static_cast<long long>(b), static_cast<long long>(h),
                                    static_cast<long long>(r), static_cast<long long>(c),
                                    static_cast<int>(g.at(b, h, r, c)), static_cast<int>(want));
                      why = buf;
                    }
                  }
                }
              }
            }
            add(tag + " block-soundness", sound, why);
          }

          const auto got = forward(in.q, in.k, in.v, in.var.score, in.bm, in.acfg);
          const auto oracle = dense_forward(in.q, in.k, in.v, in.var.score, in.var.mask, in.acfg);
          const auto golden = golden_forward(in.q, in.k, in.v, in.var.score, in.var.mask,
                                             in.acfg);

          const double maxabs = max_abs_diff(got.out, oracle.out);
          std::snprintf(buf, sizeof buf, "max abs %.3g (tol %.3g)", maxabs, kFwdMaxAbsTol);
          add(tag + " forward-oracle", maxabs <= kFwdMaxAbsTol, buf);

          const double r = rmse(got.out, golden.out);
          std::snprintf(buf, sizeof buf, "rmse %.3g (tol %.3g)", r, kGoldenRmseTol);
          add(tag + " golden-rmse", r <= kGoldenRmseTol, buf);

          {
            double lse_err = 0.0;
            for (std::size_t i = 0; i < got.lse.size(); ++i) {
              const double a = static_cast<double>(got.lse[i]);
              const double b = golden.lse[i];
              if (std::isinf(a) && std::isinf(b)) continue;
              lse_err = std::max(lse_err, std::abs(a - b));
            }
            std::snprintf(buf, sizeof buf, "max abs %.3g (tol %.3g)", lse_err, kLseTol);
            add(tag + " lse-golden", lse_err <= kLseTol, buf);
          }

          {
            OpCounters base_ctr, demoted_ctr;
            const auto base = forward(in.q, in.k, in.v, in.var.score, in.bm, in.acfg, &base_ctr);
            const BlockMask demoted = demote_full_to_partial(in.bm);
            const auto after =
                forward(in.q, in.k, in.v, in.var.score, demoted, in.acfg, &demoted_ctr);
            const double d = max_abs_diff(base.out, after.out);
            // Every position of a former full block is one extra mask
            // evaluation per (batch, head) pair the mask is broadcast over.
            std::uint64_t expect_delta = 0;
            for (i64 b = 0; b < in.bm.b_dims; ++b) {
              for (i64 h = 0; h < in.bm.h_dims; ++h) {
                for (i64 rr = 0; rr < in.bm.rows; ++rr) {
                  const i64 q0 = rr * in.bm.bs_q;
                  const i64 nq = std::min(q0 + in.bm.bs_q, in.bm.q_len) - q0;
                  for (i64 i = 0; i < in.bm.full_count(b, h, rr); ++i) {
                    const i64 c = in.bm.full_index(b, h, rr, i);
                    const i64 k0 = c * in.bm.bs_kv;
                    const i64 nk = std::min(k0 + in.bm.bs_kv, in.bm.kv_len) - k0;
                    expect_delta += static_cast<std::uint64_t>(nq * nk);
                  }
                }
              }
            }
            expect_delta *= static_cast<std::uint64_t>(
                (cfg.batch / in.bm.b_dims) * (cfg.q_heads / in.bm.h_dims));
            const std::uint64_t delta = demoted_ctr.mask_evals - base_ctr.mask_evals;
            const bool pass = d <= kTransformTol && delta == expect_delta;
            std::snprintf(buf, sizeof buf,
                          "max abs %.3g (tol %.3g), mask evals +%llu (expected +%llu)", d,
                          kTransformTol, static_cast<unsigned long long>(delta),
                          static_cast<unsigned long long>(expect_delta));
            add(tag + " full-demotion", pass, buf);
          }

          {
            const BlockMask promoted = promote_empty_to_partial(in.bm);
            const auto after = forward(in.q, in.k, in.v, in.var.score, promoted, in.acfg);
            const double d = max_abs_diff(got.out, after.out);
            std::snprintf(buf, sizeof buf, "max abs %.3g (tol %.3g)", d, kTransformTol);
            add(tag + " empty-promotion", d <= kTransformTol, buf);
          }
        }
      }
    }

    // Gradient check once per variant, at a size the FD oracle accepts.
    if (!grad_checked) {
      grad_checked = true;
      const std::string tag = trim(variant_text) + " grad-fd";
      try {
        const i64 gq = 8, gd = 4, gbs = 4;
        const std::uint64_t gseed = cfg.seed ^ 0x9fadull;
        Variant var = make_variant(variant_text, cfg.q_heads, gq, gq, gseed);
        AttentionConfig acfg;
        acfg.gqa_group = cfg.q_heads / cfg.kv_heads;
        acfg.block_size_q = gbs;
        acfg.block_size_kv = gbs;
        const auto q = random_tensor<double>(gseed + 1, 1, cfg.q_heads, gq, gd);
        const auto k = random_tensor<double>(gseed + 2, 1, cfg.kv_heads, gq, gd);
        const auto v = random_tensor<double>(gseed + 3, 1, cfg.kv_heads, gq, gd);
        const BlockMask bm = create_block_mask(var.mask, 1, 1, gq, gq, gbs, gbs);
        const auto fwd = forward(q, k, v, var.score, bm, acfg);
        const auto grads = backward(q, k, v, fwd, fwd.out, var.score, bm, transpose(bm), acfg);
        const auto fd = dense_backward_fd(q, k, v, var.score, var.mask, acfg);
        auto rel = [](const Tensor4<double>& got_t, const Tensor4<double>& want_t) {
          double mx = 0.0;
          for (const double x : want_t.data()) mx = std::max(mx, std::abs(x));
          return max_abs_diff(got_t, want_t) / std::max(1.0, mx);
        };
        const double err =
            std::max({rel(grads.dq, fd.dq), rel(grads.dk, fd.dk), rel(grads.dv, fd.dv)});
        std::snprintf(buf, sizeof buf, "rel err %.3g (tol %.3g) at 8 tokens / dim 4", err,
                      kGradFdTol);
        add(tag, err <= kGradFdTol, buf);
      } catch (const ConfigParse& e) {
        add(tag, true, std::string("skipped: ") + e.what());
      } catch (const GeometryMismatch& e) {
        add(tag, true, std::string("skipped: ") + e.what());
      }
    }
  }
  return results;
}

std::string render_variant(const std::string& variant, i64 q_len, i64 kv_len, i64 block_size,
                           bool ppm, std::uint64_t seed) {
  const Variant var = make_variant(variant, 1, q_len, kv_len, seed);
  const BlockMask bm = create_block_mask(var.mask, 1, 1, q_len, kv_len, block_size, block_size);
  return ppm ? render_ppm(bm, 0, 0) : render_ascii(bm, 0, 0);
}

}  // namespace bench
}  // namespace blockattn
