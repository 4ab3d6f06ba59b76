// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <blockattn/modifiers.hpp>
#include <blockattn/tensor.hpp>

namespace blockattn {
namespace bench {

// A named mask/score pair instantiated for a concrete run geometry.
struct Variant {
  std::string canonical;
  MaskMod mask;
  ScoreMod score;
};

// Parses a variant name like "causal", "sliding_window(256)", "soft_cap(20)",
// "na_tiled(5,4)" and instantiates it for the given geometry. Data-dependent
// variants (document) derive their tables deterministically from `seed`.
// Throws UnknownVariant for unknown names, ConfigParse for bad arguments or
// a geometry the variant cannot inhabit (e.g. neighborhood attention on a
// non-square token count).
Variant make_variant(const std::string& text, i64 q_heads, i64 q_len, i64 kv_len,
                     std::uint64_t seed);

enum class Mode { kForward, kBackward, kDecode, kPaged };
Mode parse_mode(const std::string& name);
std::string mode_name(Mode m);

// One benchmark/verification configuration. List-valued fields expand into a
// grid: variants x modes x q_lens x kv_lens x block_sizes, in that nesting
// order. An empty kv_lens mirrors each q_len.
struct BenchConfig {
  std::vector<std::string> variants;
  i64 batch = 1;
  i64 q_heads = 1;
  i64 kv_heads = 1;
  i64 dim = 16;
  std::vector<i64> q_lens;
  std::vector<i64> kv_lens;
  std::vector<i64> block_sizes{128};
  std::vector<Mode> modes{Mode::kForward};
  i64 repeats = 5;  // timing repeats after one warmup; >= 3
  std::uint64_t seed = 0x5eed0001u;
  i64 page_size = 0;  // paged mode; 0 means "use the block size"

  void validate() const;
};

// Reads a config from disk. Files ending in .json hold a single JSON object;
// anything else is parsed as line-oriented `key = value` with '#' comments.
// Keys (both formats): variant, batch, q_heads, kv_heads, dim, q_len,
// kv_len, block_size, mode, repeats, seed, page_size. Lists are JSON arrays
// or comma-separated values.
BenchConfig load_config(const std::string& path);
BenchConfig parse_config_text(const std::string& text, bool json);

// One CSV row: identity of the grid point, median wall time, deterministic
// work counter, block density, and the correctness measurements for the
// mode (see run_bench).
struct BenchRow {
  std::string variant;
  i64 batch = 0, q_heads = 0, kv_heads = 0, q_len = 0, kv_len = 0, dim = 0, block_size = 0;
  Mode mode = Mode::kForward;
  std::uint64_t median_ns = 0;
  std::uint64_t madds = 0;
  double density = 0.0;
  double max_abs_err = 0.0;
  double rmse_err = 0.0;
  bool ok = false;
  std::string detail;  // populated when a check fails
};

struct RunOptions {
  // When false, skip wall-clock measurement and write 0 to the timing
  // column; everything else in the CSV is then a pure function of the
  // config, byte for byte.
  bool with_timing = true;
};

// Runs the grid. Per mode the correctness columns are:
//   forward : max abs vs the dense 32-bit oracle; RMSE vs the 64-bit golden.
//   backward: max relative error / RMSE of (dq,dk,dv) vs the 64-bit engine.
//   decode  : last-token decode step vs the same row of a full forward.
//   paged   : paged vs unpaged forward (must agree bit for bit), RMSE vs
//             golden.
// Rows whose measurements exceed the pinned thresholds come back with
// ok == false; the CLI turns that into a nonzero exit.
std::vector<BenchRow> run_bench(const BenchConfig& cfg, const RunOptions& opt = {});

extern const char* const kCsvHeader;
std::string to_csv(const std::vector<BenchRow>& rows, bool with_timing);

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

// Correctness sweep over the grid: oracle agreement, golden RMSE, lse
// agreement, exhaustive block-mask soundness, full-block demotion and
// empty-block promotion leaving results unchanged, and (at a reduced size)
// finite-difference gradients. `blockmask_override` optionally names a saved
// BlockMask to use for the first grid point instead of the freshly built one
// -- the hook tests use to prove a corrupted mask is caught.
std::vector<CheckResult> verify_suite(const BenchConfig& cfg,
                                      const std::string& blockmask_override = "");

// Renders the block structure of a variant's mask: PPM when `ppm`, UTF-8
// squares otherwise.
std::string render_variant(const std::string& variant, i64 q_len, i64 kv_len, i64 block_size,
                           bool ppm, std::uint64_t seed);

}  // namespace bench
}  // namespace blockattn
