// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end for the block-sparse attention harness.
//
//   bench_cli run    --config cfg [--out results.csv] [--no-timing]
//   bench_cli verify --config cfg [--blockmask mask.bin]
//   bench_cli render --variant causal --qlen 1024 [--kvlen N] [--bs N]
//                    [--out mask.ppm]
//
// Exit codes: 0 success, 1 usage/config error, 2 correctness check failed.
// BLOCKATTN_WORKERS pins the engine's worker thread count (default 1).

#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include <blockattn/bench.hpp>
#include <blockattn/errors.hpp>

namespace {

int cmd_run(const std::string& config_path, const std::string& out_path, bool no_timing) {
  const auto cfg = blockattn::bench::load_config(config_path);
  blockattn::bench::RunOptions opt;
  opt.with_timing = !no_timing;
  const auto rows = blockattn::bench::run_bench(cfg, opt);
  const std::string csv = blockattn::bench::to_csv(rows, opt.with_timing);
  if (out_path.empty()) {
    std::cout << csv;
  } else {
    std::ofstream os(out_path);
    if (!os) {
      std::cerr << "error: cannot open " << out_path << " for writing\n";
      return 1;
    }
    os << csv;
  }
  int bad = 0;
  for (const auto& r : rows) {
    if (!r.ok) {
      ++bad;
      std::cerr << "FAIL " << r.variant << " " << blockattn::bench::mode_name(r.mode) << " q"
                << r.q_len << " kv" << r.kv_len << " bs" << r.block_size << ": " << r.detail
                << "\n";
    }
  }
  if (bad != 0) {
    std::cerr << bad << " of " << rows.size() << " rows failed correctness checks\n";
    return 2;
  }
  std::cerr << rows.size() << " rows ok\n";
  return 0;
}

int cmd_verify(const std::string& config_path, const std::string& blockmask_path) {
  const auto cfg = blockattn::bench::load_config(config_path);
  const auto checks = blockattn::bench::verify_suite(cfg, blockmask_path);
  int bad = 0;
  for (const auto& c : checks) {
    std::cout << (c.pass ? "PASS " : "FAIL ") << c.name;
    if (!c.detail.empty()) std::cout << " -- " << c.detail;
    std::cout << "\n";
    if (!c.pass) ++bad;
  }
  std::cout << (checks.size() - static_cast<std::size_t>(bad)) << "/" << checks.size()
            << " checks passed\n";
  return bad == 0 ? 0 : 2;
}

int cmd_render(const std::string& variant, long long qlen, long long kvlen, long long bs,
               const std::string& out_path, unsigned long long seed) {
  if (kvlen <= 0) kvlen = qlen;
  const bool ppm = out_path.size() >= 4 && out_path.compare(out_path.size() - 4, 4, ".ppm") == 0;
  const std::string data =
      blockattn::bench::render_variant(variant, qlen, kvlen, bs, ppm, seed);
  if (out_path.empty()) {
    std::cout << data;
    return 0;
  }
  std::ofstream os(out_path, std::ios::binary);
  if (!os) {
    std::cerr << "error: cannot open " << out_path << " for writing\n";
    return 1;
  }
  os.write(data.data(), static_cast<std::streamsize>(data.size()));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"block-sparse attention benchmark and verification harness"};
  app.require_subcommand(1);

  std::string config_path, out_path, blockmask_path, variant;
  bool no_timing = false;
  long long qlen = 0, kvlen = 0, bs = 128;
  unsigned long long seed = 0x5eed0001u;

  auto* run = app.add_subcommand("run", "run the benchmark grid and write CSV");
  run->add_option("--config", config_path, "config file (key=value or .json)")->required();
  run->add_option("--out", out_path, "CSV output path (default stdout)");
  run->add_flag("--no-timing", no_timing,
                "skip wall-clock measurement; output is then byte-stable");

  auto* verify = app.add_subcommand("verify", "run correctness checks over the config grid");
  verify->add_option("--config", config_path, "config file (key=value or .json)")->required();
  verify->add_option("--blockmask", blockmask_path,
                     "saved BlockMask to substitute for the first grid point");

  auto* render = app.add_subcommand("render", "render a variant's block structure");
  render->add_option("--variant", variant, "variant name, e.g. causal or sliding_window(256)")
      ->required();
  render->add_option("--qlen", qlen, "query length")->required();
  render->add_option("--kvlen", kvlen, "kv length (default: qlen)");
  render->add_option("--bs", bs, "block size (default 128)");
  render->add_option("--out", out_path, "output file; .ppm suffix selects PPM, else text");
  render->add_option("--seed", seed, "seed for data-dependent variants");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return cmd_run(config_path, out_path, no_timing);
    if (verify->parsed()) return cmd_verify(config_path, blockmask_path);
    if (render->parsed()) return cmd_render(variant, qlen, kvlen, bs, out_path, seed);
  } catch (const blockattn::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
