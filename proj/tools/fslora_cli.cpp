#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fslora/baselines.hpp"
#include "fslora/diagnostics.hpp"
#include "fslora/errors.hpp"
#include "fslora/harness.hpp"
#include "fslora/kernels.hpp"
#include "fslora/validation.hpp"

namespace {

using fslora::ConfigMap;

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw fslora::IoError("cannot read " + p.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// Shared --config/--set plumbing for run, sweep, and diagnose.
struct ConfigArgs {
  std::string config_path;
  std::vector<std::string> sets;

  ConfigMap load() const {
    ConfigMap cfg;
    if (!config_path.empty()) cfg = fslora::load_config_file(config_path);
    fslora::apply_overrides(cfg, sets);
    if (!cfg.count("config_version")) cfg["config_version"] = "1";
    fslora::validate_config_keys(cfg);
    return cfg;
  }
};

void add_config_options(CLI::App* cmd, ConfigArgs& args) {
  cmd->add_option("--config", args.config_path, "experiment config file (key = value lines)");
  cmd->add_option("--set", args.sets, "override one config key (key=value, repeatable)");
}

std::filesystem::path unique_dir(const std::filesystem::path& root, const std::string& stem) {
  std::filesystem::path dir = root / stem;
  for (int i = 2; std::filesystem::exists(dir); ++i) {
    dir = root / (stem + "-" + std::to_string(i));
  }
  return dir;
}

std::string run_stem(const ConfigMap& cfg) {
  ConfigMap full = fslora::config_defaults();
  for (const auto& [k, v] : cfg) full[k] = v;
  return "run-" + full.at("method") + "-seed" + full.at("seed");
}

double final_eval_loss(const fslora::RunResult& r) {
  return r.rounds.empty() ? 0.0 : r.rounds.back().eval_loss;
}

// ============================================================================
// run
// ============================================================================

int do_run(const ConfigArgs& cargs, std::string out_dir, const std::string& replay,
           const std::string& export_path) {
  ConfigMap cfg;
  std::string created;
  if (!replay.empty()) {
    const std::string manifest = read_file(replay);
    cfg = fslora::manifest_config(manifest);
    created = fslora::manifest_created_utc(manifest);
  } else {
    cfg = cargs.load();
  }
  const std::filesystem::path dir = out_dir.empty()
                                        ? unique_dir(fslora::output_root(), run_stem(cfg))
                                        : std::filesystem::path(out_dir);

  if (!export_path.empty()) {
    const fslora::BuiltExperiment built = fslora::build_experiment(cfg);
    fslora::export_dataset(built.setup.train, export_path);
    std::printf("dataset: %s\n", export_path.c_str());
  }

  const fslora::RunResult result = fslora::execute_run(cfg, dir, created);
  const fslora::RunPaths paths = fslora::run_paths(dir);
  std::printf("run dir:  %s\n", paths.dir.string().c_str());
  std::printf("manifest: %s\n", paths.manifest.string().c_str());
  std::printf("metrics:  %s (%zu rounds)\n", paths.metrics.string().c_str(),
              result.rounds.size());
  std::printf("snapshot: %s\n", paths.snapshot.string().c_str());
  std::printf("final eval loss: %.17g\n", final_eval_loss(result));
  return 0;
}

// ============================================================================
// sweep
// ============================================================================

std::vector<uint64_t> parse_seed_list(const std::string& text) {
  const size_t dots = text.find("..");
  std::vector<uint64_t> seeds;
  if (dots != std::string::npos) {
    const uint64_t lo = std::stoull(text.substr(0, dots));
    const uint64_t hi = std::stoull(text.substr(dots + 2));
    if (hi < lo) throw fslora::ConfigError("--seeds range is empty: " + text);
    for (uint64_t s = lo; s <= hi; ++s) seeds.push_back(s);
    return seeds;
  }
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) seeds.push_back(std::stoull(item));
  }
  if (seeds.empty()) throw fslora::ConfigError("--seeds lists no seeds: " + text);
  return seeds;
}

std::string trim_zeros(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

struct SweepCell {
  std::string method;
  double ratio = 1.0;
  uint32_t rank = 0;
  int n_seeds = 0;
  int n_failed = 0;
  std::vector<double> finals;
  double uplink_total = 0.0;    // mean over successful seeds
  double downlink_total = 0.0;
};

int do_sweep(const ConfigArgs& cargs, const std::string& out_dir,
             const std::vector<std::string>& methods, const std::vector<double>& ratios,
             const std::vector<uint32_t>& ranks, const std::string& seeds_text) {
  const ConfigMap base = cargs.load();
  const std::vector<uint64_t> seeds = parse_seed_list(seeds_text);
  const std::filesystem::path root =
      out_dir.empty() ? unique_dir(fslora::output_root(), "sweep") : std::filesystem::path(out_dir);
  std::filesystem::create_directories(root);

  std::vector<SweepCell> cells;
  for (const std::string& method : methods) {
    for (const double ratio : ratios) {
      for (const uint32_t rank : ranks) {
        SweepCell cell;
        cell.method = method;
        cell.ratio = ratio;
        cell.rank = rank;
        const auto k = static_cast<uint32_t>(
            std::max<long>(1, std::lround(ratio * static_cast<double>(rank))));
        for (const uint64_t seed : seeds) {
          ConfigMap cfg = base;
          cfg["method"] = method;
          cfg["model.rank"] = std::to_string(rank);
          cfg["clients.k"] = std::to_string(k);
          cfg["seed"] = std::to_string(seed);
          const std::string stem = "method-" + method + "_ratio-" + trim_zeros(ratio) +
                                   "_rank-" + std::to_string(rank) + "_seed-" +
                                   std::to_string(seed);
          ++cell.n_seeds;
          try {
            const fslora::RunResult res = fslora::execute_run(cfg, root / stem);
            cell.finals.push_back(final_eval_loss(res));
            double up = 0.0, down = 0.0;
            for (const auto& r : res.rounds) {
              up += static_cast<double>(r.uplink_bytes);
              down += static_cast<double>(r.downlink_bytes);
            }
            cell.uplink_total += up;
            cell.downlink_total += down;
            std::printf("ok   %s (final eval loss %.6g)\n", stem.c_str(),
                        cell.finals.back());
          } catch (const std::exception& ex) {
            ++cell.n_failed;
            std::printf("FAIL %s: %s\n", stem.c_str(), ex.what());
          }
        }
        cells.push_back(std::move(cell));
      }
    }
  }

  const std::filesystem::path summary_path = root / "summary.csv";
  std::ofstream summary(summary_path, std::ios::binary | std::ios::trunc);
  summary << "method,ratio,rank,n_seeds,n_failed,final_eval_mean,final_eval_stddev,"
             "mean_uplink_bytes,mean_downlink_bytes\n";
  for (const SweepCell& c : cells) {
    double mean = 0.0, stddev = 0.0;
    if (!c.finals.empty()) {
      for (double v : c.finals) mean += v;
      mean /= static_cast<double>(c.finals.size());
      for (double v : c.finals) stddev += (v - mean) * (v - mean);
      stddev = c.finals.size() > 1
                   ? std::sqrt(stddev / static_cast<double>(c.finals.size() - 1))
                   : 0.0;
    }
    const double denom = c.finals.empty() ? 1.0 : static_cast<double>(c.finals.size());
    char line[512];
    std::snprintf(line, sizeof line, "%s,%.17g,%u,%d,%d,%.17g,%.17g,%.17g,%.17g\n",
                  c.method.c_str(), c.ratio, c.rank, c.n_seeds, c.n_failed, mean, stddev,
                  c.uplink_total / denom, c.downlink_total / denom);
    summary << line;
  }
  summary.close();
  int failed = 0;
  for (const SweepCell& c : cells) failed += c.n_failed;
  std::printf("summary: %s (%zu cells, %d failed runs)\n", summary_path.string().c_str(),
              cells.size(), failed);
  return failed == 0 ? 0 : 4;
}

// ============================================================================
// diagnose
// ============================================================================

int do_diagnose(const ConfigArgs& cargs, const std::string& out_path) {
  const ConfigMap cfg = cargs.load();
  const fslora::BuiltExperiment built = fslora::build_experiment(cfg);
  const fslora::DiagnosticsOptions opt = fslora::diagnostics_options(cfg);
  const fslora::AssumptionEstimates est = fslora::estimate_assumptions(built.setup, opt);

  nlohmann::json j;
  nlohmann::json bands = nlohmann::json::array();
  for (const fslora::NormBand& b : est.client_norms) {
    bands.push_back({{"min_norm", b.min_norm}, {"max_norm", b.max_norm}});
  }
  j["client_grad_norm_bands"] = bands;
  j["variance"] = {{"sigma_sq", est.sigma_sq}, {"rho", est.rho}};
  j["dissimilarity"] = {{"c_h", est.c_h}, {"delta_h", est.delta_h}};
  nlohmann::json smooth = nlohmann::json::array();
  for (size_t i = 0; i < est.ks.size(); ++i) {
    smooth.push_back({{"k", est.ks[i]}, {"ratio", est.smoothness_ratios[i]}});
  }
  j["smoothness_ratios"] = smooth;
  const std::string text = j.dump(2) + "\n";

  if (out_path.empty()) {
    std::fputs(text.c_str(), stdout);
  } else {
    std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
    if (!out) throw fslora::IoError("cannot write " + out_path);
    out << text;
    std::printf("diagnostics: %s\n", out_path.c_str());
  }
  return 0;
}

// ============================================================================
// validate / validate-costs
// ============================================================================

int print_check_results(const std::vector<fslora::CheckResult>& results) {
  int failed = 0;
  double total_ms = 0.0;
  for (const fslora::CheckResult& r : results) {
    std::printf("%-30s %s  (%6.2f s)  %s\n", r.name.c_str(), r.pass ? "PASS" : "FAIL",
                r.ms / 1000.0, r.detail.c_str());
    failed += r.pass ? 0 : 1;
    total_ms += r.ms;
  }
  std::printf("%d/%zu checks passed in %.1f s\n", static_cast<int>(results.size()) - failed,
              results.size(), total_ms / 1000.0);
  return failed == 0 ? 0 : 5;
}

int do_validate(const std::vector<std::string>& only) {
  std::vector<std::string> selected;
  if (!only.empty()) {
    for (const std::string& filter : only) {
      bool hit = false;
      for (const std::string& name : fslora::all_check_names()) {
        if (name.find(filter) != std::string::npos) {
          if (std::find(selected.begin(), selected.end(), name) == selected.end()) {
            selected.push_back(name);
          }
          hit = true;
        }
      }
      if (!hit) {
        std::string known;
        for (const std::string& name : fslora::all_check_names()) known += " " + name;
        throw fslora::ConfigError("--only '" + filter + "' matches no check; known:" + known);
      }
    }
  }
  return print_check_results(fslora::run_checks(selected));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fslora: sketched low-rank adapter federation simulator"};
  app.require_subcommand(1);
  std::string kernels;
  app.add_option("--kernels", kernels, "force a kernel variant: auto|scalar|avx2|neon");

  ConfigArgs run_cfg;
  std::string run_out, run_replay, run_export;
  CLI::App* run = app.add_subcommand("run", "execute one experiment");
  add_config_options(run, run_cfg);
  run->add_option("--out", run_out, "output directory (default: under the output root)");
  run->add_option("--replay", run_replay, "replay byte-identically from a manifest.json");
  run->add_option("--export-dataset", run_export, "also write the training set as binary");
  run->add_option("--seed", [&run_cfg](const std::vector<std::string>& v) {
    run_cfg.sets.push_back("seed=" + v.back());
    return true;
  }, "shorthand for --set seed=N");
  run->add_option("--method", [&run_cfg](const std::vector<std::string>& v) {
    run_cfg.sets.push_back("method=" + v.back());
    return true;
  }, "shorthand for --set method=NAME");

  ConfigArgs sweep_cfg;
  std::string sweep_out, sweep_seeds = "1";
  std::vector<std::string> sweep_methods{"fslora"};
  std::vector<double> sweep_ratios{1.0};
  std::vector<uint32_t> sweep_ranks;
  CLI::App* sweep = app.add_subcommand("sweep", "run a methods x ratios x ranks x seeds grid");
  add_config_options(sweep, sweep_cfg);
  sweep->add_option("--out", sweep_out, "sweep root directory");
  sweep->add_option("--methods", sweep_methods, "methods to sweep")->delimiter(',');
  sweep->add_option("--ratios", sweep_ratios, "sketching ratios (k = ratio * rank)")
      ->delimiter(',');
  sweep->add_option("--ranks", sweep_ranks, "global adapter ranks")->delimiter(',');
  sweep->add_option("--seeds", sweep_seeds, "seed list: 1,2,3 or 1..10");

  ConfigArgs diag_cfg;
  std::string diag_out;
  CLI::App* diagnose = app.add_subcommand("diagnose", "estimate task constants as JSON");
  add_config_options(diagnose, diag_cfg);
  diagnose->add_option("--out", diag_out, "write JSON here instead of stdout");

  CLI::App* validate_costs =
      app.add_subcommand("validate-costs", "run the communication-cost reconciliation alone");

  std::vector<std::string> only;
  CLI::App* validate = app.add_subcommand("validate", "run the full acceptance suite");
  validate->add_option("--only", only, "substring filter on check names (repeatable)")
      ->delimiter(',');

  CLI11_PARSE(app, argc, argv);

  try {
    if (!kernels.empty()) fslora::kern::select(fslora::kern::parse_kind(kernels));
    if (run->parsed()) return do_run(run_cfg, run_out, run_replay, run_export);
    if (sweep->parsed()) {
      if (sweep_ranks.empty()) {
        ConfigMap resolved = fslora::config_defaults();
        for (const auto& [k, v] : sweep_cfg.load()) resolved[k] = v;
        sweep_ranks.push_back(static_cast<uint32_t>(std::stoul(resolved.at("model.rank"))));
      }
      return do_sweep(sweep_cfg, sweep_out, sweep_methods, sweep_ratios, sweep_ranks,
                      sweep_seeds);
    }
    if (diagnose->parsed()) return do_diagnose(diag_cfg, diag_out);
    if (validate_costs->parsed()) {
      return print_check_results(fslora::run_checks({"costs-reconciliation"}));
    }
    if (validate->parsed()) return do_validate(only);
  } catch (const fslora::ConfigError& ex) {
    std::fprintf(stderr, "config error: %s\n", ex.what());
    return 2;
  } catch (const fslora::NumericalError& ex) {
    std::fprintf(stderr, "numerical failure: %s\n", ex.what());
    return 3;
  } catch (const std::exception& ex) {
    std::fprintf(stderr, "error: %s\n", ex.what());
    return 1;
  }
  return 0;
}
