#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "fslora/diagnostics.hpp"
#include "fslora/federation.hpp"

namespace fslora {

// ============================================================================
// Configuration: plain-text "key = value" lines, '#' comments, versioned
// schema. Unknown keys are hard errors so a typo cannot silently corrupt a
// sweep. All values keep their source spelling in the resolved map; parsing
// happens when the experiment is built.
// ============================================================================

using ConfigMap = std::map<std::string, std::string>;

// Syntax pass only: comments, blank lines, duplicate keys.
ConfigMap parse_config_text(const std::string& text);
ConfigMap load_config_file(const std::string& path);  // IoError on read failure

// Apply repeatable "key=value" command-line overrides on top of a file.
void apply_overrides(ConfigMap& cfg, const std::vector<std::string>& sets);

// Schema check: every key known, config_version supported. Throws
// ConfigError naming every offending key at once.
void validate_config_keys(const ConfigMap& cfg);

// The full schema with default value spellings (also the documentation).
const ConfigMap& config_defaults();

// Defaults filled in and the experiment constructed: task generation,
// Dirichlet partition, client configs, engine setup. Deterministic per
// resolved config.
struct BuiltExperiment {
  ConfigMap resolved;
  ExperimentSetup setup;
};
BuiltExperiment build_experiment(const ConfigMap& cfg);

// Diagnostics knobs share the config file (diag.* keys).
DiagnosticsOptions diagnostics_options(const ConfigMap& cfg);

// ============================================================================
// Artifacts: manifest.json + metrics.csv + adapters.bin in one directory.
// The manifest pins everything needed to reproduce every byte: the resolved
// config, the master seed, derived per-module stream fingerprints, input
// content hashes, and the calibration constants in force.
// ============================================================================

struct RunPaths {
  std::filesystem::path dir;
  std::filesystem::path manifest;
  std::filesystem::path metrics;
  std::filesystem::path snapshot;
};
RunPaths run_paths(const std::filesystem::path& dir);

std::string manifest_json(const BuiltExperiment& built, const std::string& created_utc);
// Round-trips for replay.
ConfigMap manifest_config(const std::string& manifest_text);
std::string manifest_created_utc(const std::string& manifest_text);

// CSV schema (RFC-4180; numeric fields never need quoting). Doubles print
// as %.17g so values survive the round-trip exactly.
std::string metrics_header();
std::string metrics_row(const RoundMetrics& row);

void write_snapshot(const std::string& path, const RunResult& result);
struct Snapshot {
  long round = 0;
  Matrix b;
  Matrix a;
  Matrix base;  // empty unless the method merges into the base
  bool has_base = false;
};
Snapshot read_snapshot(const std::string& path);

std::string now_utc_iso8601();

// $FSLORA_OUT_ROOT if set, else ./runs.
std::filesystem::path output_root();

// Build, persist, and run: manifest first, metrics streamed row by row (a
// mid-run numerical failure leaves the manifest and completed rows behind),
// snapshot last. Pass the original created_utc when replaying so the
// manifest reproduces byte for byte.
RunResult execute_run(const ConfigMap& cfg, const std::filesystem::path& dir,
                      const std::string& created_utc = "");

// ============================================================================
// Calibration constants recorded in every manifest. Values were pinned from
// the first calibration run of the standard scenario and are asserted by the
// validation suite.
// ============================================================================

// Eval-loss threshold used by the local-steps trend check (rounds until the
// seed-averaged eval loss first drops below it).
extern const double kTrendLossThreshold;
// Allowed final-loss degradation factor for top-k ratio 0.5 on the standard
// scenario, relative to the uncompressed run.
extern const double kTopkLossFactor;
// Standard-scenario learning rate (stable for every probed sketch size).
extern const double kStandardLr;

}  // namespace fslora
