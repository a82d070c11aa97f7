#pragma once

#include <string>
#include <vector>

namespace fslora {

// ============================================================================
// Acceptance checks. Each check is self-contained: it builds its own
// fixtures, states its tolerance next to the comparison, and reports one
// pass/fail verdict with a measured detail string. The fourteen names in
// acceptance_check_names() are the release gate; run_checks() also knows a
// few extra module-level checks used by the validate subcommand.
// ============================================================================

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;  // measured numbers, not just the verdict
  double ms = 0.0;
};

// The release gate, in fixed order.
const std::vector<std::string>& acceptance_check_names();

// Every known check name (gate first, module extras after).
const std::vector<std::string>& all_check_names();

// Run the named checks (empty = all known). Unknown names throw ConfigError.
// A check that throws is reported as a failure with the exception text.
std::vector<CheckResult> run_checks(const std::vector<std::string>& only = {});

}  // namespace fslora
