#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace sheafdmfl {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;  // margins and the values behind the verdict
  double seconds = 0.0;
};

/// Small-instance property suite: gradient/finite-difference agreement,
/// sheaf algebra against the block assembly, mixing-matrix assumptions,
/// degeneration equivalences, fault injection on tampered gossip weights.
std::vector<CheckResult> run_fast_checks();

/// The full acceptance list (ten numbered checks) against the reference
/// configuration; includes the 200-round theory runs and the multi-seed
/// comparisons.
std::vector<CheckResult> run_acceptance_checks(const std::string& reference_config_path);

/// Default location of the reference configuration inside the source tree.
std::string default_reference_config();

/// Prints one line per check; returns the number of failures.
int report_checks(const std::vector<CheckResult>& results, std::ostream& os);

}  // namespace sheafdmfl
