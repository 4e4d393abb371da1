#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace nvdeer {

struct CriterionResult {
  int id = 0;
  std::string name;
  bool passed = false;
  /// Measured values against their targets.
  std::string detail;
  double seconds = 0.0;
  double time_limit_seconds = 0.0;
};

struct AcceptanceOptions {
  /// Criteria to run (1..9); empty runs all.
  std::vector<int> only;
  /// Scratch directory for the end-to-end criterion; a fresh temporary
  /// directory when empty.
  std::filesystem::path work_dir;
};

/// Runs the acceptance criteria. A criterion passes only when its values are
/// within tolerance and it finished inside its time limit. Exceptions are
/// caught and reported as failures.
std::vector<CriterionResult> run_acceptance(const AcceptanceOptions& options = {});

/// One "PASS|FAIL  [n] name  (t s)  detail" line per criterion.
std::string format_acceptance(const std::vector<CriterionResult>& results);

}  // namespace nvdeer
