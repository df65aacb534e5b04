#pragma once

#include <string>
#include <vector>

namespace devid {

struct CheckResult {
  std::string name;
  double measured = 0;
  double threshold = 0;
  bool pass = false;
  std::string note;
};

// Full invariant suite: per-layer gradient checks, formula-oracle
// equivalences, shape traces, and persistence round-trips. Each check
// reports its measured error against its threshold.
//
// `inject_bug_layer` is a test fixture: the named layer's analytic gradient
// is corrupted before comparison so the failure path can be exercised.
std::vector<CheckResult> run_verification(const std::string& inject_bug_layer = "");

bool all_pass(const std::vector<CheckResult>& results);

std::string format_report(const std::vector<CheckResult>& results);

} // namespace devid
