#pragma once

#include <string>
#include <vector>

// Numerical invariants of the decomposition, fusion and modulation layers,
// runnable from the command line as a smoke test of a build.
namespace dcdnet::check {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

// With `corrupt_grl` the gradient reversal sign is flipped for the duration
// of the run, so the GRL check must fail.
std::vector<CheckResult> run_self_check(bool corrupt_grl = false);

bool all_passed(const std::vector<CheckResult>& results);

}  // namespace dcdnet::check
