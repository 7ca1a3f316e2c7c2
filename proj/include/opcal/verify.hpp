#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace opcal {

enum class VerifyLevel { fast, full };

// Test hooks for negative controls; a nonzero gradient_bias corrupts the
// analytic gradient inside the gradient-consistency check.
struct VerifyHooks {
  double gradient_bias = 0.0;
};

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

// Individual suites. Monte-Carlo sample counts are parameters so the fast
// level can cap them.
CheckResult check_engine_oracle_equivalence(int n_expressions, std::int64_t mc_samples);
CheckResult check_closed_form_identities();
CheckResult check_scalar_gradient(double gradient_bias = 0.0);
CheckResult check_scalar_hessian();
CheckResult check_energy_identity(std::int64_t mc_samples);
CheckResult check_general_response_displays(std::int64_t mc_samples);
CheckResult check_monotone_descent(int n_seeds);
CheckResult check_calibration(int n_seeds);
CheckResult check_figure_pipeline(std::int64_t mc_samples);

std::vector<CheckResult> run_verification(VerifyLevel level, const VerifyHooks& hooks = {});

}  // namespace opcal
