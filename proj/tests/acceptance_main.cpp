// Acceptance suite: one criterion per line, full oracle strength.
#include <chrono>
#include <cstdio>
#include <string>
#include <vector>

#include "opcal/verify.hpp"

namespace {

struct Criterion {
  int number;
  std::string label;
  opcal::CheckResult result;
  double seconds;
};

}  // namespace

int main() {
  using clock = std::chrono::steady_clock;
  std::vector<Criterion> rows;

  const auto timed = [&](int number, const std::string& label, auto&& fn) {
    const auto t0 = clock::now();
    opcal::CheckResult r = fn();
    const double secs = std::chrono::duration<double>(clock::now() - t0).count();
    rows.push_back({number, label, std::move(r), secs});
  };

  timed(1, "operator engine vs quadrature/MC oracles (200 expressions)",
        [] { return opcal::check_engine_oracle_equivalence(200, 1000000); });
  timed(2, "closed-form operator identities",
        [] { return opcal::check_closed_form_identities(); });
  timed(3, "gradient vs finite differences (n=32)",
        [] { return opcal::check_scalar_gradient(); });
  timed(3, "Hessian vs finite differences (n=16)",
        [] { return opcal::check_scalar_hessian(); });
  timed(4, "energy terms vs engine and MC",
        [] { return opcal::check_energy_identity(1000000); });
  timed(5, "general-response displays vs oracles (n=2)",
        [] { return opcal::check_general_response_displays(1000000); });
  timed(6, "monotone descent and convergence (20 seeds)",
        [] { return opcal::check_monotone_descent(20); });
  timed(7, "Gibbs/MAP response calibration (20 seeds)",
        [] { return opcal::check_calibration(20); });
  timed(8, "figure formulas: response mean and band",
        [] { return opcal::check_figure_pipeline(1000000); });
  timed(9, "fast verification suite under ten minutes", [] {
    const auto t0 = clock::now();
    const auto results = opcal::run_verification(opcal::VerifyLevel::fast);
    const double secs = std::chrono::duration<double>(clock::now() - t0).count();
    opcal::CheckResult out;
    bool pass = true;
    for (const auto& r : results) pass = pass && r.pass;
    out.pass = pass && secs < 600.0;
    out.name = "verify fast";
    out.detail = std::to_string(results.size()) + " checks in " +
                 std::to_string(secs) + " s";
    return out;
  });

  bool all_pass = true;
  for (const auto& row : rows) {
    all_pass = all_pass && row.result.pass;
    std::printf("[%s] criterion %d: %s — %s (%.1f s)\n",
                row.result.pass ? "PASS" : "FAIL", row.number, row.label.c_str(),
                row.result.detail.c_str(), row.seconds);
  }
  std::printf("%s\n", all_pass ? "acceptance: all criteria passed"
                               : "acceptance: FAILURES present");
  return all_pass ? 0 : 1;
}
