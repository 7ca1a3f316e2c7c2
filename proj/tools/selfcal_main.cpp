#include <CLI11.hpp>

#include <optional>
#include <string>

#include "opcal/runner.hpp"

int main(int argc, char** argv) {
  CLI::App app{"self-calibrating log-normal inference on mock data"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir = ".";
  std::string dataset_path;
  std::string level = "fast";
  std::optional<std::uint64_t> seed;
  int n_seeds = 20;
  bool no_plots = false;
  double inject_gradient_error = 0.0;

  CLI::App* simulate = app.add_subcommand("simulate", "draw mock data from the priors");
  simulate->add_option("--config", config_path, "JSON configuration")->required();
  simulate->add_option("--seed", seed, "override the config seed");
  simulate->add_option("--out", out_dir, "output directory");

  CLI::App* infer = app.add_subcommand("infer", "reconstruct signal and response");
  infer->add_option("--config", config_path, "JSON configuration")->required();
  infer->add_option("--dataset", dataset_path, "dataset.csv from simulate")->required();
  infer->add_option("--out", out_dir, "output directory");
  infer->add_flag("--no-plots", no_plots, "skip the SVG figures");

  CLI::App* compare = app.add_subcommand("compare", "Gibbs vs MAP over many seeds");
  compare->add_option("--config", config_path, "JSON configuration")->required();
  compare->add_option("--n-seeds", n_seeds, "number of seeds (1..N)");
  compare->add_option("--out", out_dir, "output directory");

  CLI::App* verify = app.add_subcommand("verify", "run the verification suites");
  verify->add_option("--level", level, "fast|full");
  verify
      ->add_option("--inject-gradient-error", inject_gradient_error,
                   "corrupt the gradient check (negative control)")
      ->group("");  // hidden

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : opcal::kExitUsage;
  }

  if (simulate->parsed()) {
    return opcal::cmd_simulate(config_path, seed, out_dir);
  }
  if (infer->parsed()) {
    return opcal::cmd_infer(config_path, dataset_path, out_dir, !no_plots);
  }
  if (compare->parsed()) {
    return opcal::cmd_compare(config_path, n_seeds, out_dir);
  }
  return opcal::cmd_verify(level, inject_gradient_error);
}
