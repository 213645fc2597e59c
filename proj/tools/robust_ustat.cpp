// robust_ustat: batch front-end for the robust U-statistic estimators.
//
//   robust_ustat estimate --config run.json
//   robust_ustat compare --config mc.json --threads 4
//   robust_ustat selfcheck

#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "robust_ustat/cli/commands.hpp"
#include "robust_ustat/cli/config.hpp"
#include "robust_ustat/cli/selfcheck.hpp"
#include "robust_ustat/parallel.hpp"

namespace rc = robust_ustat::cli;

int main(int argc, char** argv) {
  CLI::App app{"Robust estimators of matrix-valued expectations based on U-statistics"};
  app.require_subcommand(1);

  int threads = 0;
  bool strict = false;
  app.add_option("--threads", threads, "Worker threads (default: ROBUST_USTAT_THREADS, then all cores)")
      ->check(CLI::PositiveNumber);
  app.add_flag("--strict", strict, "Exit with code 4 when a solve does not converge");

  std::string config_path;
  auto* estimate = app.add_subcommand("estimate", "Run one estimator and write the estimate and diagnostics");
  estimate->add_option("--config", config_path, "Experiment JSON")->required();
  estimate->fallthrough();

  auto* compare = app.add_subcommand("compare", "Seeded Monte Carlo comparison on synthetic data");
  compare->add_option("--config", config_path, "Experiment JSON")->required();
  compare->fallthrough();

  std::string fault;
  auto* selfcheck = app.add_subcommand("selfcheck", "Run the embedded invariant checks");
  selfcheck->add_option("--inject-fault", fault)->group("");
  selfcheck->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return rc::kExitConfig;
  }

  if (threads > 0) robust_ustat::set_thread_count(threads);

  try {
    if (selfcheck->parsed()) {
      rc::SelfcheckOptions opts;
      opts.inject_fault = fault;
      return rc::cmd_selfcheck(std::cout, opts);
    }
    const rc::ExperimentConfig cfg = rc::load_config(config_path);
    rc::RunOptions run;
    run.strict = strict;
    const int code = estimate->parsed() ? rc::cmd_estimate(cfg, run) : rc::cmd_compare(cfg, run);
    if (code == rc::kExitNotConverged) std::cerr << "error: non-convergence with --strict\n";
    return code;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return rc::exit_code_for(e);
  }
}
