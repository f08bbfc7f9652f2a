#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>

#include "reprompt/harness.hpp"

namespace {

using reprompt::Error;
namespace harness = reprompt::harness;

void print_report(const harness::StageReport& r) {
  std::cerr << r.stage << ": " << r.outputs.size() << " outputs, " << r.failures.size()
            << " failures, " << r.wall_clock_s << " s\n";
  for (const auto& f : r.failures) {
    std::cerr << "  " << f.item << " [" << reprompt::to_string(f.code) << "] " << f.message << "\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prompt reconstruction experiments on byte-level toy language models"};
  app.require_subcommand(1, 1);
  app.fallthrough();

  std::string config_file;
  std::vector<std::string> overrides;
  int workers = 0;
  app.add_option("-c,--config", config_file, "JSON config merged over the defaults");
  app.add_option("-s,--set", overrides, "override a config key, e.g. --set hard.epochs=80")
      ->allow_extra_args(false);
  app.add_option("-w,--workers", workers, "worker threads (default: REPROMPT_WORKERS or cores)")
      ->check(CLI::NonNegativeNumber);

  std::vector<std::pair<std::string, CLI::App*>> stages;
  for (const auto& name : harness::stage_names()) {
    stages.emplace_back(name, app.add_subcommand(name, "run the " + name + " stage"));
  }
  auto* pipeline = app.add_subcommand("pipeline", "run every stage in order");
  auto* show = app.add_subcommand("show-config", "print the resolved config and its hash");

  CLI11_PARSE(app, argc, argv);

  if (workers > 0) setenv("REPROMPT_WORKERS", std::to_string(workers).c_str(), 1);

  harness::ExperimentConfig config;
  try {
    config = harness::load_config(config_file, overrides);
  } catch (const Error& e) {
    std::cerr << e.what() << "\n";
    return harness::exit_code_for(e.code());
  }

  if (show->parsed()) {
    std::cout << config.resolved.dump(2) << "\n" << harness::config_hash(config) << "\n";
    return 0;
  }

  std::vector<std::string> to_run;
  if (pipeline->parsed()) {
    to_run = harness::stage_names();
  } else {
    for (const auto& [name, sub] : stages) {
      if (sub->parsed()) to_run.push_back(name);
    }
  }

  int worst = 0;
  for (const auto& name : to_run) {
    harness::StageReport report;
    try {
      report = harness::run_stage(name, config);
    } catch (const Error& e) {
      std::cerr << name << ": " << e.what() << "\n";
      return harness::exit_code_for(e.code());
    }
    print_report(report);
    worst = std::max(worst, harness::exit_code_for(report));
    // A stage that produced nothing leaves later stages without inputs.
    if (pipeline->parsed() && report.outputs.empty() && !report.failures.empty()) break;
  }
  return worst;
}
