#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ndtsynth/pipeline.hpp"

namespace {

namespace pl = ndtsynth::pipeline;

int run(const std::function<void()>& body) {
  try {
    body();
    return 0;
  } catch (const ndtsynth::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const ndtsynth::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const ndtsynth::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return 4;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Synthetic ultrasonic C-scan data generation and CNN evaluation"};
  app.require_subcommand(1);
  std::string config_path;
  std::vector<std::string> overrides;
  app.add_option("-c,--config", config_path, "JSON config file")->required();
  app.add_option("--set", overrides, "Override a config key, e.g. --set eval.n_runs=2");

  const std::map<std::string, std::pair<std::string, std::function<std::string(const pl::Config&)>>> commands = {
      {"generate", {"Phantom volumes to simulated and experimental-analog datasets",
                    [](const pl::Config& c) { return pl::cmd_generate(c).dir.string(); }}},
      {"fit-noise", {"Fit A-scan and C-scan noise models to experimental clean data",
                     [](const pl::Config& c) { return pl::cmd_fit_noise(c).string(); }}},
      {"synth", {"Add noise to simulated defects with the configured method",
                 [](const pl::Config& c) { return pl::cmd_synth(c).string(); }}},
      {"hpo", {"Regularized evolution search over CNN hyperparameters",
               [](const pl::Config& c) { return pl::cmd_hpo(c).string(); }}},
      {"train-eval", {"Repeated fresh-init training and evaluation per training arm",
                      [](const pl::Config& c) { return pl::cmd_train_eval(c).dir.string(); }}},
      {"explain", {"Grad-CAM triptychs for a trained model",
                   [](const pl::Config& c) { return pl::cmd_explain(c).string(); }}},
      {"golden", {"Emit loss golden vectors", [](const pl::Config& c) { return pl::cmd_golden(c).string(); }}},
  };
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, spec] : commands) subs[name] = app.add_subcommand(name, spec.first);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  return run([&] {
    const auto cfg = pl::Config::load(config_path, overrides);
    for (const auto& [name, sub] : subs) {
      if (sub->parsed()) std::cout << commands.at(name).second(cfg) << '\n';
    }
  });
}
