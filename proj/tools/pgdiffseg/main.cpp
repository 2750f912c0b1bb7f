#include <iostream>
#include <thread>

#include <CLI11.hpp>
#include <torch/torch.h>

#include "commands.hpp"
#include "common.hpp"
#include "pgdiffseg/errors.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

}  // namespace

int main(int argc, char** argv) {
  using namespace pgdiffseg;
  CLI::App app{"Prior-guided diffusion segmentation: train, sample, evaluate, explain"};
  app.require_subcommand(1);
  cli::Command run;
  cli::register_train(app, run);
  cli::register_sample(app, run);
  cli::register_eval(app, run);
  cli::register_sweep(app, run);
  cli::register_explain(app, run);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  torch::set_num_threads(std::max(1u, std::thread::hardware_concurrency()));
  try {
    return run ? run() : kExitUsage;
  } catch (const cli::UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const InvalidArgument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const TrainingAborted& e) {
    std::cerr << "training aborted (" << e.component() << "): " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}
