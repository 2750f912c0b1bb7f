#pragma once

#include <functional>

#include <CLI11.hpp>

namespace pgdiffseg::cli {

using Command = std::function<int()>;

// Each registers a subcommand on `app` and stores its entry point in `run`.
void register_train(CLI::App& app, Command& run);
void register_sample(CLI::App& app, Command& run);
void register_eval(CLI::App& app, Command& run);
void register_sweep(CLI::App& app, Command& run);
void register_explain(CLI::App& app, Command& run);

}  // namespace pgdiffseg::cli
