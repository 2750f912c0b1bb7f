#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pgdiffseg/config.hpp"
#include "pgdiffseg/data.hpp"
#include "pgdiffseg/sampler.hpp"
#include "pgdiffseg/trainer.hpp"

namespace pgdiffseg::cli {

// Bad flag combinations detected after parsing; exit code 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::string log_level = "info";
};

struct DataOptions {
  std::string data;
  std::optional<std::size_t> synthetic;
  std::optional<std::uint64_t> data_seed;
  std::string modality;
  std::string split = "test";
  std::size_t limit = 0;
};

struct SamplerOptions {
  std::string kind;
  std::optional<int> nfe;
  std::optional<double> eta;
  std::optional<double> threshold;
};

void add_common(CLI::App& cmd, CommonOptions& o);
void add_data(CLI::App& cmd, DataOptions& o, bool with_split);
void add_sampler(CLI::App& cmd, SamplerOptions& o);

void apply_log_level(const std::string& level);

// Defaults, then --config, then the flags.
RunConfig base_config(const CommonOptions& common);
void apply_data_flags(RunConfig& cfg, const DataOptions& o);
void apply_sampler_flags(SamplerConfig& cfg, const SamplerOptions& o);

// Loads or generates the dataset described by cfg.data. Synthetic samples are
// split 70/10/20 by index. `synthetic_seed` seeds the generator.
DatasetSplits load_data(const RunConfig& cfg, std::uint64_t synthetic_seed);

const std::vector<Sample>& pick_split(const DatasetSplits& splits, const std::string& name);
std::vector<Sample> limit_samples(const std::vector<Sample>& s, std::size_t limit);

// --out-dir if given, otherwise $PGDIFFSEG_OUTPUT_ROOT (default "runs") /
// <command>-<timestamp>-<config hash>.
std::filesystem::path run_dir(const CommonOptions& o, const std::string& command,
                              const RunConfig& cfg);

// RunConfig reconstructed from a checkpoint with data/sampler sections from
// `base`; the model and training sections come from the checkpoint.
RunConfig config_for_checkpoint(const LoadedModel& m, RunConfig base);

struct Inference {
  LoadedModel loaded;
  RunConfig cfg;
  std::vector<Sample> items;
};

// Loads `checkpoint` and selects the images to run on: a single --image file
// (with an optional --mask) or a split of --data / --synthetic.
Inference open_inference(const std::string& checkpoint, const CommonOptions& common,
                         const DataOptions& data, const SamplerOptions& sampler,
                         const std::string& image = {}, const std::string& mask = {});

std::string file_stem_for(const std::string& source_id);

void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace pgdiffseg::cli
