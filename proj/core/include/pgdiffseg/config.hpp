#pragma once

#include <cstddef>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "pgdiffseg/data.hpp"
#include "pgdiffseg/evaluation.hpp"
#include "pgdiffseg/network.hpp"
#include "pgdiffseg/sampler.hpp"
#include "pgdiffseg/trainer.hpp"

namespace pgdiffseg {

enum class Modality { ultrasound, mri };

struct DataConfig {
  std::filesystem::path path;  // dataset root; empty when synthetic
  std::size_t synthetic = 0;   // > 0: generate this many synthetic samples
  Modality modality = Modality::ultrasound;
  PreprocessConfig preprocess = PreprocessConfig::ultrasound();
  SplitFractions fractions;
  std::filesystem::path cache;  // optional preprocessed-sample cache directory
};

struct EvalConfig {
  EvalOptions options;
  SweepConfig sweep;
};

// Everything a CLI run needs. Precedence when assembling: these defaults,
// then a YAML file, then command-line flags.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  SamplerConfig sampler;
  DataConfig data;
  EvalConfig eval;

  void validate() const;
};

// YAML sections: model, schedule, train, loss, sampler, data, eval. Unknown
// keys and ill-typed values raise ConfigError with the key path and line.
RunConfig load_run_config(const std::filesystem::path& path, RunConfig base = {});
RunConfig parse_run_config(const std::string& yaml_text, RunConfig base = {});

// YAML text that parse_run_config reads back to an equal config.
std::string dump_run_config(const RunConfig& cfg);

// Short stable hex digest of the effective configuration.
std::string config_hash(const RunConfig& cfg);

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

std::string to_string(Modality m);
Modality modality_from_string(const std::string& s);

}  // namespace pgdiffseg
