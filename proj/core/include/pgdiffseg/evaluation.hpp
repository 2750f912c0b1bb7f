#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/types.h>

#include "pgdiffseg/data.hpp"
#include "pgdiffseg/sampler.hpp"
#include "pgdiffseg/schedule.hpp"

namespace pgdiffseg {

// 2|A n B| / (|A| + |B|) over nonzero pixels; both empty gives 1.
double dsc(const torch::Tensor& pred, const torch::Tensor& truth);

struct RunMetrics {
  SamplerKind kind = SamplerKind::ancestral;
  int nfe = 0;            // as requested
  int effective_nfe = 0;  // evaluations actually spent per image
  int repeats = 0;
  std::vector<std::uint64_t> seeds;              // one per repeat
  std::vector<std::vector<double>> per_image_dsc;  // [repeat][image]
  std::vector<double> repeat_mean_dsc;
  double mean_dsc = 0;
  double var_dsc = 0;  // population variance of the repeat means
};

nlohmann::json to_json(const RunMetrics& m);

struct EvalOptions {
  int repeats = 5;
  std::uint64_t seed = 0;
  int batch_size = 8;
};

// Repeat r uses seed derive_seed(seed, r); image i of that repeat draws from
// derive_seed(repeat_seed, i), so results do not depend on batching.
RunMetrics evaluate(const Denoiser& denoiser, const std::vector<Sample>& split,
                    const NoiseSchedule& schedule, const SamplerConfig& sampler,
                    const EvalOptions& options);

// Predicted {0,1} masks [N, H, W] for one pass over `split`.
torch::Tensor predict_masks(const Denoiser& denoiser, const std::vector<Sample>& split,
                            const NoiseSchedule& schedule, const SamplerConfig& sampler,
                            std::uint64_t seed, int batch_size = 8);

// Denoiser that knows the true mask of every item in `split` (matched by
// image content) and returns the exact noise eps = (x_t - sqrt(abar) x0) /
// sqrt(1 - abar).
Denoiser make_oracle_denoiser(const std::vector<Sample>& split, const NoiseSchedule& schedule);

struct SweepConfig {
  std::vector<SamplerKind> kinds{SamplerKind::ddim, SamplerKind::dpm2};
  std::vector<int> nfes{10, 25, 50, 100, 200};
  int repeats = 5;
  std::uint64_t seed = 0;
  double eta = 0.0;
  int batch_size = 8;
};

struct SweepResult {
  RunMetrics reference;          // ancestral, nfe = T
  std::vector<RunMetrics> rows;  // kind-major, nfe-minor
  std::vector<std::string> warnings;
};

// nfe values above T are dropped with a warning; odd nfe for dpm2 runs the
// next lower even count and records it as effective_nfe.
SweepResult nfe_sweep(const Denoiser& denoiser, const std::vector<Sample>& split,
                      const NoiseSchedule& schedule, const SweepConfig& config);

struct SweepFiles {
  std::filesystem::path csv, summary_csv, summary_json;
  std::vector<std::filesystem::path> plots;  // one per kind
};

// sweep.csv (kind, nfe, effective_nfe, repeat, mean_dsc), sweep_summary.csv,
// sweep_summary.json and sweep_<kind>.png.
SweepFiles write_sweep_outputs(const SweepResult& result, const std::filesystem::path& dir);

// Mean line, dashed variance line (right axis) and a yellow horizontal
// reference at `reference_mean`.
void plot_sweep(const std::vector<RunMetrics>& rows, double reference_mean,
                const std::string& title, const std::filesystem::path& path);

// One row per image x repeat: image, source_id, repeat, seed, dsc.
void write_eval_csv(const RunMetrics& m, const std::vector<Sample>& split,
                    const std::filesystem::path& path);

}  // namespace pgdiffseg
