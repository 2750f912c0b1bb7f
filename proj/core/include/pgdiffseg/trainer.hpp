#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "pgdiffseg/data.hpp"
#include "pgdiffseg/losses.hpp"
#include "pgdiffseg/network.hpp"
#include "pgdiffseg/sampler.hpp"
#include "pgdiffseg/schedule.hpp"

namespace pgdiffseg {

enum class OptimizerKind { adam, adamw };

std::string to_string(OptimizerKind k);
OptimizerKind optimizer_kind_from_string(const std::string& s);

struct TrainConfig {
  int epochs = 50;
  int batch_size = 8;
  double learning_rate = 2e-4;
  OptimizerKind optimizer = OptimizerKind::adam;
  double weight_decay = 0.0;
  std::optional<double> ema_decay;
  std::optional<double> grad_clip;
  std::uint64_t seed = 0;
  std::int64_t max_steps = 0;         // 0: run all epochs
  int checkpoint_interval = 500;      // steps; 0 keeps only the final checkpoint
  int validation_interval = 500;      // steps; 0 disables periodic validation
  int validation_images = 4;
  int validation_nfe = 25;            // ddim, eta = 0
  int log_interval = 50;              // console cadence; the metrics log gets every step
  std::int64_t prior_pretrain_steps = 0;  // steps optimising only the prior losses first
  bool augment = false;               // six-fold flips/rotations of the training split
  LossWeights loss;
  int diffusion_steps = 1000;
  VarianceChoice variance = VarianceChoice::beta;

  void validate() const;
};

struct StepRecord {
  std::int64_t step = 0;  // 1-based index of the update just applied
  std::int64_t epoch = 0;
  double mse = 0, ce = 0, dice = 0, bce = 0, total = 0;
  double grad_norm = 0;
  bool prior_only = false;
};

struct ValidationRecord {
  std::int64_t step = 0;
  double mean_dsc = 0;
  int images = 0;
  int nfe = 0;
};

struct TrainResult {
  std::filesystem::path checkpoint;
  std::filesystem::path metrics_log;
  std::int64_t steps = 0;
  std::optional<ValidationRecord> last_validation;
};

nlohmann::json to_json(const StepRecord& r);
nlohmann::json to_json(const ValidationRecord& r);

// Owns the model, optimiser, schedule and step counter. All randomness of
// step k derives from (seed, k), so a run resumed from a checkpoint taken
// after step k continues exactly as the uninterrupted run would.
class Trainer {
 public:
  Trainer(ModelConfig model_config, TrainConfig config);

  // Restores model, optimiser, EMA and step counter.
  static Trainer resume(const std::filesystem::path& checkpoint);

  // One optimiser update on `batch` ({0,1} masks).
  StepRecord train_step(const Batch& batch);

  // Epoch loop over `train` with periodic validation on up to
  // validation_images items of `val` and periodic checkpoints in out_dir.
  TrainResult train_loop(const std::vector<Sample>& train, const std::vector<Sample>& val,
                         const std::filesystem::path& out_dir,
                         const std::function<void(const StepRecord&)>& on_step = {});

  ValidationRecord validate(const std::vector<Sample>& val);

  void save_checkpoint(const std::filesystem::path& path) const;

  // Moves the end of training (used when extending a resumed run).
  void set_stopping_point(int epochs, std::int64_t max_steps);

  PGDiffSeg& model() noexcept { return model_; }
  // EMA weights when enabled, otherwise the live model.
  PGDiffSeg sampling_model() const;
  const NoiseSchedule& schedule() const noexcept { return schedule_; }
  const TrainConfig& config() const noexcept { return cfg_; }
  const ModelConfig& model_config() const noexcept { return model_cfg_; }
  std::int64_t step() const noexcept { return step_; }

 private:
  void make_optimizer();
  void update_ema();
  std::vector<std::size_t> epoch_order(std::int64_t epoch, std::size_t n) const;

  ModelConfig model_cfg_;
  TrainConfig cfg_;
  NoiseSchedule schedule_;
  PGDiffSeg model_{nullptr};
  PGDiffSeg ema_{nullptr};
  std::unique_ptr<torch::optim::Optimizer> optimizer_;
  std::int64_t step_ = 0;
};

// Checkpoint contents needed for inference.
struct LoadedModel {
  PGDiffSeg model{nullptr};
  NoiseSchedule schedule;
  ModelConfig model_config;
  TrainConfig train_config;
  std::int64_t step = 0;
  bool ema = false;
};

// Loads a checkpoint in eval mode; prefers EMA weights when present.
LoadedModel load_checkpoint(const std::filesystem::path& path, bool prefer_ema = true);

// Network-backed denoiser: eval mode, no autograd.
Denoiser model_denoiser(PGDiffSeg model);

}  // namespace pgdiffseg
