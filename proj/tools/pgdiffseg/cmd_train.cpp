#include <iostream>
#include <memory>

#include "commands.hpp"
#include "common.hpp"
#include "pgdiffseg/logging.hpp"

namespace pgdiffseg::cli {

namespace {

struct TrainOptions {
  CommonOptions common;
  DataOptions data;
  std::string resume;
  std::optional<int> epochs, batch_size, steps, base_channels, image_size, validation_images;
  std::optional<std::int64_t> max_steps, prior_pretrain_steps;
  std::optional<double> lr, lambda1, lambda2, ema, grad_clip;
  std::string variance, psa_placement;
  bool augment = false;
};

int run_train(const TrainOptions& o) {
  apply_log_level(o.common.log_level);
  RunConfig cfg = base_config(o.common);
  std::optional<Trainer> trainer;
  if (!o.resume.empty()) {
    trainer.emplace(Trainer::resume(o.resume));
    cfg.model = trainer->model_config();
    cfg.train = trainer->config();
  }
  auto& t = cfg.train;
  if (o.epochs) t.epochs = *o.epochs;
  if (o.max_steps) t.max_steps = *o.max_steps;
  if (trainer) {
    // Everything but the stopping point is pinned by the checkpoint so the
    // continuation matches the uninterrupted run.
    trainer->set_stopping_point(t.epochs, t.max_steps);
  } else {
    if (o.common.seed) t.seed = *o.common.seed;
    if (o.batch_size) t.batch_size = *o.batch_size;
    if (o.lr) t.learning_rate = *o.lr;
    if (o.lambda1) t.loss.lambda1 = *o.lambda1;
    if (o.lambda2) t.loss.lambda2 = *o.lambda2;
    if (o.ema) t.ema_decay = *o.ema;
    if (o.grad_clip) t.grad_clip = *o.grad_clip;
    if (o.steps) t.diffusion_steps = *o.steps;
    if (!o.variance.empty()) t.variance = variance_choice_from_string(o.variance);
    if (o.prior_pretrain_steps) t.prior_pretrain_steps = *o.prior_pretrain_steps;
    if (o.validation_images) t.validation_images = *o.validation_images;
    if (o.augment) t.augment = true;
    if (o.base_channels) {
      cfg.model.base_channels = *o.base_channels;
      cfg.model.level_channels = ModelConfig::with_base(*o.base_channels, 16).level_channels;
    }
    if (o.image_size) cfg.model.image_size = *o.image_size;
    if (!o.psa_placement.empty()) {
      cfg.model.psa_placement = psa_placement_from_string(o.psa_placement);
    }
  }
  apply_data_flags(cfg, o.data);
  cfg.validate();

  const auto splits = load_data(cfg, o.data.data_seed.value_or(cfg.train.seed));
  const auto dir = run_dir(o.common, "train", cfg);
  write_text(dir / "config.yaml", dump_run_config(cfg));
  log_info("writing run artifacts to " + dir.string());

  if (!trainer) trainer.emplace(cfg.model, cfg.train);
  const auto result = trainer->train_loop(splits.train, splits.val, dir);

  std::cout << "checkpoint: " << result.checkpoint.string() << "\n";
  std::cout << "metrics: " << result.metrics_log.string() << "\n";
  std::cout << "steps: " << result.steps << "\n";
  if (result.last_validation) {
    std::cout << "final validation DSC: " << result.last_validation->mean_dsc << " ("
              << result.last_validation->images << " images, ddim nfe "
              << result.last_validation->nfe << ")\n";
  } else {
    std::cout << "final validation DSC: n/a (no validation images)\n";
  }
  return 0;
}

}  // namespace

void register_train(CLI::App& app, Command& run) {
  auto opts = std::make_shared<TrainOptions>();
  auto* cmd = app.add_subcommand("train", "Train a model and write a checkpoint");
  add_common(*cmd, opts->common);
  add_data(*cmd, opts->data, false);
  cmd->add_option("--resume", opts->resume, "Continue from a checkpoint")->check(CLI::ExistingFile);
  cmd->add_option("--epochs", opts->epochs, "Training epochs");
  cmd->add_option("--max-steps", opts->max_steps, "Stop after this many optimiser steps");
  cmd->add_option("--batch-size", opts->batch_size, "Batch size");
  cmd->add_option("--lr", opts->lr, "Learning rate");
  cmd->add_option("--lambda1", opts->lambda1, "Weight of the tumour-presence loss");
  cmd->add_option("--lambda2", opts->lambda2, "Weight of the localisation losses");
  cmd->add_option("--ema", opts->ema, "EMA decay of the sampling weights (off by default)");
  cmd->add_option("--grad-clip", opts->grad_clip, "Clip the global gradient norm");
  cmd->add_option("--steps", opts->steps, "Diffusion steps T");
  cmd->add_option("--variance", opts->variance, "Reverse variance: beta or beta_tilde")
      ->check(CLI::IsMember({"beta", "beta_tilde"}));
  cmd->add_option("--base-channels", opts->base_channels, "Width of the first level");
  cmd->add_option("--image-size", opts->image_size, "Training resolution (multiple of 16)");
  cmd->add_option("--psa-placement", opts->psa_placement, "pre_downsample or post_downsample")
      ->check(CLI::IsMember({"pre_downsample", "post_downsample"}));
  cmd->add_option("--prior-pretrain-steps", opts->prior_pretrain_steps,
                  "Optimise only the prior branch for the first N steps");
  cmd->add_option("--val-images", opts->validation_images, "Validation images per check");
  cmd->add_flag("--augment", opts->augment, "Six-fold flip/rotation augmentation");
  cmd->callback([opts, &run] { run = [opts] { return run_train(*opts); }; });
}

}  // namespace pgdiffseg::cli
