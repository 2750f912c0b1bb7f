#include "pgdiffseg/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <ATen/CPUGeneratorImpl.h>

#include "pgdiffseg/archive.hpp"
#include "pgdiffseg/config.hpp"
#include "pgdiffseg/errors.hpp"
#include "pgdiffseg/evaluation.hpp"
#include "pgdiffseg/logging.hpp"
#include "pgdiffseg/sampler.hpp"

namespace fs = std::filesystem;

namespace pgdiffseg {

std::string to_string(OptimizerKind k) { return k == OptimizerKind::adamw ? "adamw" : "adam"; }

OptimizerKind optimizer_kind_from_string(const std::string& s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "adamw") return OptimizerKind::adamw;
  throw InvalidArgument("unknown optimizer '" + s + "' (adam, adamw)");
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw InvalidArgument("learning_rate must be > 0");
  if (epochs < 0 || max_steps < 0) throw InvalidArgument("epochs and max_steps must be >= 0");
  if (epochs == 0 && max_steps == 0) throw InvalidArgument("need epochs > 0 or max_steps > 0");
  if (ema_decay && !(*ema_decay > 0.0 && *ema_decay < 1.0)) {
    throw InvalidArgument("ema_decay must lie in (0, 1)");
  }
  if (grad_clip && !(*grad_clip > 0.0)) throw InvalidArgument("grad_clip must be > 0");
  if (weight_decay < 0.0) throw InvalidArgument("weight_decay must be >= 0");
  if (checkpoint_interval < 0 || validation_interval < 0 || log_interval < 0) {
    throw InvalidArgument("intervals must be >= 0");
  }
  if (validation_images < 0) throw InvalidArgument("validation_images must be >= 0");
  if (diffusion_steps < 1) throw InvalidArgument("diffusion steps must be >= 1");
  if (validation_nfe < 1) throw InvalidArgument("validation_nfe must be >= 1");
  if (prior_pretrain_steps < 0) throw InvalidArgument("prior_pretrain_steps must be >= 0");
  loss.validate();
}

nlohmann::json to_json(const StepRecord& r) {
  return {{"type", "step"},     {"step", r.step}, {"epoch", r.epoch},   {"mse", r.mse},
          {"ce", r.ce},         {"dice", r.dice}, {"bce", r.bce},       {"total", r.total},
          {"grad_norm", r.grad_norm}, {"prior_only", r.prior_only}};
}

nlohmann::json to_json(const ValidationRecord& r) {
  return {{"type", "validation"}, {"step", r.step},   {"mean_dsc", r.mean_dsc},
          {"images", r.images},   {"nfe", r.nfe},     {"sampler", "ddim"}};
}

Trainer::Trainer(ModelConfig model_config, TrainConfig config)
    : model_cfg_(std::move(model_config)), cfg_(std::move(config)) {
  model_cfg_.validate();
  cfg_.validate();
  schedule_ = make_linear_schedule(cfg_.diffusion_steps, cfg_.variance);
  torch::manual_seed(derive_seed(cfg_.seed, 0xC0FFEE));
  model_ = PGDiffSeg(model_cfg_);
  model_->train();
  if (cfg_.ema_decay) ema_ = clone_model(model_);
  make_optimizer();
}

void Trainer::make_optimizer() {
  if (cfg_.optimizer == OptimizerKind::adamw) {
    optimizer_ = std::make_unique<torch::optim::AdamW>(
        model_->parameters(),
        torch::optim::AdamWOptions(cfg_.learning_rate).weight_decay(cfg_.weight_decay));
  } else {
    optimizer_ = std::make_unique<torch::optim::Adam>(
        model_->parameters(),
        torch::optim::AdamOptions(cfg_.learning_rate).weight_decay(cfg_.weight_decay));
  }
}

namespace {

// Localisation target: nearest-neighbour downsample of the mask.
torch::Tensor loc_target(const torch::Tensor& masks, const torch::Tensor& loc_logit) {
  namespace F = torch::nn::functional;
  return F::interpolate(masks, F::InterpolateFuncOptions()
                                   .size(std::vector<int64_t>{loc_logit.size(2), loc_logit.size(3)})
                                   .mode(torch::kNearest));
}

}  // namespace

StepRecord Trainer::train_step(const Batch& batch) {
  const auto& images = batch.images;
  const auto& masks = batch.masks;
  if (images.dim() != 4 || !images.sizes().equals(masks.sizes())) {
    throw InvalidArgument("train_step: images and masks must be [B, 1, H, W] with equal shape");
  }
  const int64_t B = images.size(0);
  const bool prior_only = step_ < cfg_.prior_pretrain_steps;

  auto gen = at::make_generator<at::CPUGeneratorImpl>(derive_seed(cfg_.seed, step_));
  const auto t = torch::randint(1, schedule_.steps() + 1, {B}, gen, torch::kInt64);
  const auto eps = torch::randn(masks.sizes(), gen, masks.options());
  const auto t_vec = std::vector<int>(t.data_ptr<int64_t>(), t.data_ptr<int64_t>() + B);
  const auto x0 = mask_to_signal(masks);
  const auto x_t = q_sample(x0, t_vec, eps, schedule_);

  model_->train();
  optimizer_->zero_grad();
  LossComponents parts;
  PriorOutput prior;
  if (prior_only) {
    prior = model_->prior->forward(images);
    parts.mse = torch::zeros({}, images.options());
  } else {
    auto out = model_->forward(x_t, images, t);
    prior = out.prior;
    parts.mse = pgdiffseg::mse_loss(out.eps_hat, eps);
  }
  parts.ce = ce_loss(torch::sigmoid(prior.class_logit), batch.has_tumor.to(images.dtype()));
  const auto y_loc = loc_target(masks, prior.loc_logit);
  const auto p_loc = torch::sigmoid(prior.loc_logit);
  std::vector<torch::Tensor> dice, bce;
  for (int64_t b = 0; b < B; ++b) {
    dice.push_back(dice_loss(y_loc[b], p_loc[b], cfg_.loss.dice_epsilon));
    bce.push_back(bce_loss(y_loc[b], p_loc[b]));
  }
  parts.dice = torch::stack(dice).mean();
  parts.bce = torch::stack(bce).mean();
  auto total = total_loss(parts, cfg_.loss);
  total.backward();

  double grad_norm = 0.0;
  {
    std::vector<torch::Tensor> grads;
    for (const auto& p : model_->parameters()) {
      if (p.grad().defined()) grads.push_back(p.grad().norm().square());
    }
    if (!grads.empty()) grad_norm = std::sqrt(torch::stack(grads).sum().item<double>());
  }
  if (!std::isfinite(grad_norm)) throw TrainingAborted("grad", "non-finite gradient norm");
  if (cfg_.grad_clip) torch::nn::utils::clip_grad_norm_(model_->parameters(), *cfg_.grad_clip);
  optimizer_->step();
  ++step_;
  update_ema();

  StepRecord rec;
  rec.step = step_;
  rec.mse = parts.mse.item<double>();
  rec.ce = parts.ce.item<double>();
  rec.dice = parts.dice.item<double>();
  rec.bce = parts.bce.item<double>();
  rec.total = total.item<double>();
  rec.grad_norm = grad_norm;
  rec.prior_only = prior_only;
  return rec;
}

void Trainer::update_ema() {
  if (!ema_) return;
  torch::NoGradGuard guard;
  const double d = *cfg_.ema_decay;
  auto src = model_->named_parameters();
  for (auto& item : ema_->named_parameters()) {
    item.value().mul_(d).add_(src[item.key()], 1.0 - d);
  }
  auto bufs = model_->named_buffers();
  for (auto& item : ema_->named_buffers()) item.value().copy_(bufs[item.key()]);
}

void Trainer::set_stopping_point(int epochs, std::int64_t max_steps) {
  auto c = cfg_;
  c.epochs = epochs;
  c.max_steps = max_steps;
  c.validate();
  cfg_ = c;
}

PGDiffSeg Trainer::sampling_model() const {
  auto m = ema_ ? ema_ : model_;
  return m;
}

std::vector<std::size_t> Trainer::epoch_order(std::int64_t epoch, std::size_t n) const {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(derive_seed(cfg_.seed ^ 0x5EEDULL, static_cast<std::uint64_t>(epoch)));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

ValidationRecord Trainer::validate(const std::vector<Sample>& val) {
  ValidationRecord rec;
  rec.step = step_;
  const auto n = std::min<std::size_t>(val.size(), static_cast<std::size_t>(cfg_.validation_images));
  if (n == 0) return rec;
  const std::vector<Sample> subset(val.begin(), val.begin() + static_cast<std::ptrdiff_t>(n));
  SamplerConfig sc;
  sc.kind = SamplerKind::ddim;
  sc.nfe = std::min(cfg_.validation_nfe, schedule_.steps());
  auto net = sampling_model();
  const auto metrics = evaluate(model_denoiser(net), subset, schedule_, sc,
                                {1, derive_seed(cfg_.seed, 0xDA7A), cfg_.batch_size});
  model_->train();
  rec.mean_dsc = metrics.mean_dsc;
  rec.images = static_cast<int>(n);
  rec.nfe = sc.nfe;
  return rec;
}

TrainResult Trainer::train_loop(const std::vector<Sample>& train_in, const std::vector<Sample>& val,
                                const fs::path& out_dir,
                                const std::function<void(const StepRecord&)>& on_step) {
  if (train_in.empty()) throw InvalidArgument("training split is empty");
  const auto train = cfg_.augment ? augment_sixfold(train_in) : train_in;
  const auto B = static_cast<std::size_t>(cfg_.batch_size);
  const auto steps_per_epoch = static_cast<std::int64_t>((train.size() + B - 1) / B);
  const std::int64_t total = cfg_.max_steps > 0 ? cfg_.max_steps : cfg_.epochs * steps_per_epoch;

  fs::create_directories(out_dir);
  TrainResult result;
  result.metrics_log = out_dir / "metrics.jsonl";
  result.checkpoint = out_dir / "checkpoint.pgds";
  std::ofstream log(result.metrics_log, std::ios::app);
  if (!log) throw IoError("cannot open metrics log " + result.metrics_log.string());

  log_info("training " + std::to_string(train.size()) + " samples, " +
           std::to_string(steps_per_epoch) + " steps/epoch, " + std::to_string(total) +
           " steps total, starting at step " + std::to_string(step_));
  const auto t0 = std::chrono::steady_clock::now();
  std::int64_t cached_epoch = -1;
  std::vector<std::size_t> order;
  while (step_ < total) {
    const std::int64_t epoch = step_ / steps_per_epoch;
    const std::int64_t pos = step_ % steps_per_epoch;
    if (epoch != cached_epoch) {
      order = epoch_order(epoch, train.size());
      cached_epoch = epoch;
    }
    std::vector<const Sample*> items;
    for (std::size_t i = static_cast<std::size_t>(pos) * B;
         i < std::min(train.size(), static_cast<std::size_t>(pos + 1) * B); ++i) {
      items.push_back(&train[order[i]]);
    }
    auto rec = train_step(collate(items));
    rec.epoch = epoch;
    log << to_json(rec).dump() << '\n';
    if (on_step) on_step(rec);
    if (cfg_.log_interval > 0 && (step_ % cfg_.log_interval == 0 || step_ == total)) {
      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::ostringstream os;
      os.precision(4);
      os << "step " << step_ << "/" << total << " epoch " << epoch << " total " << rec.total
         << " mse " << rec.mse << " ce " << rec.ce << " dice " << rec.dice << " bce " << rec.bce
         << " (" << secs << " s)";
      log_info(os.str());
    }
    const bool last = step_ == total;
    if (cfg_.validation_interval > 0 && !val.empty() &&
        (step_ % cfg_.validation_interval == 0 || last)) {
      auto v = validate(val);
      log << to_json(v).dump() << '\n';
      log.flush();
      log_info("validation at step " + std::to_string(step_) + ": mean DSC " +
               std::to_string(v.mean_dsc) + " (ddim nfe " + std::to_string(v.nfe) + ", " +
               std::to_string(v.images) + " images)");
      result.last_validation = v;
    }
    if ((cfg_.checkpoint_interval > 0 && step_ % cfg_.checkpoint_interval == 0) || last) {
      save_checkpoint(result.checkpoint);
      log.flush();
    }
  }
  if (!fs::exists(result.checkpoint)) save_checkpoint(result.checkpoint);
  result.steps = step_;
  return result;
}

namespace {

void put_module(TensorArchive& ar, const std::string& prefix, PGDiffSeg& m) {
  for (const auto& p : m->named_parameters()) ar.put(prefix + p.key(), p.value());
  for (const auto& b : m->named_buffers()) ar.put(prefix + b.key(), b.value());
}

void get_module(const TensorArchive& ar, const std::string& prefix, PGDiffSeg& m) {
  torch::NoGradGuard guard;
  auto assign = [&](const std::string& name, torch::Tensor& dst) {
    const auto& src = ar.get(prefix + name);
    if (!src.sizes().equals(dst.sizes())) {
      throw IoError("checkpoint tensor '" + prefix + name + "' has the wrong shape");
    }
    dst.copy_(src);
  };
  for (auto& p : m->named_parameters()) assign(p.key(), p.value());
  for (auto& b : m->named_buffers()) assign(b.key(), b.value());
}

nlohmann::json schedule_json(const NoiseSchedule& s) {
  return {{"steps", s.steps()},
          {"variance", to_string(s.variance_choice())},
          {"beta_start", kBetaStart},
          {"beta_end", kBetaEnd}};
}

}  // namespace

void Trainer::save_checkpoint(const fs::path& path) const {
  TensorArchive ar;
  auto model = model_;
  put_module(ar, "model/", model);
  if (ema_) {
    auto ema = ema_;
    put_module(ar, "ema/", ema);
  }
  torch::serialize::OutputArchive oa;
  optimizer_->save(oa);
  std::ostringstream os;
  oa.save_to(os);
  const auto blob = os.str();
  ar.put("optim/state", torch::from_blob(const_cast<char*>(blob.data()),
                                         {static_cast<int64_t>(blob.size())}, torch::kUInt8));
  ar.meta() = {{"kind", "pgdiffseg-checkpoint"},
               {"model_config", to_json(model_cfg_)},
               {"train_config", to_json(cfg_)},
               {"schedule", schedule_json(schedule_)},
               {"train_state", {{"step", step_}, {"seed", cfg_.seed}, {"ema", bool(ema_)}}}};
  // Write-then-rename so an interrupted save never clobbers the last good file.
  auto tmp = path;
  tmp += ".tmp";
  ar.save(tmp);
  fs::rename(tmp, path);
}

namespace {

TensorArchive load_archive(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("checkpoint not found: " + path.string());
  auto ar = TensorArchive::load(path);
  if (ar.meta().value("kind", "") != "pgdiffseg-checkpoint") {
    throw IoError(path.string() + " is not a model checkpoint");
  }
  return ar;
}

}  // namespace

Trainer Trainer::resume(const fs::path& path) {
  const auto ar = load_archive(path);
  const auto& meta = ar.meta();
  Trainer tr(model_config_from_json(meta.at("model_config")),
             train_config_from_json(meta.at("train_config")));
  get_module(ar, "model/", tr.model_);
  if (tr.ema_) {
    if (ar.contains("ema/time_mlp.0.weight")) {
      get_module(ar, "ema/", tr.ema_);
    } else {
      tr.ema_ = clone_model(tr.model_);
    }
  }
  const auto& blob = ar.get("optim/state");
  std::istringstream is(std::string(static_cast<const char*>(blob.data_ptr()),
                                    static_cast<std::size_t>(blob.numel())));
  torch::serialize::InputArchive ia;
  ia.load_from(is);
  tr.optimizer_->load(ia);
  tr.step_ = meta.at("train_state").at("step").get<std::int64_t>();
  return tr;
}

LoadedModel load_checkpoint(const fs::path& path, bool prefer_ema) {
  const auto ar = load_archive(path);
  const auto& meta = ar.meta();
  LoadedModel out;
  out.model_config = model_config_from_json(meta.at("model_config"));
  out.train_config = train_config_from_json(meta.at("train_config"));
  out.schedule = make_linear_schedule(meta.at("schedule").at("steps").get<int>(),
                                      variance_choice_from_string(meta.at("schedule").at("variance")));
  out.step = meta.at("train_state").at("step").get<std::int64_t>();
  out.model = PGDiffSeg(out.model_config);
  out.ema = prefer_ema && meta.at("train_state").value("ema", false);
  get_module(ar, out.ema ? "ema/" : "model/", out.model);
  out.model->eval();
  return out;
}

Denoiser model_denoiser(PGDiffSeg model) {
  return [model](const torch::Tensor& x_t, const torch::Tensor& image, int t) mutable {
    torch::NoGradGuard guard;
    const bool was_training = model->is_training();
    model->eval();
    auto eps = model->predict_eps(x_t, image, t);
    if (was_training) model->train();
    return eps;
  };
}

}  // namespace pgdiffseg
