#include "pgdiffseg/losses.hpp"

#include <cmath>

#include <torch/torch.h>

#include "pgdiffseg/errors.hpp"

namespace pgdiffseg {

void LossWeights::validate() const {
  if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0)) {
    throw InvalidArgument("loss weights must be non-negative");
  }
  if (!(dice_epsilon > 0.0)) throw InvalidArgument("dice_epsilon must be > 0");
}

namespace {

void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (!a.sizes().equals(b.sizes())) {
    throw InvalidArgument(std::string(what) + ": shape mismatch");
  }
}

torch::Tensor clamp_prob(const torch::Tensor& p) {
  return p.clamp(kProbabilityFloor, 1.0 - kProbabilityFloor);
}

torch::Tensor binary_xent_terms(const torch::Tensor& y, const torch::Tensor& p) {
  auto pc = clamp_prob(p);
  return y * torch::log(pc) + (1.0 - y) * torch::log(1.0 - pc);
}

}  // namespace

torch::Tensor mse_loss(const torch::Tensor& x, const torch::Tensor& y) {
  require_same_shape(x, y, "mse_loss");
  return (x - y).square().mean();
}

torch::Tensor ce_loss(const torch::Tensor& p, const torch::Tensor& y) {
  require_same_shape(p, y, "ce_loss");
  if (p.numel() == 0) throw InvalidArgument("ce_loss: empty batch");
  return -binary_xent_terms(y, p).mean();
}

torch::Tensor dice_loss(const torch::Tensor& y, const torch::Tensor& y_hat, double epsilon) {
  require_same_shape(y, y_hat, "dice_loss");
  auto inter = (y * y_hat).sum();
  return 1.0 - (2.0 * inter + epsilon) / (y.sum() + y_hat.sum() + epsilon);
}

torch::Tensor bce_loss(const torch::Tensor& y, const torch::Tensor& y_hat) {
  require_same_shape(y, y_hat, "bce_loss");
  return -binary_xent_terms(y, y_hat).sum();
}

torch::Tensor total_loss(const LossComponents& parts, const LossWeights& weights) {
  const std::pair<const char*, const torch::Tensor*> named[] = {
      {"mse", &parts.mse}, {"ce", &parts.ce}, {"dice", &parts.dice}, {"bce", &parts.bce}};
  for (const auto& [name, t] : named) {
    if (!t->defined() || !std::isfinite(t->item<double>())) {
      throw TrainingAborted(name, std::string("non-finite loss component: ") + name);
    }
  }
  return parts.mse + weights.lambda1 * parts.ce + weights.lambda2 * (parts.dice + parts.bce);
}

double total_loss(double mse, double ce, double dice, double bce, const LossWeights& weights) {
  const std::pair<const char*, double> named[] = {
      {"mse", mse}, {"ce", ce}, {"dice", dice}, {"bce", bce}};
  for (const auto& [name, v] : named) {
    if (!std::isfinite(v)) {
      throw TrainingAborted(name, std::string("non-finite loss component: ") + name);
    }
  }
  return mse + weights.lambda1 * ce + weights.lambda2 * (dice + bce);
}

}  // namespace pgdiffseg
