#pragma once

#include <string>

#include <torch/types.h>

namespace pgdiffseg {

inline constexpr double kProbabilityFloor = 1e-7;

struct LossWeights {
  double lambda1 = 1.0;  // tumour-presence cross-entropy
  double lambda2 = 1.0;  // localisation dice + BCE
  double dice_epsilon = 1e-6;

  void validate() const;
};

// Mean squared elementwise difference.
torch::Tensor mse_loss(const torch::Tensor& x, const torch::Tensor& y);

// Mean binary cross-entropy over N items; p is clamped to [floor, 1 - floor].
torch::Tensor ce_loss(const torch::Tensor& p, const torch::Tensor& y);

// 1 - (2 sum(y * y_hat) + eps) / (sum(y) + sum(y_hat) + eps).
torch::Tensor dice_loss(const torch::Tensor& y, const torch::Tensor& y_hat, double epsilon);

// Summed (not averaged) binary cross-entropy over every pixel, minus sign
// applied to both terms.
torch::Tensor bce_loss(const torch::Tensor& y, const torch::Tensor& y_hat);

struct LossComponents {
  torch::Tensor mse, ce, dice, bce;
};

// mse + lambda1 * ce + lambda2 * (dice + bce). Throws TrainingAborted naming
// the first non-finite component.
torch::Tensor total_loss(const LossComponents& parts, const LossWeights& weights);

// Scalar convenience for plain numbers.
double total_loss(double mse, double ce, double dice, double bce, const LossWeights& weights);

}  // namespace pgdiffseg
