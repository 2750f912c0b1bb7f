#pragma once

#include <span>
#include <string>
#include <vector>

#include <torch/types.h>

namespace pgdiffseg {

enum class VarianceChoice { beta, beta_tilde };

std::string to_string(VarianceChoice v);
VarianceChoice variance_choice_from_string(const std::string& s);

inline constexpr double kBetaStart = 1e-4;
inline constexpr double kBetaEnd = 2e-2;

// Forward-process coefficients for T steps. The public API is 1-based in t
// (t = 1..T); alpha_bar(0) is defined as 1 so that beta_tilde(1) = 0.
// Immutable after construction; all values are 64-bit.
class NoiseSchedule {
 public:
  int steps() const noexcept { return static_cast<int>(betas_.size()); }

  double beta(int t) const { return betas_[index(t)]; }
  double alpha(int t) const { return alphas_[index(t)]; }
  double alpha_bar(int t) const;  // accepts t = 0
  double beta_tilde(int t) const { return beta_tildes_[index(t)]; }
  // sigma_t^2 under the configured variance choice.
  double variance(int t) const;
  double sigma(int t) const;

  VarianceChoice variance_choice() const noexcept { return variance_choice_; }
  NoiseSchedule with_variance(VarianceChoice v) const;

  std::span<const double> betas() const noexcept { return betas_; }
  std::span<const double> alphas() const noexcept { return alphas_; }
  std::span<const double> alpha_bars() const noexcept { return alpha_bars_; }
  std::span<const double> beta_tildes() const noexcept { return beta_tildes_; }

  // Throws InvalidArgument unless 1 <= t <= T.
  void check_step(int t) const;

  friend NoiseSchedule make_linear_schedule(int steps, VarianceChoice v);

 private:
  std::size_t index(int t) const;

  std::vector<double> betas_;
  std::vector<double> alphas_;
  std::vector<double> alpha_bars_;
  std::vector<double> beta_tildes_;
  VarianceChoice variance_choice_ = VarianceChoice::beta;
};

// Betas evenly spaced from 1e-4 to 2e-2 inclusive; T = 1 yields {1e-4}.
NoiseSchedule make_linear_schedule(int steps, VarianceChoice v = VarianceChoice::beta);

// sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps.
torch::Tensor q_sample(const torch::Tensor& x0, int t, const torch::Tensor& eps,
                       const NoiseSchedule& schedule);
// Per-item timesteps along dim 0 of x0.
torch::Tensor q_sample(const torch::Tensor& x0, std::span<const int> t, const torch::Tensor& eps,
                       const NoiseSchedule& schedule);

// Posterior mean under the epsilon parameterisation.
torch::Tensor mu_from_eps(const torch::Tensor& x_t, int t, const torch::Tensor& eps_hat,
                          const NoiseSchedule& schedule);

// mu_from_eps + sigma_t * z.  z must be all zeros at t = 1.
torch::Tensor reverse_step(const torch::Tensor& x_t, int t, const torch::Tensor& eps_hat,
                           const torch::Tensor& z, const NoiseSchedule& schedule);

// Epsilon implied by (x_t, x0) at step t; inverse of q_sample.
torch::Tensor eps_from_x0(const torch::Tensor& x_t, int t, const torch::Tensor& x0,
                          const NoiseSchedule& schedule);
// Clean-signal estimate implied by a noise prediction.
torch::Tensor x0_from_eps(const torch::Tensor& x_t, int t, const torch::Tensor& eps_hat,
                          const NoiseSchedule& schedule);

}  // namespace pgdiffseg
