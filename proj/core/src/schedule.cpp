#include "pgdiffseg/schedule.hpp"

#include <cmath>

#include <torch/torch.h>

#include "pgdiffseg/errors.hpp"

namespace pgdiffseg {

std::string to_string(VarianceChoice v) {
  return v == VarianceChoice::beta ? "beta" : "beta_tilde";
}

VarianceChoice variance_choice_from_string(const std::string& s) {
  if (s == "beta") return VarianceChoice::beta;
  if (s == "beta_tilde") return VarianceChoice::beta_tilde;
  throw InvalidArgument("unknown variance choice '" + s + "' (expected beta or beta_tilde)");
}

NoiseSchedule make_linear_schedule(int steps, VarianceChoice v) {
  if (steps < 1) throw InvalidArgument("schedule needs T >= 1, got " + std::to_string(steps));
  NoiseSchedule s;
  s.variance_choice_ = v;
  const auto n = static_cast<std::size_t>(steps);
  s.betas_.resize(n);
  s.alphas_.resize(n);
  s.alpha_bars_.resize(n);
  s.beta_tildes_.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    // Convex combination keeps both endpoints exact.
    const double f = n == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(n - 1);
    s.betas_[i] = kBetaStart * (1.0 - f) + kBetaEnd * f;
  }
  double prod = 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    s.alphas_[i] = 1.0 - s.betas_[i];
    const double prev = prod;
    prod *= s.alphas_[i];
    s.alpha_bars_[i] = prod;
    s.beta_tildes_[i] = (1.0 - prev) / (1.0 - prod) * s.betas_[i];
  }
  return s;
}

void NoiseSchedule::check_step(int t) const {
  if (t < 1 || t > steps()) {
    throw InvalidArgument("timestep " + std::to_string(t) + " outside 1.." +
                          std::to_string(steps()));
  }
}

std::size_t NoiseSchedule::index(int t) const {
  check_step(t);
  return static_cast<std::size_t>(t - 1);
}

double NoiseSchedule::alpha_bar(int t) const {
  if (t == 0) return 1.0;
  return alpha_bars_[index(t)];
}

double NoiseSchedule::variance(int t) const {
  return variance_choice_ == VarianceChoice::beta ? beta(t) : beta_tilde(t);
}

double NoiseSchedule::sigma(int t) const { return std::sqrt(variance(t)); }

NoiseSchedule NoiseSchedule::with_variance(VarianceChoice v) const {
  NoiseSchedule copy = *this;
  copy.variance_choice_ = v;
  return copy;
}

namespace {

void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (!a.sizes().equals(b.sizes())) {
    throw InvalidArgument(std::string(what) + ": shape mismatch");
  }
}

}  // namespace

torch::Tensor q_sample(const torch::Tensor& x0, int t, const torch::Tensor& eps,
                       const NoiseSchedule& schedule) {
  require_same_shape(x0, eps, "q_sample");
  schedule.check_step(t);
  const double ab = schedule.alpha_bar(t);
  return x0 * std::sqrt(ab) + eps * std::sqrt(1.0 - ab);
}

torch::Tensor q_sample(const torch::Tensor& x0, std::span<const int> t, const torch::Tensor& eps,
                       const NoiseSchedule& schedule) {
  require_same_shape(x0, eps, "q_sample");
  if (x0.dim() < 1 || static_cast<std::size_t>(x0.size(0)) != t.size()) {
    throw InvalidArgument("q_sample: one timestep per batch item required");
  }
  std::vector<double> signal(t.size()), noise(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    schedule.check_step(t[i]);
    const double ab = schedule.alpha_bar(t[i]);
    signal[i] = std::sqrt(ab);
    noise[i] = std::sqrt(1.0 - ab);
  }
  std::vector<int64_t> view(static_cast<std::size_t>(x0.dim()), 1);
  view[0] = x0.size(0);
  auto opts = torch::TensorOptions().dtype(torch::kFloat64);
  auto a = torch::tensor(signal, opts).to(x0.dtype()).view(view);
  auto b = torch::tensor(noise, opts).to(x0.dtype()).view(view);
  return a * x0 + b * eps;
}

torch::Tensor mu_from_eps(const torch::Tensor& x_t, int t, const torch::Tensor& eps_hat,
                          const NoiseSchedule& schedule) {
  require_same_shape(x_t, eps_hat, "mu_from_eps");
  schedule.check_step(t);
  const double coef = schedule.beta(t) / std::sqrt(1.0 - schedule.alpha_bar(t));
  return (x_t - eps_hat * coef) * (1.0 / std::sqrt(schedule.alpha(t)));
}

torch::Tensor reverse_step(const torch::Tensor& x_t, int t, const torch::Tensor& eps_hat,
                           const torch::Tensor& z, const NoiseSchedule& schedule) {
  require_same_shape(x_t, z, "reverse_step");
  auto mean = mu_from_eps(x_t, t, eps_hat, schedule);
  if (t == 1) {
    if (z.numel() > 0 && z.abs().max().item<double>() != 0.0) {
      throw InvalidArgument("reverse_step: noise must be zero at t = 1");
    }
    return mean;
  }
  return mean + z * schedule.sigma(t);
}

torch::Tensor eps_from_x0(const torch::Tensor& x_t, int t, const torch::Tensor& x0,
                          const NoiseSchedule& schedule) {
  require_same_shape(x_t, x0, "eps_from_x0");
  schedule.check_step(t);
  const double ab = schedule.alpha_bar(t);
  return (x_t - x0 * std::sqrt(ab)) * (1.0 / std::sqrt(1.0 - ab));
}

torch::Tensor x0_from_eps(const torch::Tensor& x_t, int t, const torch::Tensor& eps_hat,
                          const NoiseSchedule& schedule) {
  require_same_shape(x_t, eps_hat, "x0_from_eps");
  schedule.check_step(t);
  const double ab = schedule.alpha_bar(t);
  return (x_t - eps_hat * std::sqrt(1.0 - ab)) * (1.0 / std::sqrt(ab));
}

}  // namespace pgdiffseg
