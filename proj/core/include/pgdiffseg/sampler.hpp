#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <torch/types.h>

#include "pgdiffseg/schedule.hpp"

namespace pgdiffseg {

// (x_t, image, t) -> predicted noise, same shape as x_t.
using Denoiser =
    std::function<torch::Tensor(const torch::Tensor& x_t, const torch::Tensor& image, int t)>;

// Called with the state reached after each update; `t` is the timestep the
// state belongs to (0 for the final output).
using StepObserver = std::function<void(int t, const torch::Tensor& x)>;

enum class SamplerKind { ancestral, ddim, dpm2 };

std::string to_string(SamplerKind k);
SamplerKind sampler_kind_from_string(const std::string& s);

struct SamplerConfig {
  SamplerKind kind = SamplerKind::ancestral;
  int nfe = 0;  // 0 means "every step" (T)
  double eta = 0.0;
  std::uint64_t seed = 0;
  double binarize_threshold = 0.0;

  // Resolves nfe = 0 and checks the kind-specific invariants.
  SamplerConfig resolved(const NoiseSchedule& schedule) const;
};

// splitmix64 of (seed, index); used for per-image and per-repeat seeds.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

// Per-item unit Gaussian noise: item i of the batch draws from its own stream,
// so a sample depends only on its own seed.
class NoiseSource {
 public:
  explicit NoiseSource(std::span<const std::uint64_t> item_seeds);
  torch::Tensor draw(at::IntArrayRef item_shape, torch::ScalarType dtype);
  std::size_t items() const noexcept { return generators_.size(); }

 private:
  std::vector<at::Generator> generators_;
};

// Timesteps T = tau_0 > tau_1 > ... > tau_{n-1} = 1, uniformly strided
// (rounded linspace); n = 1 gives {T}.
std::vector<int> strided_timesteps(int steps, int count);

// Deterministic/stochastic DDIM update from t to s < t (s = 0 allowed).
torch::Tensor ddim_step(const torch::Tensor& x_t, int t, int s, const torch::Tensor& eps_hat,
                        double eta, const torch::Tensor& z, const NoiseSchedule& schedule);

// Second-order (DPM-Solver-2 style) step from t to s with one intermediate
// denoiser evaluation at `mid` (s <= mid < t); `denoise` is called exactly once.
torch::Tensor dpm2_step(const torch::Tensor& x_t, int t, int s, int mid,
                        const torch::Tensor& eps_t,
                        const std::function<torch::Tensor(const torch::Tensor&, int)>& denoise,
                        const NoiseSchedule& schedule);

// Grid of nfe / 2 + 1 points from T down to 1 used by the dpm2 sampler.
std::vector<int> dpm2_grid(int steps, int nfe);

// item_seeds has one entry per batch item of `image`.
torch::Tensor ancestral_sample(const Denoiser& denoiser, const torch::Tensor& image,
                               const NoiseSchedule& schedule,
                               std::span<const std::uint64_t> item_seeds,
                               const StepObserver& observe = {});

torch::Tensor ddim_sample(const Denoiser& denoiser, const torch::Tensor& image,
                          const NoiseSchedule& schedule, const SamplerConfig& config,
                          std::span<const std::uint64_t> item_seeds,
                          const StepObserver& observe = {});

// Ends at t = 1 (noise level sqrt(beta_1)) rather than 0.
torch::Tensor dpm2_sample(const Denoiser& denoiser, const torch::Tensor& image,
                          const NoiseSchedule& schedule, const SamplerConfig& config,
                          std::span<const std::uint64_t> item_seeds,
                          const StepObserver& observe = {});

// Dispatches on config.kind.
torch::Tensor sample(const Denoiser& denoiser, const torch::Tensor& image,
                     const NoiseSchedule& schedule, const SamplerConfig& config,
                     std::span<const std::uint64_t> item_seeds, const StepObserver& observe = {});

// Timesteps reported to a StepObserver, in order, starting with T.
std::vector<int> trajectory_steps(const NoiseSchedule& schedule, const SamplerConfig& config);

// Seeds for a batch: derive_seed(seed, first_index + i).
std::vector<std::uint64_t> item_seeds(std::uint64_t seed, std::size_t first_index,
                                      std::size_t count);

// 1 where x0 > threshold (strict), else 0; float tensor.
torch::Tensor binarize(const torch::Tensor& x0, double threshold = 0.0);

}  // namespace pgdiffseg
