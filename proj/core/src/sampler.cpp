#include "pgdiffseg/sampler.hpp"

#include <algorithm>
#include <cmath>

#include <ATen/CPUGeneratorImpl.h>
#include <torch/torch.h>

#include "pgdiffseg/errors.hpp"

namespace pgdiffseg {

std::string to_string(SamplerKind k) {
  switch (k) {
    case SamplerKind::ancestral: return "ancestral";
    case SamplerKind::ddim: return "ddim";
    case SamplerKind::dpm2: return "dpm2";
  }
  return "?";
}

SamplerKind sampler_kind_from_string(const std::string& s) {
  if (s == "ancestral") return SamplerKind::ancestral;
  if (s == "ddim") return SamplerKind::ddim;
  if (s == "dpm2") return SamplerKind::dpm2;
  throw InvalidArgument("unknown sampler kind '" + s + "' (ancestral, ddim, dpm2)");
}

SamplerConfig SamplerConfig::resolved(const NoiseSchedule& schedule) const {
  SamplerConfig c = *this;
  const int T = schedule.steps();
  if (c.nfe == 0) c.nfe = T;
  if (c.nfe < 1) throw InvalidArgument("nfe must be positive");
  if (c.nfe > T) {
    throw InvalidArgument("nfe " + std::to_string(c.nfe) + " exceeds T = " + std::to_string(T));
  }
  if (c.kind == SamplerKind::ancestral && c.nfe != T) {
    throw InvalidArgument("ancestral sampling uses every step (nfe must equal T)");
  }
  if (c.kind == SamplerKind::dpm2 && c.nfe % 2 != 0) {
    throw InvalidArgument("dpm2 needs an even nfe, got " + std::to_string(c.nfe));
  }
  if (!(c.eta >= 0.0 && c.eta <= 1.0)) throw InvalidArgument("eta must lie in [0, 1]");
  return c;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::vector<std::uint64_t> item_seeds(std::uint64_t seed, std::size_t first_index,
                                      std::size_t count) {
  std::vector<std::uint64_t> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = derive_seed(seed, first_index + i);
  return out;
}

NoiseSource::NoiseSource(std::span<const std::uint64_t> seeds) {
  generators_.reserve(seeds.size());
  for (auto s : seeds) generators_.push_back(at::make_generator<at::CPUGeneratorImpl>(s));
}

torch::Tensor NoiseSource::draw(at::IntArrayRef item_shape, torch::ScalarType dtype) {
  std::vector<torch::Tensor> items;
  items.reserve(generators_.size());
  auto opts = torch::TensorOptions().dtype(dtype);
  for (auto& g : generators_) items.push_back(torch::randn(item_shape, g, opts));
  return torch::stack(items);
}

std::vector<int> strided_timesteps(int steps, int count) {
  if (count < 1 || count > steps) {
    throw InvalidArgument("cannot pick " + std::to_string(count) + " timesteps from " +
                          std::to_string(steps));
  }
  std::vector<int> ts(static_cast<std::size_t>(count));
  if (count == 1) {
    ts[0] = steps;
    return ts;
  }
  const double stride = static_cast<double>(steps - 1) / static_cast<double>(count - 1);
  for (int i = 0; i < count; ++i) {
    ts[static_cast<std::size_t>(i)] = static_cast<int>(std::lround(steps - i * stride));
  }
  return ts;
}

torch::Tensor ddim_step(const torch::Tensor& x_t, int t, int s, const torch::Tensor& eps_hat,
                        double eta, const torch::Tensor& z, const NoiseSchedule& schedule) {
  schedule.check_step(t);
  if (s < 0 || s >= t) throw InvalidArgument("ddim_step needs 0 <= s < t");
  const double ab_t = schedule.alpha_bar(t);
  const double ab_s = schedule.alpha_bar(s);
  auto x0 = (x_t - eps_hat * std::sqrt(1.0 - ab_t)) * (1.0 / std::sqrt(ab_t));
  const double sigma =
      eta * std::sqrt((1.0 - ab_s) / (1.0 - ab_t)) * std::sqrt(1.0 - ab_t / ab_s);
  const double dir = std::sqrt(std::max(0.0, 1.0 - ab_s - sigma * sigma));
  auto out = x0 * std::sqrt(ab_s) + eps_hat * dir;
  if (sigma > 0.0) {
    if (!z.defined() || !z.sizes().equals(x_t.sizes())) {
      throw InvalidArgument("ddim_step: stochastic step needs noise shaped like x_t");
    }
    out = out + z * sigma;
  }
  return out;
}

namespace {

struct NoiseLevel {
  double alpha, sigma, lambda;
};

NoiseLevel level_at(const NoiseSchedule& schedule, int t) {
  const double ab = schedule.alpha_bar(t);
  const double a = std::sqrt(ab), s = std::sqrt(1.0 - ab);
  return {a, s, std::log(a / s)};
}

// Integer timestep in [lo, hi] whose log-SNR is closest to `target`.
int closest_lambda(const NoiseSchedule& schedule, int lo, int hi, double target) {
  int best = lo;
  double best_d = std::abs(level_at(schedule, lo).lambda - target);
  for (int t = lo + 1; t <= hi; ++t) {
    const double d = std::abs(level_at(schedule, t).lambda - target);
    if (d < best_d) {
      best_d = d;
      best = t;
    }
  }
  return best;
}

void check_eps(const torch::Tensor& eps, const torch::Tensor& x) {
  if (!eps.defined() || !eps.sizes().equals(x.sizes())) {
    throw ContractViolation("denoiser returned a tensor whose shape differs from x_t");
  }
}

at::IntArrayRef item_shape_of(const torch::Tensor& x) { return x.sizes().slice(1); }

torch::Tensor initial_state(const torch::Tensor& image, NoiseSource& noise) {
  if (image.dim() != 4) throw InvalidArgument("sampler expects a [B, C, H, W] image batch");
  if (static_cast<std::size_t>(image.size(0)) != noise.items()) {
    throw InvalidArgument("one seed per image required");
  }
  const std::vector<int64_t> shape{1, image.size(2), image.size(3)};
  return noise.draw(shape, image.scalar_type());
}

}  // namespace

std::vector<int> dpm2_grid(int steps, int nfe) {
  if (nfe < 2 || nfe % 2 != 0) throw InvalidArgument("dpm2 needs an even nfe >= 2");
  return strided_timesteps(steps, nfe / 2 + 1);
}

torch::Tensor dpm2_step(const torch::Tensor& x_t, int t, int s, int mid,
                        const torch::Tensor& eps_t,
                        const std::function<torch::Tensor(const torch::Tensor&, int)>& denoise,
                        const NoiseSchedule& schedule) {
  schedule.check_step(t);
  schedule.check_step(s);
  if (!(s <= mid && mid < t)) throw InvalidArgument("dpm2_step needs s <= mid < t");
  const auto lt = level_at(schedule, t), ls = level_at(schedule, s), lm = level_at(schedule, mid);
  const double h = ls.lambda - lt.lambda;
  const double r = (lm.lambda - lt.lambda) / h;
  auto u = x_t * (lm.alpha / lt.alpha) - eps_t * (lm.sigma * std::expm1(r * h));
  auto eps_mid = denoise(u, mid);
  check_eps(eps_mid, x_t);
  const double phi = ls.sigma * std::expm1(h);
  return x_t * (ls.alpha / lt.alpha) - eps_t * phi - (eps_mid - eps_t) * (phi / (2.0 * r));
}

torch::Tensor ancestral_sample(const Denoiser& denoiser, const torch::Tensor& image,
                               const NoiseSchedule& schedule,
                               std::span<const std::uint64_t> seeds, const StepObserver& observe) {
  NoiseSource noise(seeds);
  auto x = initial_state(image, noise);
  if (observe) observe(schedule.steps(), x);
  for (int t = schedule.steps(); t >= 1; --t) {
    auto eps = denoiser(x, image, t);
    check_eps(eps, x);
    auto z = t > 1 ? noise.draw(item_shape_of(x), x.scalar_type()) : torch::zeros_like(x);
    x = reverse_step(x, t, eps, z, schedule);
    if (observe) observe(t - 1, x);
  }
  return x;
}

torch::Tensor ddim_sample(const Denoiser& denoiser, const torch::Tensor& image,
                          const NoiseSchedule& schedule, const SamplerConfig& config,
                          std::span<const std::uint64_t> seeds, const StepObserver& observe) {
  const auto cfg = config.resolved(schedule);
  NoiseSource noise(seeds);
  auto x = initial_state(image, noise);
  if (observe) observe(schedule.steps(), x);
  const auto ts = strided_timesteps(schedule.steps(), cfg.nfe);
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const int t = ts[i];
    const int s = i + 1 < ts.size() ? ts[i + 1] : 0;
    auto eps = denoiser(x, image, t);
    check_eps(eps, x);
    torch::Tensor z;
    if (cfg.eta > 0.0 && s > 0) z = noise.draw(item_shape_of(x), x.scalar_type());
    x = ddim_step(x, t, s, eps, cfg.eta, z, schedule);
    if (observe) observe(s, x);
  }
  return x;
}

torch::Tensor dpm2_sample(const Denoiser& denoiser, const torch::Tensor& image,
                          const NoiseSchedule& schedule, const SamplerConfig& config,
                          std::span<const std::uint64_t> seeds, const StepObserver& observe) {
  const auto cfg = config.resolved(schedule);
  NoiseSource noise(seeds);
  auto x = initial_state(image, noise);
  if (observe) observe(schedule.steps(), x);
  const auto grid = dpm2_grid(schedule.steps(), cfg.nfe);
  auto denoise = [&](const torch::Tensor& u, int t) { return denoiser(u, image, t); };
  for (std::size_t i = 0; i + 1 < grid.size(); ++i) {
    const int t = grid[i], s = grid[i + 1];
    const double target = 0.5 * (level_at(schedule, t).lambda + level_at(schedule, s).lambda);
    const int mid = closest_lambda(schedule, s, t - 1, target);
    auto eps = denoiser(x, image, t);
    check_eps(eps, x);
    x = dpm2_step(x, t, s, mid, eps, denoise, schedule);
    if (observe) observe(s, x);
  }
  return x;
}

torch::Tensor sample(const Denoiser& denoiser, const torch::Tensor& image,
                     const NoiseSchedule& schedule, const SamplerConfig& config,
                     std::span<const std::uint64_t> seeds, const StepObserver& observe) {
  const auto cfg = config.resolved(schedule);
  switch (cfg.kind) {
    case SamplerKind::ancestral: return ancestral_sample(denoiser, image, schedule, seeds, observe);
    case SamplerKind::ddim: return ddim_sample(denoiser, image, schedule, cfg, seeds, observe);
    case SamplerKind::dpm2: return dpm2_sample(denoiser, image, schedule, cfg, seeds, observe);
  }
  throw InvalidArgument("unknown sampler kind");
}

std::vector<int> trajectory_steps(const NoiseSchedule& schedule, const SamplerConfig& config) {
  const auto cfg = config.resolved(schedule);
  const int T = schedule.steps();
  std::vector<int> out;
  switch (cfg.kind) {
    case SamplerKind::ancestral:
      for (int t = T; t >= 0; --t) out.push_back(t);
      break;
    case SamplerKind::ddim:
      out = strided_timesteps(T, cfg.nfe);
      out.push_back(0);
      break;
    case SamplerKind::dpm2:
      out = dpm2_grid(T, cfg.nfe);
      break;
  }
  return out;
}

torch::Tensor binarize(const torch::Tensor& x0, double threshold) {
  return (x0 > threshold).to(torch::kFloat32);
}

}  // namespace pgdiffseg
