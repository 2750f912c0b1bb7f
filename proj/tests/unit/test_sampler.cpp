#include <doctest.h>

#include <cmath>
#include <set>

#include <torch/torch.h>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "pgdiffseg/data.hpp"
#include "pgdiffseg/errors.hpp"
#include "pgdiffseg/evaluation.hpp"
#include "pgdiffseg/sampler.hpp"

using namespace pgdiffseg;

namespace {

// eps_hat = c * image, independent of x_t.
Denoiser constant_denoiser(double c = 0.3) {
  return [c](const torch::Tensor& x, const torch::Tensor& image, int) {
    return (image * c).to(x.dtype()).expand_as(x).clone();
  };
}

Denoiser counting(const Denoiser& inner, int& calls) {
  return [inner, &calls](const torch::Tensor& x, const torch::Tensor& im, int t) {
    ++calls;
    return inner(x, im, t);
  };
}

torch::Tensor image_batch(int b, int size, std::uint64_t seed) {
  torch::manual_seed(static_cast<int64_t>(seed));
  return torch::rand({b, 1, size, size}) * 2 - 1;
}

}  // namespace

TEST_SUITE("sampler") {

TEST_CASE("strided timesteps start at T, end at 1 and decrease strictly") {
  for (auto [T, n] : std::vector<std::pair<int, int>>{{1000, 10}, {200, 25}, {200, 200}, {7, 3}}) {
    const auto ts = strided_timesteps(T, n);
    REQUIRE(ts.size() == static_cast<std::size_t>(n));
    CHECK(ts.front() == T);
    CHECK(ts.back() == 1);
    for (std::size_t i = 1; i < ts.size(); ++i) CHECK(ts[i] < ts[i - 1]);
  }
  CHECK(strided_timesteps(50, 1) == std::vector<int>{50});
  CHECK_THROWS_AS(strided_timesteps(10, 11), InvalidArgument);
  CHECK_THROWS_AS(strided_timesteps(10, 0), InvalidArgument);
}

TEST_CASE("sampler config invariants") {
  const auto s = make_linear_schedule(100);
  SamplerConfig c;
  CHECK(c.resolved(s).nfe == 100);
  c.nfe = 50;
  CHECK_THROWS_AS(c.resolved(s), InvalidArgument);  // ancestral must use T
  c.kind = SamplerKind::ddim;
  CHECK(c.resolved(s).nfe == 50);
  c.nfe = 101;
  CHECK_THROWS_AS(c.resolved(s), InvalidArgument);
  c.kind = SamplerKind::dpm2;
  c.nfe = 11;
  CHECK_THROWS_AS(c.resolved(s), InvalidArgument);
  c.nfe = 10;
  c.eta = 1.5;
  CHECK_THROWS_AS(c.resolved(s), InvalidArgument);
}

TEST_CASE("derived seeds are distinct and deterministic") {
  std::set<std::uint64_t> seen;
  for (std::uint64_t i = 0; i < 1000; ++i) seen.insert(derive_seed(42, i));
  CHECK(seen.size() == 1000);
  CHECK(derive_seed(42, 3) == derive_seed(42, 3));
  CHECK(derive_seed(42, 3) != derive_seed(43, 3));
  const auto seeds = item_seeds(5, 10, 3);
  CHECK(seeds == std::vector<std::uint64_t>{derive_seed(5, 10), derive_seed(5, 11),
                                            derive_seed(5, 12)});
}

TEST_CASE("each batch item draws from its own noise stream") {
  const std::vector<std::uint64_t> two{11, 22}, first{11}, second{22};
  NoiseSource both(two), a(first), b(second);
  auto x = both.draw({1, 4, 4}, torch::kFloat32);
  CHECK(torch::equal(x[0], a.draw({1, 4, 4}, torch::kFloat32)[0]));
  CHECK(torch::equal(x[1], b.draw({1, 4, 4}, torch::kFloat32)[0]));
}

TEST_CASE("binarize uses a strict threshold") {
  CHECK(binarize(torch::full({3, 3}, -1.0)).sum().item<double>() == 0.0);
  CHECK(binarize(torch::full({3, 3}, 1.0)).sum().item<double>() == 9.0);
  CHECK(binarize(torch::zeros({3, 3})).sum().item<double>() == 0.0);
  CHECK(binarize(torch::full({2}, 0.5), 0.5).sum().item<double>() == 0.0);
}

TEST_CASE("ancestral sampling with the oracle denoiser recovers the masks") {
  const auto s = make_linear_schedule(200);
  const auto data = make_synthetic_dataset(6, 32, 3);
  const auto oracle_eps = make_oracle_denoiser(data, s);
  const auto batch = collate(data, 0, data.size());
  const auto seeds = item_seeds(9, 0, data.size());
  auto x0 = ancestral_sample(oracle_eps, batch.images, s, seeds);
  auto masks = binarize(x0).squeeze(1);
  for (std::size_t i = 0; i < data.size(); ++i) {
    CHECK(dsc(masks[static_cast<int64_t>(i)], data[i].mask) >= 0.99);
  }
}

TEST_CASE("every sampler is deterministic under a fixed seed") {
  const auto s = make_linear_schedule(50);
  const auto image = image_batch(2, 16, 1);
  const std::vector<std::uint64_t> seeds{4, 5};
  auto den = [](const torch::Tensor& x, const torch::Tensor& im, int t) {
    return torch::tanh(x * 0.5 + im * 0.1 * t / 50.0);
  };
  for (auto kind : {SamplerKind::ancestral, SamplerKind::ddim, SamplerKind::dpm2}) {
    SamplerConfig c;
    c.kind = kind;
    c.nfe = kind == SamplerKind::ancestral ? 0 : 10;
    c.eta = kind == SamplerKind::ddim ? 0.5 : 0.0;
    auto a = sample(den, image, s, c, seeds);
    auto b = sample(den, image, s, c, seeds);
    CHECK(fixture::tensors_bitwise_equal(a, b));
  }
}

TEST_CASE("x_T is standard normal") {
  const auto s = make_linear_schedule(5);
  const auto image = torch::zeros({1, 1, 100, 100});
  const std::vector<std::uint64_t> seeds{2024};
  torch::Tensor xT;
  auto observe = [&](int t, const torch::Tensor& x) {
    if (t == s.steps()) xT = x.clone();
  };
  ancestral_sample(constant_denoiser(0.0), image, s, seeds, observe);
  REQUIRE(xT.defined());
  const double n = static_cast<double>(xT.numel());
  const double mean_abs = xT.abs().mean().item<double>();
  const double expected = std::sqrt(2.0 / M_PI);
  CHECK(std::abs(mean_abs - expected) < 3.0 * std::sqrt((1.0 - 2.0 / M_PI) / n));
}

TEST_CASE("denoiser call count matches the advertised nfe") {
  const auto s = make_linear_schedule(60);
  const auto image = image_batch(1, 16, 2);
  const std::vector<std::uint64_t> seeds{1};
  int calls = 0;
  SamplerConfig c;
  sample(counting(constant_denoiser(), calls), image, s, c, seeds);
  CHECK(calls == 60);
  for (int nfe : {1, 7, 25, 60}) {
    calls = 0;
    c.kind = SamplerKind::ddim;
    c.nfe = nfe;
    sample(counting(constant_denoiser(), calls), image, s, c, seeds);
    CHECK(calls == nfe);
  }
  for (int nfe : {2, 10, 60}) {
    calls = 0;
    c.kind = SamplerKind::dpm2;
    c.nfe = nfe;
    sample(counting(constant_denoiser(), calls), image, s, c, seeds);
    CHECK(calls == nfe);
  }
}

TEST_CASE("ddim with eta = 1 on consecutive steps equals the ancestral update") {
  const auto s = make_linear_schedule(1000, VarianceChoice::beta_tilde);
  auto x = torch::randn({4, 4}, torch::kFloat64);
  auto eps = torch::randn({4, 4}, torch::kFloat64);
  auto z = torch::randn({4, 4}, torch::kFloat64);
  for (int t : {2, 10, 500, 1000}) {
    auto a = ddim_step(x, t, t - 1, eps, 1.0, z, s);
    auto b = reverse_step(x, t, eps, z, s);
    CHECK((a - b).abs().max().item<double>() < 1e-6);
  }
  auto a = ddim_step(x, 1, 0, eps, 1.0, z, s);
  auto b = reverse_step(x, 1, eps, torch::zeros_like(z), s);
  CHECK((a - b).abs().max().item<double>() < 1e-6);
}

TEST_CASE("ddim with eta = 0 decodes the exact x0 in one step") {
  const auto s = make_linear_schedule(100);
  auto x0 = torch::randn({3, 3}, torch::kFloat64);
  auto e = torch::randn({3, 3}, torch::kFloat64);
  auto xt = q_sample(x0, 80, e, s);
  CHECK(torch::allclose(ddim_step(xt, 80, 0, e, 0.0, {}, s), x0, 1e-10, 1e-10));
  CHECK_THROWS_AS(ddim_step(xt, 80, 80, e, 0.0, {}, s), InvalidArgument);
}

TEST_CASE("dpm2 with a state-independent denoiser follows the ddim trajectory") {
  const auto s = make_linear_schedule(200);
  const auto image = image_batch(2, 16, 3).to(torch::kFloat64);
  const std::vector<std::uint64_t> seeds{7, 8};
  SamplerConfig c;
  c.kind = SamplerKind::dpm2;
  c.nfe = 20;
  const auto den = constant_denoiser(0.4);
  std::vector<torch::Tensor> states;
  auto observe = [&](int, const torch::Tensor& x) { states.push_back(x.clone()); };
  auto out = dpm2_sample(den, image, s, c, seeds, observe);

  const auto grid = dpm2_grid(200, 20);
  REQUIRE(states.size() == grid.size());
  auto x = states.front();
  for (std::size_t i = 0; i + 1 < grid.size(); ++i) {
    x = ddim_step(x, grid[i], grid[i + 1], den(x, image, grid[i]), 0.0, {}, s);
    CHECK((x - states[i + 1]).abs().max().item<double>() < 1e-6);
  }
  CHECK((x - out).abs().max().item<double>() < 1e-6);
}

TEST_CASE("dpm2 rejects odd nfe and bad midpoints") {
  const auto s = make_linear_schedule(100);
  CHECK_THROWS_AS(dpm2_grid(100, 7), InvalidArgument);
  auto x = torch::zeros({2, 2}, torch::kFloat64);
  auto den = [](const torch::Tensor& u, int) { return torch::zeros_like(u); };
  CHECK_THROWS_AS(dpm2_step(x, 50, 40, 50, x, den, s), InvalidArgument);
  CHECK_THROWS_AS(dpm2_step(x, 50, 40, 39, x, den, s), InvalidArgument);
}

TEST_CASE("dpm2 local error shrinks at third order, ddim at second") {
  // eps depends on the noise level only, so the exact solution of the
  // probability-flow ODE is x_s = (a_s / a_t) x_t - a_s * int e^{-l} f(l) dl.
  const auto s = make_linear_schedule(1000);
  auto lambda = [&](int t) {
    return std::log(std::sqrt(s.alpha_bar(t)) / std::sqrt(1.0 - s.alpha_bar(t)));
  };
  auto f = [](double l) { return std::sin(2.0 * l) + 0.5 * l; };
  auto eps_fn = [&](const torch::Tensor& u, int t) { return torch::full_like(u, f(lambda(t))); };
  const auto x = torch::full({1}, 0.7, torch::kFloat64);
  auto exact = [&](int t, int e) {
    const double a = lambda(t), b = lambda(e);
    const int n = 4000;
    double acc = 0.0;
    for (int i = 0; i <= n; ++i) {
      const double l = a + (b - a) * i / n;
      const double w = (i == 0 || i == n) ? 1.0 : (i % 2 ? 4.0 : 2.0);
      acc += w * std::exp(-l) * f(l);
    }
    acc *= (b - a) / (3.0 * n);
    const double at = std::sqrt(s.alpha_bar(t)), ae = std::sqrt(s.alpha_bar(e));
    return ae / at * 0.7 - ae * acc;
  };
  auto mid_of = [&](int t, int e) {
    const double target = 0.5 * (lambda(t) + lambda(e));
    int best = e;
    for (int m = e; m < t; ++m) {
      if (std::abs(lambda(m) - target) < std::abs(lambda(best) - target)) best = m;
    }
    return best;
  };
  auto dpm2_err = [&](int t, int e) {
    auto y = dpm2_step(x, t, e, mid_of(t, e), eps_fn(x, t), eps_fn, s);
    return std::abs(y.item<double>() - exact(t, e));
  };
  auto ddim_err = [&](int t, int e) {
    auto y = ddim_step(x, t, e, eps_fn(x, t), 0.0, {}, s);
    return std::abs(y.item<double>() - exact(t, e));
  };
  const int t = 300, e_big = 240, e_small = 270;
  const double h_ratio = (lambda(e_big) - lambda(t)) / (lambda(e_small) - lambda(t));
  const double dpm2_order = std::log(dpm2_err(t, e_big) / dpm2_err(t, e_small)) / std::log(h_ratio);
  const double ddim_order = std::log(ddim_err(t, e_big) / ddim_err(t, e_small)) / std::log(h_ratio);
  CHECK(dpm2_order > 2.5);
  CHECK(ddim_order > 1.5);
  CHECK(ddim_order < 2.5);
  CHECK(dpm2_err(t, e_small) < ddim_err(t, e_small));
}

TEST_CASE("denoiser shape violations are reported") {
  const auto s = make_linear_schedule(10);
  const auto image = image_batch(1, 16, 4);
  const std::vector<std::uint64_t> seeds{1};
  Denoiser bad = [](const torch::Tensor& x, const torch::Tensor&, int) {
    return torch::zeros({x.size(0), 1, 8, 8});
  };
  CHECK_THROWS_AS(ancestral_sample(bad, image, s, seeds), ContractViolation);
  const std::vector<std::uint64_t> wrong{1, 2};
  CHECK_THROWS_AS(ancestral_sample(constant_denoiser(), image, s, wrong), InvalidArgument);
}

TEST_CASE("trajectory steps agree with the observer") {
  const auto s = make_linear_schedule(40);
  const auto image = image_batch(1, 16, 5);
  const std::vector<std::uint64_t> seeds{3};
  for (auto [kind, nfe] : std::vector<std::pair<SamplerKind, int>>{
           {SamplerKind::ancestral, 0}, {SamplerKind::ddim, 9}, {SamplerKind::dpm2, 8}}) {
    SamplerConfig c;
    c.kind = kind;
    c.nfe = nfe;
    std::vector<int> seen;
    sample(constant_denoiser(), image, s, c, seeds, [&](int t, const torch::Tensor&) {
      seen.push_back(t);
    });
    CHECK(seen == trajectory_steps(s, c));
    CHECK(seen.front() == 40);
  }
}

TEST_CASE("a sample depends only on its own seed, not on batching") {
  const auto s = make_linear_schedule(30);
  const auto image = image_batch(3, 16, 6);
  auto den = [](const torch::Tensor& x, const torch::Tensor& im, int) { return x * 0.1 + im * 0.2; };
  SamplerConfig c;
  c.kind = SamplerKind::ddim;
  c.nfe = 30;
  c.eta = 1.0;
  const auto seeds = item_seeds(77, 0, 3);
  auto batched = sample(den, image, s, c, seeds);
  for (int i = 0; i < 3; ++i) {
    const std::vector<std::uint64_t> one{seeds[static_cast<std::size_t>(i)]};
    auto single = sample(den, image.narrow(0, i, 1), s, c, one);
    CHECK(torch::allclose(batched[i], single[0], 1e-6, 1e-6));
  }
}

TEST_CASE("sampler kinds round-trip through strings") {
  for (auto k : {SamplerKind::ancestral, SamplerKind::ddim, SamplerKind::dpm2}) {
    CHECK(sampler_kind_from_string(to_string(k)) == k);
  }
  CHECK_THROWS_AS(sampler_kind_from_string("euler"), InvalidArgument);
}

}
