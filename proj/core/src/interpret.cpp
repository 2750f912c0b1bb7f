#include "pgdiffseg/interpret.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <regex>
#include <set>

#include <opencv2/imgproc.hpp>
#include <torch/torch.h>

#include "pgdiffseg/errors.hpp"
#include "pgdiffseg/trainer.hpp"

namespace fs = std::filesystem;

namespace pgdiffseg {

std::string to_string(CamTarget t) {
  switch (t) {
    case CamTarget::foreground_mean: return "foreground_mean";
    case CamTarget::global_mean: return "global_mean";
    case CamTarget::class_logit: return "class_logit";
  }
  return "?";
}

CamTarget cam_target_from_string(const std::string& s) {
  if (s == "foreground_mean") return CamTarget::foreground_mean;
  if (s == "global_mean") return CamTarget::global_mean;
  if (s == "class_logit") return CamTarget::class_logit;
  throw InvalidArgument("unknown CAM target '" + s +
                        "' (foreground_mean, global_mean, class_logit)");
}

torch::Tensor gradcam_from_activation(const torch::Tensor& A, const torch::Tensor& dA,
                                      int64_t out_h, int64_t out_w) {
  auto a = A.dim() == 4 ? A.squeeze(0) : A;
  auto g = dA.dim() == 4 ? dA.squeeze(0) : dA;
  if (a.dim() != 3 || !a.sizes().equals(g.sizes())) {
    throw InvalidArgument("gradcam: activation and gradient must be matching [C, h, w]");
  }
  a = a.detach().to(torch::kFloat64);
  g = g.detach().to(torch::kFloat64);
  const auto weights = g.mean({1, 2}, /*keepdim=*/true);
  auto cam = torch::relu((weights * a).sum(0));
  namespace F = torch::nn::functional;
  cam = F::interpolate(cam.unsqueeze(0).unsqueeze(0),
                       F::InterpolateFuncOptions()
                           .size(std::vector<int64_t>{out_h, out_w})
                           .mode(torch::kBilinear)
                           .align_corners(false))
            .squeeze(0)
            .squeeze(0);
  const double lo = cam.min().item<double>(), hi = cam.max().item<double>();
  if (!(hi - lo > 1e-12 * std::max(1.0, std::abs(hi)))) {
    return torch::zeros({out_h, out_w}, torch::kFloat32);
  }
  return ((cam - lo) / (hi - lo)).clamp(0.0, 1.0).to(torch::kFloat32);
}

namespace {

void check_layers(const std::vector<std::string>& layers, const std::vector<std::string>& valid) {
  for (const auto& l : layers) {
    if (std::find(valid.begin(), valid.end(), l) == valid.end()) {
      std::string list;
      for (const auto& v : valid) list += (list.empty() ? "" : ", ") + v;
      throw InvalidArgument("unknown layer '" + l + "'; valid layers: " + list);
    }
  }
}

void check_single(const torch::Tensor& x, const char* what) {
  if (x.dim() != 4 || x.size(0) != 1 || x.size(1) != 1) {
    throw InvalidArgument(std::string(what) + " must be [1, 1, H, W]");
  }
}

}  // namespace

std::map<std::string, torch::Tensor> gradcam(PGDiffSeg& model, const torch::Tensor& image,
                                             const torch::Tensor& x_t, int t,
                                             const std::vector<std::string>& layers,
                                             CamTarget target, const NoiseSchedule& schedule) {
  check_single(image, "gradcam image");
  check_single(x_t, "gradcam x_t");
  schedule.check_step(t);
  check_layers(layers, model->layer_names());
  if (layers.empty()) return {};

  torch::AutoGradMode grad_on(true);
  const bool was_training = model->is_training();
  model->eval();
  ActivationTape tape;
  const auto ts = torch::full({1}, static_cast<int64_t>(t), torch::kInt64);
  const auto dtype = model->parameters().front().scalar_type();
  auto out = model->forward(x_t.to(dtype), image.to(dtype), ts, &tape);

  torch::Tensor scalar;
  switch (target) {
    case CamTarget::class_logit: scalar = out.prior.class_logit.sum(); break;
    case CamTarget::global_mean: scalar = out.eps_hat.mean(); break;
    case CamTarget::foreground_mean: {
      const auto x0 = x0_from_eps(x_t.to(dtype), t, out.eps_hat.detach(), schedule);
      const auto fg = (x0 > 0).to(dtype);
      const double n = fg.sum().item<double>();
      scalar = n > 0 ? (out.eps_hat * fg).sum() / n : out.eps_hat.mean();
      break;
    }
  }

  std::vector<torch::Tensor> acts;
  for (const auto& l : layers) acts.push_back(tape.maps.at(l));
  auto grads = torch::autograd::grad({scalar}, acts, {}, /*retain_graph=*/false,
                                     /*create_graph=*/false, /*allow_unused=*/true);
  if (was_training) model->train();

  std::map<std::string, torch::Tensor> cams;
  const auto H = image.size(2), W = image.size(3);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto g = grads[i].defined() ? grads[i] : torch::zeros_like(acts[i]);
    cams[layers[i]] = gradcam_from_activation(acts[i], g, H, W);
  }
  return cams;
}

torch::Tensor gradcam(PGDiffSeg& model, const torch::Tensor& image, const torch::Tensor& x_t,
                      int t, const std::string& layer, CamTarget target,
                      const NoiseSchedule& schedule) {
  return gradcam(model, image, x_t, t, std::vector<std::string>{layer}, target, schedule)
      .at(layer);
}

torch::Tensor prior_cam(PGDiffSeg& model, const torch::Tensor& image) {
  check_single(image, "prior_cam image");
  torch::AutoGradMode grad_on(true);
  const bool was_training = model->is_training();
  model->eval();
  ActivationTape tape;
  const auto dtype = model->parameters().front().scalar_type();
  auto out = model->prior->forward(image.to(dtype), &tape);
  const auto& act = tape.maps.at("prior.unit4");
  auto grads = torch::autograd::grad({out.class_logit.sum()}, {act}, {}, false, false, true);
  if (was_training) model->train();
  const auto g = grads[0].defined() ? grads[0] : torch::zeros_like(act);
  return gradcam_from_activation(act, g, image.size(2), image.size(3));
}

TimelineGrid attention_timeline(PGDiffSeg& model, const torch::Tensor& image,
                                const NoiseSchedule& schedule,
                                const std::vector<std::string>& layers,
                                const std::vector<int>& timesteps, std::uint64_t seed,
                                const SamplerConfig& sampler, CamTarget target) {
  check_single(image, "attention_timeline image");
  check_layers(layers, model->layer_names());
  if (timesteps.empty()) throw InvalidArgument("attention_timeline needs at least one timestep");

  std::map<int, torch::Tensor> captured;
  const std::vector<std::uint64_t> seeds{seed};
  sample(model_denoiser(model), image, schedule, sampler, seeds,
         [&](int t, const torch::Tensor& x) {
           if (t >= 1) captured[t] = x.clone();
         });

  TimelineGrid grid;
  grid.layers = layers;
  grid.requested = timesteps;
  grid.cams.assign(layers.size(), {});
  for (int want : timesteps) {
    auto best = captured.begin();
    for (auto it = captured.begin(); it != captured.end(); ++it) {
      if (std::abs(it->first - want) < std::abs(best->first - want)) best = it;
    }
    if (best->first != want) {
      grid.notices.push_back("timestep " + std::to_string(want) +
                             " is not on the trajectory; using " + std::to_string(best->first));
    }
    grid.timesteps.push_back(best->first);
    grid.states.push_back(best->second);
    auto cams = gradcam(model, image, best->second, best->first, layers, target, schedule);
    for (std::size_t l = 0; l < layers.size(); ++l) grid.cams[l].push_back(cams.at(layers[l]));
  }
  return grid;
}

std::vector<std::string> default_explain_layers() {
  std::vector<std::string> out;
  for (const char* flow : {"cond", "den"}) {
    for (int i = 1; i <= 4; ++i) out.push_back(std::string(flow) + ".psa" + std::to_string(i));
  }
  return out;
}

std::pair<std::string, std::string> psa_pair_layers(const std::string& flow, int level) {
  if (flow != "cond" && flow != "den") throw InvalidArgument("flow must be cond or den");
  if (level < 1 || level > 4) throw InvalidArgument("PSA level must be in 1..4");
  const auto l = std::to_string(level);
  return {flow + ".unit" + l, flow + ".psa" + l};
}

cv::Mat overlay_heatmap(const torch::Tensor& image, const torch::Tensor& cam, double alpha) {
  auto img = image.detach().to(torch::kFloat32).reshape({image.size(-2), image.size(-1)});
  auto hm = cam.detach().to(torch::kFloat32).reshape({cam.size(-2), cam.size(-1)});
  if (!img.sizes().equals(hm.sizes())) throw InvalidArgument("overlay: size mismatch");
  auto gray = ((img.clamp(-1, 1) + 1.0) * 127.5).round().to(torch::kUInt8).contiguous();
  auto heat = (hm.clamp(0, 1) * 255.0).round().to(torch::kUInt8).contiguous();
  const int h = static_cast<int>(img.size(0)), w = static_cast<int>(img.size(1));
  cv::Mat g(h, w, CV_8UC1, gray.data_ptr<uint8_t>());
  cv::Mat c(h, w, CV_8UC1, heat.data_ptr<uint8_t>());
  cv::Mat g3, colored, out;
  cv::cvtColor(g, g3, cv::COLOR_GRAY2BGR);
  cv::applyColorMap(c, colored, cv::COLORMAP_VIRIDIS);
  cv::addWeighted(colored, alpha, g3, 1.0 - alpha, 0.0, out);
  return out;
}

cv::Mat render_grid(const TimelineGrid& grid, const torch::Tensor& image, int cell) {
  const int rows = static_cast<int>(grid.layers.size());
  const int cols = static_cast<int>(grid.timesteps.size());
  const int left = 90, top = 24;
  cv::Mat canvas(top + rows * cell, left + cols * cell, CV_8UC3, cv::Scalar(255, 255, 255));
  for (int c = 0; c < cols; ++c) {
    cv::putText(canvas, "t=" + std::to_string(grid.timesteps[static_cast<std::size_t>(c)]),
                {left + c * cell + 4, 17}, cv::FONT_HERSHEY_SIMPLEX, 0.45, cv::Scalar(0, 0, 0), 1,
                cv::LINE_AA);
  }
  for (int r = 0; r < rows; ++r) {
    cv::putText(canvas, grid.layers[static_cast<std::size_t>(r)], {4, top + r * cell + cell / 2},
                cv::FONT_HERSHEY_SIMPLEX, 0.45, cv::Scalar(0, 0, 0), 1, cv::LINE_AA);
    for (int c = 0; c < cols; ++c) {
      cv::Mat tile = overlay_heatmap(image, grid.cams[static_cast<std::size_t>(r)]
                                                     [static_cast<std::size_t>(c)]);
      cv::resize(tile, tile, cv::Size(cell, cell), 0, 0, cv::INTER_NEAREST);
      tile.copyTo(canvas(cv::Rect(left + c * cell, top + r * cell, cell, cell)));
    }
  }
  return canvas;
}

void write_npy(const fs::path& path, const torch::Tensor& t) {
  const auto data = t.detach().to(torch::kFloat32).contiguous();
  std::string shape = "(";
  for (auto d : data.sizes()) shape += std::to_string(d) + ",";
  if (data.dim() > 1) shape.pop_back();
  shape += ")";
  std::string header = "{'descr': '<f4', 'fortran_order': False, 'shape': " + shape + ", }";
  const std::size_t total = 10 + header.size() + 1;
  header.append((64 - total % 64) % 64, ' ');
  header.push_back('\n');
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  const char magic[] = {'\x93', 'N', 'U', 'M', 'P', 'Y', 1, 0};
  out.write(magic, sizeof(magic));
  const auto len = static_cast<std::uint16_t>(header.size());
  const char len_bytes[2] = {static_cast<char>(len & 0xFF), static_cast<char>(len >> 8)};
  out.write(len_bytes, 2);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(static_cast<const char*>(data.data_ptr()),
            static_cast<std::streamsize>(data.numel() * data.element_size()));
  if (!out) throw IoError("failed writing " + path.string());
}

torch::Tensor read_npy(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, "\x93NUMPY", 6) != 0 || magic[6] != 1) {
    throw IoError(path.string() + " is not a version-1 .npy file");
  }
  unsigned char len_bytes[2];
  in.read(reinterpret_cast<char*>(len_bytes), 2);
  std::string header(static_cast<std::size_t>(len_bytes[0] | (len_bytes[1] << 8)), '\0');
  in.read(header.data(), static_cast<std::streamsize>(header.size()));
  if (header.find("'<f4'") == std::string::npos || header.find("'fortran_order': False") ==
                                                         std::string::npos) {
    throw IoError(path.string() + ": only C-order float32 arrays are supported");
  }
  std::smatch m;
  if (!std::regex_search(header, m, std::regex(R"('shape': \(([^)]*)\))"))) {
    throw IoError(path.string() + ": missing shape");
  }
  std::vector<int64_t> shape;
  const std::string dims = m[1];
  std::regex num(R"(\d+)");
  for (auto it = std::sregex_iterator(dims.begin(), dims.end(), num); it != std::sregex_iterator();
       ++it) {
    shape.push_back(std::stoll(it->str()));
  }
  auto t = torch::empty(shape, torch::kFloat32);
  in.read(static_cast<char*>(t.data_ptr()),
          static_cast<std::streamsize>(t.numel() * t.element_size()));
  if (!in) throw IoError(path.string() + ": truncated data");
  return t;
}

}  // namespace pgdiffseg
