#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <torch/types.h>

#include "pgdiffseg/network.hpp"
#include "pgdiffseg/sampler.hpp"
#include "pgdiffseg/schedule.hpp"

namespace pgdiffseg {

// Scalar whose gradient drives the heatmap.
enum class CamTarget {
  foreground_mean,  // mean of eps_hat where the implied x0 estimate is > 0 (global mean if none)
  global_mean,      // mean of eps_hat over all pixels
  class_logit,      // prior-branch tumour-presence logit
};

std::string to_string(CamTarget t);
CamTarget cam_target_from_string(const std::string& s);

// Channel weights = spatial mean of dA; map = ReLU(sum_c w_c A_c), bilinearly
// resized to out_h x out_w and min-max scaled to [0, 1]. A map with no dynamic
// range yields all zeros. A, dA: [C, h, w] or [1, C, h, w].
torch::Tensor gradcam_from_activation(const torch::Tensor& A, const torch::Tensor& dA,
                                      int64_t out_h, int64_t out_w);

// Heatmaps [H, W] for each requested layer from one forward/backward pass.
// image, x_t: [1, 1, H, W]. Unknown layers raise InvalidArgument listing the
// valid names.
std::map<std::string, torch::Tensor> gradcam(PGDiffSeg& model, const torch::Tensor& image,
                                             const torch::Tensor& x_t, int t,
                                             const std::vector<std::string>& layers,
                                             CamTarget target, const NoiseSchedule& schedule);

torch::Tensor gradcam(PGDiffSeg& model, const torch::Tensor& image, const torch::Tensor& x_t,
                      int t, const std::string& layer, CamTarget target,
                      const NoiseSchedule& schedule);

// CAM of the prior branch's last supervised unit for the class logit.
torch::Tensor prior_cam(PGDiffSeg& model, const torch::Tensor& image);

struct TimelineGrid {
  std::vector<std::string> layers;
  std::vector<int> requested;
  std::vector<int> timesteps;  // captured steps actually used, one per column
  std::vector<std::vector<torch::Tensor>> cams;  // [layer][column], each [H, W]
  std::vector<torch::Tensor> states;             // x_t per column, [1, 1, H, W]
  std::vector<std::string> notices;
};

// Runs one sampling trajectory for `image` ([1, 1, H, W]) seeded by `seed`,
// captures x_t at the requested steps (nearest captured step otherwise, with
// a notice) and computes a heatmap per (layer, step).
TimelineGrid attention_timeline(PGDiffSeg& model, const torch::Tensor& image,
                                const NoiseSchedule& schedule,
                                const std::vector<std::string>& layers,
                                const std::vector<int>& timesteps, std::uint64_t seed,
                                const SamplerConfig& sampler = {},
                                CamTarget target = CamTarget::foreground_mean);

// Encoder levels of both flows after PSA fusion.
std::vector<std::string> default_explain_layers();
// {before, after} names of the PSA at `level` (1-based) for "cond" or "den".
std::pair<std::string, std::string> psa_pair_layers(const std::string& flow, int level);

// Viridis overlay of `cam` ([H, W] in [0, 1]) on a grayscale image in [-1, 1].
cv::Mat overlay_heatmap(const torch::Tensor& image, const torch::Tensor& cam, double alpha = 0.5);

// Layers x timesteps mosaic of overlays with row/column labels.
cv::Mat render_grid(const TimelineGrid& grid, const torch::Tensor& image, int cell = 128);

// NumPy .npy (format 1.0, little-endian float32).
void write_npy(const std::filesystem::path& path, const torch::Tensor& t);
torch::Tensor read_npy(const std::filesystem::path& path);

}  // namespace pgdiffseg
