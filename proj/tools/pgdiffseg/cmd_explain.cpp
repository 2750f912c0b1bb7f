#include <iostream>
#include <memory>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "commands.hpp"
#include "common.hpp"
#include "pgdiffseg/errors.hpp"
#include "pgdiffseg/interpret.hpp"
#include "pgdiffseg/logging.hpp"

namespace fs = std::filesystem;

namespace pgdiffseg::cli {

namespace {

struct ExplainOptions {
  CommonOptions common;
  DataOptions data;
  SamplerOptions sampler;
  std::string checkpoint, image;
  std::size_t index = 0;
  std::vector<std::string> layers;
  std::vector<int> timesteps;
  std::string target = "foreground_mean";
};

void save_png(const fs::path& path, const cv::Mat& img) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), img)) throw IoError("cannot write " + path.string());
}

std::string cell_name(const std::string& layer, int t) {
  std::string s = layer;
  for (auto& c : s) {
    if (c == '.') c = '_';
  }
  return s + "_t" + std::to_string(t);
}

int run_explain(const ExplainOptions& o) {
  apply_log_level(o.common.log_level);
  auto data = o.data;
  auto inf = open_inference(o.checkpoint, o.common, data, o.sampler, o.image);
  if (o.index >= inf.items.size()) {
    throw UsageError("--index " + std::to_string(o.index) + " is outside the split (" +
                     std::to_string(inf.items.size()) + " images)");
  }
  const auto& item = inf.items[o.index];
  const auto& schedule = inf.loaded.schedule;
  auto& model = inf.loaded.model;
  const auto dir = run_dir(o.common, "explain", inf.cfg);
  const auto image = item.image.unsqueeze(0).unsqueeze(0);

  const auto layers = o.layers.empty() ? default_explain_layers() : o.layers;
  const auto timesteps =
      o.timesteps.empty() ? strided_timesteps(schedule.steps(), std::min(5, schedule.steps()))
                          : o.timesteps;
  const auto target = cam_target_from_string(o.target);
  const auto seed = derive_seed(inf.cfg.sampler.seed, o.index);

  const auto grid = attention_timeline(model, image, schedule, layers, timesteps, seed,
                                       inf.cfg.sampler, target);
  for (const auto& n : grid.notices) log_warn(n);
  save_png(dir / "timeline_grid.png", render_grid(grid, item.image));

  nlohmann::json manifest = {{"checkpoint", o.checkpoint},
                             {"source_id", item.source_id},
                             {"seed", seed},
                             {"target", o.target},
                             {"layers", grid.layers},
                             {"requested_timesteps", grid.requested},
                             {"timesteps", grid.timesteps},
                             {"notices", grid.notices},
                             {"cells", nlohmann::json::array()}};
  for (std::size_t l = 0; l < grid.layers.size(); ++l) {
    for (std::size_t c = 0; c < grid.timesteps.size(); ++c) {
      const auto name = cell_name(grid.layers[l], grid.timesteps[c]);
      write_npy(dir / "cams" / (name + ".npy"), grid.cams[l][c]);
      save_png(dir / "cams" / (name + ".png"), overlay_heatmap(item.image, grid.cams[l][c]));
      manifest["cells"].push_back({{"layer", grid.layers[l]},
                                   {"timestep", grid.timesteps[c]},
                                   {"npy", "cams/" + name + ".npy"}});
    }
  }

  // Before/after PSA pairs for every level of both flows at each timestep.
  manifest["psa_pairs"] = nlohmann::json::array();
  for (std::size_t c = 0; c < grid.timesteps.size(); ++c) {
    const int t = grid.timesteps[c];
    std::vector<std::string> names;
    for (const char* flow : {"cond", "den"}) {
      for (int level = 1; level <= 4; ++level) {
        const auto [before, after] = psa_pair_layers(flow, level);
        names.push_back(before);
        names.push_back(after);
      }
    }
    const auto cams = gradcam(model, image, grid.states[c], t, names, target, schedule);
    for (std::size_t k = 0; k < names.size(); k += 2) {
      const auto& before = names[k];
      const auto& after = names[k + 1];
      cv::Mat a = overlay_heatmap(item.image, cams.at(before));
      cv::Mat b = overlay_heatmap(item.image, cams.at(after));
      cv::resize(a, a, cv::Size(128, 128), 0, 0, cv::INTER_NEAREST);
      cv::resize(b, b, cv::Size(128, 128), 0, 0, cv::INTER_NEAREST);
      cv::Mat pair;
      cv::hconcat(a, b, pair);
      const auto stem = cell_name(after, t);
      save_png(dir / "psa_pairs" / (stem + "_before_after.png"), pair);
      write_npy(dir / "psa_pairs" / (stem + "_before.npy"), cams.at(before));
      write_npy(dir / "psa_pairs" / (stem + "_after.npy"), cams.at(after));
      manifest["psa_pairs"].push_back({{"before", before}, {"after", after}, {"timestep", t}});
    }
  }

  const auto pcam = prior_cam(model, image);
  write_npy(dir / "prior_cam.npy", pcam);
  save_png(dir / "prior_cam.png", overlay_heatmap(item.image, pcam));
  manifest["prior_cam"] = {{"layer", "prior.unit4"}, {"target", "class_logit"}};
  write_text(dir / "explain.json", manifest.dump(2) + "\n");

  std::cout << "grid " << grid.layers.size() << " layers x " << grid.timesteps.size()
            << " timesteps -> " << (dir / "timeline_grid.png").string() << "\n";
  std::cout << "PSA before/after pairs -> " << (dir / "psa_pairs").string() << "\n";
  std::cout << "prior-branch CAM -> " << (dir / "prior_cam.png").string() << "\n";
  return 0;
}

}  // namespace

void register_explain(CLI::App& app, Command& run) {
  auto opts = std::make_shared<ExplainOptions>();
  auto* cmd = app.add_subcommand("explain", "Grad-CAM heatmaps across layers and diffusion steps");
  add_common(*cmd, opts->common);
  add_data(*cmd, opts->data, true);
  add_sampler(*cmd, opts->sampler);
  cmd->add_option("--checkpoint", opts->checkpoint, "Trained checkpoint")->required();
  cmd->add_option("--image", opts->image, "Input image instead of a dataset split")
      ->check(CLI::ExistingFile);
  cmd->add_option("--index", opts->index, "Image index within the split");
  cmd->add_option("--layers", opts->layers,
                  "Layer names (default: cond.psa1-4 and den.psa1-4)")
      ->delimiter(',');
  cmd->add_option("--timesteps", opts->timesteps, "Diffusion steps to visualise")
      ->delimiter(',');
  cmd->add_option("--target", opts->target, "foreground_mean, global_mean or class_logit")
      ->check(CLI::IsMember({"foreground_mean", "global_mean", "class_logit"}));
  cmd->callback([opts, &run] { run = [opts] { return run_explain(*opts); }; });
}

}  // namespace pgdiffseg::cli
