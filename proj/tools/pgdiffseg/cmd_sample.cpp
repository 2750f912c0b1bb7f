#include <iomanip>
#include <iostream>
#include <memory>
#include <set>
#include <sstream>

#include <torch/torch.h>

#include "commands.hpp"
#include "common.hpp"
#include "pgdiffseg/evaluation.hpp"
#include "pgdiffseg/logging.hpp"

namespace fs = std::filesystem;

namespace pgdiffseg::cli {

namespace {

struct SampleOptions {
  CommonOptions common;
  DataOptions data;
  SamplerOptions sampler;
  std::string checkpoint, image, mask;
  int save_trajectory = 0;
};

// `count` evenly spaced entries of `steps` (first and last included).
std::set<int> snapshot_steps(const std::vector<int>& steps, int count) {
  std::set<int> out;
  if (count <= 0) return out;
  const auto n = static_cast<int>(steps.size());
  if (count >= n) return {steps.begin(), steps.end()};
  for (int i = 0; i < count; ++i) {
    const double pos = count == 1 ? 0.0 : static_cast<double>(i) * (n - 1) / (count - 1);
    out.insert(steps[static_cast<std::size_t>(std::lround(pos))]);
  }
  return out;
}

int run_sample(const SampleOptions& o) {
  apply_log_level(o.common.log_level);
  auto inf = open_inference(o.checkpoint, o.common, o.data, o.sampler, o.image, o.mask);
  const auto& schedule = inf.loaded.schedule;
  const auto dir = run_dir(o.common, "sample", inf.cfg);
  const auto denoiser = model_denoiser(inf.loaded.model);
  const auto steps = trajectory_steps(schedule, inf.cfg.sampler);
  const auto keep = snapshot_steps(steps, o.save_trajectory);
  if (o.save_trajectory > static_cast<int>(steps.size())) {
    log_warn("trajectory has only " + std::to_string(steps.size()) + " states");
  }

  nlohmann::json manifest = {{"checkpoint", o.checkpoint},
                             {"sampler", to_string(inf.cfg.sampler.kind)},
                             {"nfe", inf.cfg.sampler.nfe},
                             {"seed", inf.cfg.sampler.seed},
                             {"items", nlohmann::json::array()}};
  for (std::size_t i = 0; i < inf.items.size(); ++i) {
    const auto& item = inf.items[i];
    const auto stem = file_stem_for(item.source_id);
    const std::vector<std::uint64_t> seeds{derive_seed(inf.cfg.sampler.seed, i)};
    const auto image = item.image.unsqueeze(0).unsqueeze(0);
    std::vector<std::string> snaps;
    auto observe = [&](int t, const torch::Tensor& x) {
      if (!keep.count(t)) return;
      std::ostringstream name;
      name << stem << "_t" << std::setw(4) << std::setfill('0') << t << ".png";
      const auto path = dir / "trajectory" / name.str();
      write_png(path, x[0][0], -1.0, 1.0);
      snaps.push_back(path.string());
    };
    const auto x0 = sample(denoiser, image, schedule, inf.cfg.sampler, seeds, observe);
    const auto mask = binarize(x0, inf.cfg.sampler.binarize_threshold)[0][0];
    const auto mask_path = dir / "masks" / (stem + ".png");
    write_png(mask_path, mask, 0.0, 1.0);
    nlohmann::json entry = {{"source_id", item.source_id},
                            {"mask", mask_path.string()},
                            {"seed", seeds[0]},
                            {"trajectory", snaps}};
    if (o.image.empty() || !o.mask.empty()) {
      entry["dsc"] = dsc(mask, item.mask);
    }
    std::cout << item.source_id << " -> " << mask_path.string();
    if (entry.contains("dsc")) std::cout << " (DSC " << entry["dsc"].get<double>() << ")";
    std::cout << "\n";
    manifest["items"].push_back(entry);
  }
  write_text(dir / "samples.json", manifest.dump(2) + "\n");
  return 0;
}

}  // namespace

void register_sample(CLI::App& app, Command& run) {
  auto opts = std::make_shared<SampleOptions>();
  auto* cmd = app.add_subcommand("sample", "Sample segmentation masks from a checkpoint");
  add_common(*cmd, opts->common);
  add_data(*cmd, opts->data, true);
  add_sampler(*cmd, opts->sampler);
  cmd->add_option("--checkpoint", opts->checkpoint, "Trained checkpoint")->required();
  cmd->add_option("--image", opts->image, "Single input image instead of a dataset split")
      ->check(CLI::ExistingFile);
  cmd->add_option("--mask", opts->mask, "Ground-truth mask for --image (reports DSC)")
      ->check(CLI::ExistingFile);
  cmd->add_option("--save-trajectory", opts->save_trajectory,
                  "Write N evenly spaced x_t snapshots per image");
  cmd->callback([opts, &run] { run = [opts] { return run_sample(*opts); }; });
}

}  // namespace pgdiffseg::cli
