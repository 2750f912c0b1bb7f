#include "common.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "pgdiffseg/errors.hpp"
#include "pgdiffseg/logging.hpp"

#include <torch/torch.h>

namespace fs = std::filesystem;

namespace pgdiffseg::cli {

void add_common(CLI::App& cmd, CommonOptions& o) {
  cmd.add_option("--config", o.config, "YAML config file (flags override it)")
      ->check(CLI::ExistingFile);
  cmd.add_option("--seed", o.seed, "Run seed");
  cmd.add_option("--out-dir", o.out_dir, "Output directory (default: generated run directory)");
  cmd.add_option("--log-level", o.log_level, "debug, info, warn, error")
      ->check(CLI::IsMember({"debug", "info", "warn", "error"}));
}

void add_data(CLI::App& cmd, DataOptions& o, bool with_split) {
  cmd.add_option("--data", o.data, "Dataset directory (<id>.png + <id>_mask.png)");
  cmd.add_option("--synthetic", o.synthetic, "Use N generated synthetic samples instead of --data");
  cmd.add_option("--data-seed", o.data_seed, "Seed of the synthetic generator");
  cmd.add_option("--modality", o.modality, "Preprocessing preset: ultrasound or mri")
      ->check(CLI::IsMember({"ultrasound", "mri"}));
  if (with_split) {
    cmd.add_option("--split", o.split, "train, val or test")
        ->check(CLI::IsMember({"train", "val", "test"}));
    cmd.add_option("--limit", o.limit, "Use at most N images of the split (0: all)");
  }
}

void add_sampler(CLI::App& cmd, SamplerOptions& o) {
  cmd.add_option("--sampler", o.kind, "ancestral, ddim or dpm2")
      ->check(CLI::IsMember({"ancestral", "ddim", "dpm2"}));
  cmd.add_option("--nfe", o.nfe, "Denoiser evaluations (default: T)");
  cmd.add_option("--eta", o.eta, "DDIM stochasticity in [0, 1]");
  cmd.add_option("--threshold", o.threshold, "Binarisation threshold on x0");
}

void apply_log_level(const std::string& level) {
  if (level == "debug") set_log_level(LogLevel::debug);
  if (level == "info") set_log_level(LogLevel::info);
  if (level == "warn") set_log_level(LogLevel::warn);
  if (level == "error") set_log_level(LogLevel::error);
}

RunConfig base_config(const CommonOptions& common) {
  RunConfig cfg;
  if (!common.config.empty()) cfg = load_run_config(common.config, cfg);
  return cfg;
}

void apply_data_flags(RunConfig& cfg, const DataOptions& o) {
  if (!o.modality.empty()) {
    cfg.data.modality = modality_from_string(o.modality);
    cfg.data.preprocess = cfg.data.modality == Modality::mri ? PreprocessConfig::mri()
                                                             : PreprocessConfig::ultrasound();
  }
  if (!o.data.empty()) {
    cfg.data.path = o.data;
    cfg.data.synthetic = 0;
  }
  if (o.synthetic) cfg.data.synthetic = *o.synthetic;
  cfg.data.preprocess.target_size = cfg.model.image_size;
}

void apply_sampler_flags(SamplerConfig& cfg, const SamplerOptions& o) {
  if (!o.kind.empty()) cfg.kind = sampler_kind_from_string(o.kind);
  if (o.nfe) cfg.nfe = *o.nfe;
  if (o.eta) cfg.eta = *o.eta;
  if (o.threshold) cfg.binarize_threshold = *o.threshold;
}

DatasetSplits load_data(const RunConfig& cfg, std::uint64_t synthetic_seed) {
  if (cfg.data.synthetic > 0) {
    auto all = make_synthetic_dataset(cfg.data.synthetic, cfg.model.image_size, synthetic_seed);
    const auto counts = split_counts(all.size(), cfg.data.fractions);
    DatasetSplits s;
    for (std::size_t i = 0; i < all.size(); ++i) {
      auto& dst = i < counts[0] ? s.train : i < counts[0] + counts[1] ? s.val : s.test;
      dst.push_back(std::move(all[i]));
    }
    log_info("synthetic data: " + std::to_string(s.train.size()) + "/" +
             std::to_string(s.val.size()) + "/" + std::to_string(s.test.size()) +
             " (train/val/test)");
    return s;
  }
  if (cfg.data.path.empty()) {
    throw UsageError("no dataset given: pass --data <dir> or --synthetic <n>");
  }
  if (!fs::is_directory(cfg.data.path)) {
    throw UsageError("--data: dataset directory not found: " + cfg.data.path.string());
  }
  const auto& cache = cfg.data.cache;
  if (!cache.empty() && fs::exists(cache / "manifest.json")) {
    std::ifstream in(cache / "manifest.json");
    const auto manifest = nlohmann::json::parse(in);
    if (manifest.value("preprocess_hash", "") == cfg.data.preprocess.hash()) {
      log_info("using preprocessed cache " + cache.string());
      return load_dataset_cache(cache);
    }
    log_warn("cache " + cache.string() + " was built with different preprocessing; rebuilding");
  }
  auto splits = load_dataset_dir(cfg.data.path, cfg.data.preprocess, cfg.data.fractions);
  if (!cache.empty()) save_dataset_cache(cache, splits, cfg.data.preprocess);
  return splits;
}

const std::vector<Sample>& pick_split(const DatasetSplits& s, const std::string& name) {
  if (name == "train") return s.train;
  if (name == "val") return s.val;
  if (name == "test") return s.test;
  throw UsageError("--split must be train, val or test");
}

std::vector<Sample> limit_samples(const std::vector<Sample>& s, std::size_t limit) {
  if (limit == 0 || limit >= s.size()) return s;
  return {s.begin(), s.begin() + static_cast<std::ptrdiff_t>(limit)};
}

fs::path run_dir(const CommonOptions& o, const std::string& command, const RunConfig& cfg) {
  fs::path dir;
  if (!o.out_dir.empty()) {
    dir = o.out_dir;
  } else {
    const char* env = std::getenv("PGDIFFSEG_OUTPUT_ROOT");
    const fs::path root = env && *env ? env : "runs";
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    localtime_r(&now, &tm);
    std::ostringstream name;
    name << command << '-' << std::put_time(&tm, "%Y%m%d-%H%M%S") << '-' << config_hash(cfg);
    dir = root / name.str();
  }
  fs::create_directories(dir);
  return dir;
}

RunConfig config_for_checkpoint(const LoadedModel& m, RunConfig base) {
  base.model = m.model_config;
  base.train = m.train_config;
  base.data.preprocess.target_size = m.model_config.image_size;
  return base;
}

Inference open_inference(const std::string& checkpoint, const CommonOptions& common,
                         const DataOptions& data, const SamplerOptions& sampler,
                         const std::string& image, const std::string& mask) {
  if (checkpoint.empty()) throw UsageError("--checkpoint is required");
  Inference inf;
  inf.loaded = load_checkpoint(checkpoint);
  inf.cfg = config_for_checkpoint(inf.loaded, base_config(common));
  apply_data_flags(inf.cfg, data);
  apply_sampler_flags(inf.cfg.sampler, sampler);
  if (common.seed) inf.cfg.sampler.seed = *common.seed;
  inf.cfg.sampler = inf.cfg.sampler.resolved(inf.loaded.schedule);
  if (!image.empty()) {
    const auto raw = read_grayscale(image);
    const auto raw_mask = mask.empty() ? torch::zeros_like(raw) : read_grayscale(mask);
    auto res = preprocess(raw, raw_mask, inf.cfg.data.preprocess, fs::path(image).stem().string());
    if (res.degenerate) log_warn("constant input image; mapped to -1");
    inf.items.push_back(std::move(res.sample));
    return inf;
  }
  const auto splits = load_data(inf.cfg, data.data_seed.value_or(inf.loaded.train_config.seed));
  inf.items = limit_samples(pick_split(splits, data.split), data.limit);
  if (inf.items.empty()) throw InvalidArgument("split '" + data.split + "' is empty");
  return inf;
}

std::string file_stem_for(const std::string& source_id) {
  std::string out = source_id;
  for (auto& c : out) {
    if (c == '/' || c == '\\' || c == '#' || c == ' ' || c == ':') c = '_';
  }
  return out.empty() ? "image" : out;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

}  // namespace pgdiffseg::cli
