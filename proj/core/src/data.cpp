#include "pgdiffseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <torch/torch.h>

#include "pgdiffseg/archive.hpp"
#include "pgdiffseg/errors.hpp"
#include "pgdiffseg/logging.hpp"
#include "pgdiffseg/sampler.hpp"

namespace fs = std::filesystem;

namespace pgdiffseg {

torch::Tensor mask_to_signal(const torch::Tensor& mask) { return mask * 2.0 - 1.0; }

Batch collate(const std::vector<const Sample*>& samples) {
  if (samples.empty()) throw InvalidArgument("collate: empty batch");
  std::vector<torch::Tensor> imgs, masks;
  std::vector<float> tumor;
  for (const auto* s : samples) {
    imgs.push_back(s->image.unsqueeze(0));
    masks.push_back(s->mask.unsqueeze(0));
    tumor.push_back(s->has_tumor ? 1.0f : 0.0f);
  }
  return {torch::stack(imgs), torch::stack(masks), torch::tensor(tumor)};
}

Batch collate(const std::vector<Sample>& samples, std::size_t begin, std::size_t end) {
  std::vector<const Sample*> ptrs;
  for (std::size_t i = begin; i < end && i < samples.size(); ++i) ptrs.push_back(&samples[i]);
  return collate(ptrs);
}

PreprocessConfig PreprocessConfig::mri(int target_size) {
  return {20.0, 200.0, IntensityRescale::per_item, target_size};
}

PreprocessConfig PreprocessConfig::ultrasound(int target_size) {
  return {30.0, 235.0, IntensityRescale::none, target_size};
}

void PreprocessConfig::validate() const {
  if (!(window_lo < window_hi)) throw InvalidArgument("intensity window needs lo < hi");
  if (target_size < 1) throw InvalidArgument("target size must be positive");
}

std::string PreprocessConfig::hash() const {
  const nlohmann::json j = {{"lo", window_lo},
                            {"hi", window_hi},
                            {"rescale", rescale == IntensityRescale::per_item ? "per_item" : "none"},
                            {"size", target_size}};
  // FNV-1a over the canonical JSON text.
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : j.dump()) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace {

cv::Mat to_mat(const torch::Tensor& t) {
  auto d = t.detach().to(torch::kFloat64).contiguous();
  cv::Mat m(static_cast<int>(d.size(0)), static_cast<int>(d.size(1)), CV_64F);
  std::memcpy(m.data, d.data_ptr<double>(), sizeof(double) * static_cast<std::size_t>(d.numel()));
  return m;
}

torch::Tensor from_mat(const cv::Mat& m) {
  cv::Mat f;
  m.convertTo(f, CV_32F);
  return torch::from_blob(f.data, {f.rows, f.cols}, torch::kFloat32).clone();
}

}  // namespace

PreprocessResult preprocess(const torch::Tensor& raw_image, const torch::Tensor& raw_mask,
                            const PreprocessConfig& cfg, std::string source_id) {
  cfg.validate();
  if (raw_image.dim() != 2 || !raw_image.sizes().equals(raw_mask.sizes())) {
    throw InvalidArgument("preprocess: image and mask must be 2-D with equal size");
  }
  PreprocessResult res;
  auto img = raw_image.to(torch::kFloat64);
  if (cfg.rescale == IntensityRescale::per_item) {
    const double lo = img.min().item<double>(), hi = img.max().item<double>();
    if (hi > lo) {
      img = (img - lo) * (255.0 / (hi - lo));
    } else {
      res.degenerate = true;
    }
  }
  torch::Tensor mapped;
  if (res.degenerate) {
    mapped = torch::full_like(img, -1.0);
  } else {
    img = img.clamp(cfg.window_lo, cfg.window_hi);
    mapped = (img - cfg.window_lo) * (2.0 / (cfg.window_hi - cfg.window_lo)) - 1.0;
  }

  auto m = raw_mask.to(torch::kFloat64);
  const double mmax = m.max().item<double>();
  auto bin = mmax > 0.0 ? (m > 0.5 * mmax).to(torch::kFloat64) : torch::zeros_like(m);

  const int n = cfg.target_size;
  cv::Mat img_r, mask_r;
  if (mapped.size(0) == n && mapped.size(1) == n) {
    img_r = to_mat(mapped);
    mask_r = to_mat(bin);
  } else {
    cv::resize(to_mat(mapped), img_r, cv::Size(n, n), 0, 0, cv::INTER_LINEAR);
    cv::resize(to_mat(bin), mask_r, cv::Size(n, n), 0, 0, cv::INTER_NEAREST);
  }
  res.sample.image = from_mat(img_r).clamp(-1.0, 1.0);
  res.sample.mask = (from_mat(mask_r) > 0.5).to(torch::kFloat32);
  res.sample.has_tumor = res.sample.mask.sum().item<double>() > 0.0;
  res.sample.source_id = std::move(source_id);
  return res;
}

std::vector<Sample> augment_sixfold(const Sample& s) {
  if (s.image.dim() != 2 || s.image.size(0) != s.image.size(1)) {
    throw InvalidArgument("augment_sixfold needs square images");
  }
  auto variant = [&](const char* tag, auto&& op) {
    Sample out;
    out.image = op(s.image).contiguous();
    out.mask = op(s.mask).contiguous();
    out.has_tumor = s.has_tumor;
    out.source_id = s.source_id + "#" + tag;
    return out;
  };
  std::vector<Sample> out;
  out.reserve(6);
  out.push_back(variant("orig", [](const torch::Tensor& x) { return x.clone(); }));
  out.push_back(variant("hflip", [](const torch::Tensor& x) { return x.flip({1}); }));
  out.push_back(variant("vflip", [](const torch::Tensor& x) { return x.flip({0}); }));
  out.push_back(variant("rot90", [](const torch::Tensor& x) { return x.rot90(1, {0, 1}); }));
  out.push_back(variant("rot180", [](const torch::Tensor& x) { return x.rot90(2, {0, 1}); }));
  out.push_back(variant("rot270", [](const torch::Tensor& x) { return x.rot90(3, {0, 1}); }));
  return out;
}

std::vector<Sample> augment_sixfold(const std::vector<Sample>& samples) {
  std::vector<Sample> out;
  out.reserve(samples.size() * 6);
  for (const auto& s : samples) {
    auto six = augment_sixfold(s);
    std::move(six.begin(), six.end(), std::back_inserter(out));
  }
  return out;
}

std::array<std::size_t, 3> split_counts(std::size_t groups, const SplitFractions& f) {
  if (f.train < 0 || f.val < 0 || f.train + f.val > 1.0) {
    throw InvalidArgument("split fractions must be non-negative and sum to <= 1");
  }
  const auto g = static_cast<double>(groups);
  auto train = static_cast<std::size_t>(std::llround(g * f.train));
  auto val = static_cast<std::size_t>(std::llround(g * f.val));
  train = std::min(train, groups);
  val = std::min(val, groups - train);
  return {train, val, groups - train - val};
}

torch::Tensor read_grayscale(const fs::path& p) {
  cv::Mat m = cv::imread(p.string(), cv::IMREAD_UNCHANGED);
  if (m.empty()) throw IoError("cannot read image " + p.string());
  if (m.channels() == 3) cv::cvtColor(m, m, cv::COLOR_BGR2GRAY);
  if (m.channels() == 4) cv::cvtColor(m, m, cv::COLOR_BGRA2GRAY);
  cv::Mat f;
  m.convertTo(f, CV_64F);
  return torch::from_blob(f.data, {f.rows, f.cols}, torch::kFloat64).clone();
}

void write_png(const fs::path& path, const torch::Tensor& values, double lo, double hi) {
  if (values.dim() != 2) throw InvalidArgument("write_png expects a 2-D tensor");
  auto u8 = ((values.detach().to(torch::kFloat64).clamp(lo, hi) - lo) * (255.0 / (hi - lo)))
                .round()
                .to(torch::kUInt8)
                .contiguous();
  cv::Mat m(static_cast<int>(u8.size(0)), static_cast<int>(u8.size(1)), CV_8UC1,
            u8.data_ptr<uint8_t>());
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), m)) throw IoError("cannot write " + path.string());
}

namespace {

bool is_png(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
  return ext == ".png";
}

std::string group_of(const std::string& id) {
  const auto pos = id.find("__");
  return pos == std::string::npos ? id : id.substr(0, pos);
}

struct Pair {
  fs::path image;
  std::vector<fs::path> masks;
};

std::map<std::string, Pair> scan_pairs(const fs::path& dir, std::vector<std::string>& skipped) {
  std::map<std::string, Pair> pairs;
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && is_png(e.path())) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    const auto stem = f.stem().string();
    const auto pos = stem.find("_mask");
    if (pos != std::string::npos &&
        (pos + 5 == stem.size() || stem.compare(pos + 5, 1, "_") == 0)) {
      pairs[stem.substr(0, pos)].masks.push_back(f);
    } else {
      pairs[stem].image = f;
    }
  }
  for (auto it = pairs.begin(); it != pairs.end();) {
    if (it->second.image.empty() || it->second.masks.empty()) {
      const auto& p = it->second.image.empty() ? it->second.masks.front() : it->second.image;
      skipped.push_back(p.string());
      log_warn("skipping unpaired file " + p.string());
      it = pairs.erase(it);
    } else {
      ++it;
    }
  }
  return pairs;
}

void split_directory(const fs::path& dir, const std::string& prefix, const PreprocessConfig& cfg,
                     const SplitFractions& fractions, DatasetSplits& out) {
  auto pairs = scan_pairs(dir, out.skipped);
  std::map<std::string, std::vector<std::string>> groups;
  for (const auto& [id, _] : pairs) groups[group_of(id)].push_back(id);
  const auto counts = split_counts(groups.size(), fractions);
  std::size_t gi = 0;
  for (const auto& [group, ids] : groups) {
    auto& target = gi < counts[0] ? out.train : gi < counts[0] + counts[1] ? out.val : out.test;
    for (const auto& id : ids) {
      const auto& pair = pairs.at(id);
      auto image = read_grayscale(pair.image);
      auto mask = read_grayscale(pair.masks.front());
      for (std::size_t k = 1; k < pair.masks.size(); ++k) {
        mask = torch::maximum(mask, read_grayscale(pair.masks[k]));
      }
      if (!image.sizes().equals(mask.sizes())) {
        throw IoError("image/mask size mismatch for " + pair.image.string());
      }
      auto res = preprocess(image, mask, cfg, prefix + id);
      if (res.degenerate) log_warn("constant image mapped to -1: " + pair.image.string());
      target.push_back(std::move(res.sample));
    }
    ++gi;
  }
  log_info(dir.string() + ": " + std::to_string(groups.size()) + " groups -> " +
           std::to_string(counts[0]) + "/" + std::to_string(counts[1]) + "/" +
           std::to_string(counts[2]) + " (train/val/test)");
}

}  // namespace

DatasetSplits load_dataset_dir(const fs::path& root, const PreprocessConfig& cfg,
                               const SplitFractions& fractions) {
  if (!fs::is_directory(root)) throw IoError("dataset directory not found: " + root.string());
  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory()) class_dirs.push_back(e.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end());
  DatasetSplits out;
  if (class_dirs.empty()) {
    split_directory(root, "", cfg, fractions, out);
  } else {
    for (const auto& d : class_dirs) {
      split_directory(d, d.filename().string() + "/", cfg, fractions, out);
    }
  }
  for (const auto& [name, split] : {std::pair{"train", &out.train}, std::pair{"val", &out.val},
                                    std::pair{"test", &out.test}}) {
    if (split->empty()) {
      throw InvalidArgument(std::string("dataset split '") + name + "' is empty under " +
                            root.string());
    }
  }
  return out;
}

std::vector<SyntheticScene> make_synthetic_scenes(std::size_t n, int size, std::uint64_t seed) {
  if (n < 1) throw InvalidArgument("synthetic dataset needs n >= 1");
  if (size < 8) throw InvalidArgument("synthetic images need size >= 8");
  std::vector<SyntheticScene> scenes;
  scenes.reserve(n);
  const double s = size;
  for (std::size_t i = 0; i < n; ++i) {
    std::mt19937_64 rng(derive_seed(seed, i));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 0.08);

    SyntheticScene scene;
    const int count = u(rng) < 0.15 ? 0 : (u(rng) < 0.5 ? 1 : 2);
    for (int k = 0; k < count; ++k) {
      Ellipse e;
      e.cx = s * (0.2 + 0.6 * u(rng));
      e.cy = s * (0.2 + 0.6 * u(rng));
      e.a = s * (0.08 + 0.12 * u(rng));
      e.b = s * (0.08 + 0.12 * u(rng));
      e.theta = std::numbers::pi * u(rng);
      e.brightness = 0.7 + 0.4 * u(rng);
      scene.ellipses.push_back(e);
    }
    const double fx = 1.0 + 2.0 * u(rng), fy = 1.0 + 2.0 * u(rng);
    const double px = 2.0 * std::numbers::pi * u(rng), py = 2.0 * std::numbers::pi * u(rng);

    auto image = torch::empty({size, size}, torch::kFloat32);
    auto mask = torch::zeros({size, size}, torch::kFloat32);
    auto img_a = image.accessor<float, 2>();
    auto mask_a = mask.accessor<float, 2>();
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        double v = -0.6 + 0.15 * std::sin(2.0 * std::numbers::pi * fx * x / s + px) *
                              std::cos(2.0 * std::numbers::pi * fy * y / s + py);
        for (const auto& e : scene.ellipses) {
          const double dx = x - e.cx, dy = y - e.cy;
          const double c = std::cos(e.theta), sn = std::sin(e.theta);
          const double ux = (dx * c + dy * sn) / e.a, uy = (-dx * sn + dy * c) / e.b;
          if (ux * ux + uy * uy <= 1.0) {
            v += e.brightness;
            mask_a[y][x] = 1.0f;
          }
        }
        v += noise(rng);
        img_a[y][x] = static_cast<float>(std::clamp(v, -1.0, 1.0));
      }
    }
    scene.sample.image = image;
    scene.sample.mask = mask;
    scene.sample.has_tumor = !scene.ellipses.empty();
    scene.sample.source_id = "synthetic_" + std::to_string(i);
    scenes.push_back(std::move(scene));
  }
  return scenes;
}

std::vector<Sample> make_synthetic_dataset(std::size_t n, int size, std::uint64_t seed) {
  auto scenes = make_synthetic_scenes(n, size, seed);
  std::vector<Sample> out;
  out.reserve(scenes.size());
  for (auto& s : scenes) out.push_back(std::move(s.sample));
  return out;
}

namespace {

const char* kSplitNames[] = {"train", "val", "test"};

}  // namespace

void save_dataset_cache(const fs::path& dir, const DatasetSplits& splits,
                        const PreprocessConfig& cfg) {
  fs::create_directories(dir);
  TensorArchive ar;
  nlohmann::json manifest;
  manifest["preprocess_hash"] = cfg.hash();
  manifest["preprocess"] = {{"window", {cfg.window_lo, cfg.window_hi}},
                            {"rescale", cfg.rescale == IntensityRescale::per_item ? "per_item" : "none"},
                            {"target_size", cfg.target_size}};
  const std::vector<Sample>* parts[] = {&splits.train, &splits.val, &splits.test};
  for (int k = 0; k < 3; ++k) {
    auto& ids = manifest["splits"][kSplitNames[k]];
    ids = nlohmann::json::array();
    std::vector<torch::Tensor> imgs, masks;
    for (const auto& s : *parts[k]) {
      ids.push_back(s.source_id);
      imgs.push_back(s.image);
      masks.push_back(s.mask.to(torch::kUInt8));
    }
    if (!imgs.empty()) {
      ar.put(std::string(kSplitNames[k]) + "/images", torch::stack(imgs));
      ar.put(std::string(kSplitNames[k]) + "/masks", torch::stack(masks));
    }
  }
  ar.meta() = manifest;
  ar.save(dir / "samples.pgds");
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
}

DatasetSplits load_dataset_cache(const fs::path& dir) {
  auto ar = TensorArchive::load(dir / "samples.pgds");
  DatasetSplits out;
  std::vector<Sample>* parts[] = {&out.train, &out.val, &out.test};
  for (int k = 0; k < 3; ++k) {
    const auto& ids = ar.meta().at("splits").at(kSplitNames[k]);
    if (ids.empty()) continue;
    const auto imgs = ar.get(std::string(kSplitNames[k]) + "/images");
    const auto masks = ar.get(std::string(kSplitNames[k]) + "/masks").to(torch::kFloat32);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      Sample s;
      s.image = imgs[static_cast<int64_t>(i)].clone();
      s.mask = masks[static_cast<int64_t>(i)].clone();
      s.has_tumor = s.mask.sum().item<double>() > 0.0;
      s.source_id = ids[i].get<std::string>();
      parts[k]->push_back(std::move(s));
    }
  }
  return out;
}

}  // namespace pgdiffseg
