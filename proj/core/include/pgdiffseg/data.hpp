#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <torch/types.h>

namespace pgdiffseg {

// One item. image: [H, W] float in [-1, 1]; mask: [H, W] float in {0, 1}.
struct Sample {
  torch::Tensor image;
  torch::Tensor mask;
  bool has_tumor = false;
  std::string source_id;
};

// Diffusion target for a stored {0, 1} mask: background -1, tumour +1.
torch::Tensor mask_to_signal(const torch::Tensor& mask);

// Stacks samples into [B, 1, H, W] image and {0,1} mask batches.
struct Batch {
  torch::Tensor images;
  torch::Tensor masks;
  torch::Tensor has_tumor;  // [B] float
};
Batch collate(const std::vector<Sample>& samples, std::size_t begin, std::size_t end);
Batch collate(const std::vector<const Sample*>& samples);

enum class IntensityRescale {
  none,      // raw values already on the 0..255 scale
  per_item,  // min-max each raw image to 0..255 first
};

struct PreprocessConfig {
  double window_lo = 30.0;
  double window_hi = 235.0;
  IntensityRescale rescale = IntensityRescale::none;
  int target_size = 128;

  // Breast MRI: per-patient normalisation to [0, 255], then [20, 200].
  static PreprocessConfig mri(int target_size = 128);
  // Ultrasound: native [0, 255], truncated to [30, 235].
  static PreprocessConfig ultrasound(int target_size = 128);

  void validate() const;
  std::string hash() const;
};

struct PreprocessResult {
  Sample sample;
  bool degenerate = false;  // constant raw image under per-item rescale
};

// raw_image / raw_mask: 2-D tensors of any real dtype and equal size.
PreprocessResult preprocess(const torch::Tensor& raw_image, const torch::Tensor& raw_mask,
                            const PreprocessConfig& cfg, std::string source_id = {});

// {original, h-flip, v-flip, rot90, rot180, rot270}; square inputs only.
std::vector<Sample> augment_sixfold(const Sample& sample);
std::vector<Sample> augment_sixfold(const std::vector<Sample>& samples);

struct DatasetSplits {
  std::vector<Sample> train, val, test;
  std::vector<std::string> skipped;  // images without a mask partner
};

struct SplitFractions {
  double train = 0.7;
  double val = 0.1;  // test takes the remainder
};

// Group counts per split: round(n * train), round(n * val), remainder.
std::array<std::size_t, 3> split_counts(std::size_t groups, const SplitFractions& f);

// Directory layout: either flat, or one subdirectory per class (e.g. normal/,
// benign/, malignant/), split independently and concatenated. Files are
// `<id>.png` with `<id>_mask.png` (extra `<id>_mask_<k>.png` masks are OR-ed
// in). Items sharing the prefix of `<id>` before the first "__" form one
// group (patient) and always land in the same split.
DatasetSplits load_dataset_dir(const std::filesystem::path& root, const PreprocessConfig& cfg,
                               const SplitFractions& fractions = {});

struct Ellipse {
  double cx, cy;  // centre in pixel coordinates (pixel (x, y) has centre x, y)
  double a, b;    // semi-axes along the rotated x / y
  double theta;   // rotation, radians
  double brightness;
};

struct SyntheticScene {
  Sample sample;
  std::vector<Ellipse> ellipses;
};

// Textured background plus 0-2 bright ellipses with additive noise; about
// 15% of scenes contain no ellipse. Deterministic in (n, size, seed).
std::vector<SyntheticScene> make_synthetic_scenes(std::size_t n, int size, std::uint64_t seed);
std::vector<Sample> make_synthetic_dataset(std::size_t n, int size, std::uint64_t seed);

// Grayscale image file as [H, W] float64 raw values (colour inputs are converted).
torch::Tensor read_grayscale(const std::filesystem::path& path);
// 8-bit PNG of `values` linearly mapped from [lo, hi] to [0, 255].
void write_png(const std::filesystem::path& path, const torch::Tensor& values, double lo = 0.0,
               double hi = 1.0);

// Cache of preprocessed splits: keyed archive of arrays plus manifest.json
// listing split membership and the preprocessing config hash.
void save_dataset_cache(const std::filesystem::path& dir, const DatasetSplits& splits,
                        const PreprocessConfig& cfg);
DatasetSplits load_dataset_cache(const std::filesystem::path& dir);

}  // namespace pgdiffseg
