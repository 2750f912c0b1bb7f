#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <random>
#include <string>

#include <unistd.h>

#include "pgdiffseg/network.hpp"
#include "pgdiffseg/trainer.hpp"

namespace fixture {

// Smallest model the architecture admits: 16x16 input, bottleneck 1x1.
inline pgdiffseg::ModelConfig tiny_model(int base = 8, int image = 16) {
  auto cfg = pgdiffseg::ModelConfig::with_base(base, image);
  cfg.time_embed_dim = 16;
  cfg.res_blocks = 1;
  cfg.sdb_layers = 2;
  cfg.group_norm_groups = 4;
  return cfg;
}

inline pgdiffseg::TrainConfig tiny_train(int steps = 20) {
  pgdiffseg::TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.learning_rate = 1e-3;
  cfg.diffusion_steps = steps;
  cfg.max_steps = 10;
  cfg.checkpoint_interval = 0;
  cfg.validation_interval = 0;
  cfg.validation_images = 2;
  cfg.validation_nfe = 5;
  cfg.log_interval = 0;
  cfg.seed = 7;
  return cfg;
}

// Directory removed on scope exit.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "t") {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("pgdiffseg-test-" + tag + "-" + std::to_string(::getpid()) + "-" +
             std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& p) const { return path_ / p; }

 private:
  std::filesystem::path path_;
};

inline bool tensors_bitwise_equal(const torch::Tensor& a, const torch::Tensor& b) {
  return a.sizes().equals(b.sizes()) && a.scalar_type() == b.scalar_type() && torch::equal(a, b);
}

}  // namespace fixture
