#pragma once

#include <filesystem>
#include <map>
#include <string>

#include <nlohmann/json.hpp>
#include <torch/types.h>

namespace pgdiffseg {

// Self-describing keyed archive of named arrays plus a JSON metadata block.
//
// Layout (little-endian):
//   8 bytes   magic "PGDSARC1"
//   u64       header length in bytes
//   header    UTF-8 JSON: {"format_version": 1, "meta": {...},
//             "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
//   payload   raw contiguous tensor bytes; offsets are relative to the
//             payload start and 64-byte aligned.
//
// dtype is one of f32, f64, i64, i32, u8.
class TensorArchive {
 public:
  static constexpr int kFormatVersion = 1;

  nlohmann::json& meta() noexcept { return meta_; }
  const nlohmann::json& meta() const noexcept { return meta_; }

  void put(const std::string& name, const torch::Tensor& t);
  const torch::Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const { return tensors_.count(name) > 0; }
  const std::map<std::string, torch::Tensor>& tensors() const noexcept { return tensors_; }

  void save(const std::filesystem::path& path) const;
  static TensorArchive load(const std::filesystem::path& path);

 private:
  nlohmann::json meta_ = nlohmann::json::object();
  std::map<std::string, torch::Tensor> tensors_;
};

}  // namespace pgdiffseg
