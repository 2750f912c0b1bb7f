#include "pgdiffseg/archive.hpp"

#include <array>
#include <cstring>
#include <fstream>

#include <torch/torch.h>

#include "pgdiffseg/errors.hpp"

namespace pgdiffseg {

namespace {

constexpr std::array<char, 8> kMagic{'P', 'G', 'D', 'S', 'A', 'R', 'C', '1'};
constexpr std::uint64_t kAlign = 64;

std::string dtype_name(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32: return "f32";
    case torch::kFloat64: return "f64";
    case torch::kInt64: return "i64";
    case torch::kInt32: return "i32";
    case torch::kUInt8: return "u8";
    default: throw InvalidArgument("archive: unsupported dtype " + std::string(c10::toString(t)));
  }
}

torch::ScalarType dtype_from(const std::string& s) {
  if (s == "f32") return torch::kFloat32;
  if (s == "f64") return torch::kFloat64;
  if (s == "i64") return torch::kInt64;
  if (s == "i32") return torch::kInt32;
  if (s == "u8") return torch::kUInt8;
  throw IoError("archive: unknown dtype '" + s + "'");
}

std::uint64_t align_up(std::uint64_t v) { return (v + kAlign - 1) / kAlign * kAlign; }

}  // namespace

void TensorArchive::put(const std::string& name, const torch::Tensor& t) {
  dtype_name(t.scalar_type());
  tensors_[name] = t.detach().to(torch::kCPU).contiguous().clone();
}

const torch::Tensor& TensorArchive::get(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw IoError("archive: missing tensor '" + name + "'");
  return it->second;
}

void TensorArchive::save(const std::filesystem::path& path) const {
  nlohmann::json header;
  header["format_version"] = kFormatVersion;
  header["meta"] = meta_;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors_) {
    const auto nbytes = static_cast<std::uint64_t>(t.numel() * t.element_size());
    header["tensors"].push_back({{"name", name},
                                 {"dtype", dtype_name(t.scalar_type())},
                                 {"shape", t.sizes().vec()},
                                 {"offset", offset},
                                 {"nbytes", nbytes}});
    offset = align_up(offset + nbytes);
  }
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(kMagic.data(), kMagic.size());
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  std::uint64_t written = 0;
  static const std::array<char, kAlign> zeros{};
  for (const auto& [name, t] : tensors_) {
    const auto nbytes = static_cast<std::uint64_t>(t.numel() * t.element_size());
    out.write(static_cast<const char*>(t.data_ptr()), static_cast<std::streamsize>(nbytes));
    written += nbytes;
    const auto pad = align_up(written) - written;
    out.write(zeros.data(), static_cast<std::streamsize>(pad));
    written += pad;
  }
  if (!out) throw IoError("failed writing " + path.string());
}

TensorArchive TensorArchive::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw IoError(path.string() + " is not a tensor archive");
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || len > (1ULL << 32)) throw IoError(path.string() + ": corrupt header length");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError(path.string() + ": truncated header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": bad header: " + e.what());
  }
  if (header.value("format_version", 0) != kFormatVersion) {
    throw IoError(path.string() + ": unsupported archive version");
  }
  TensorArchive ar;
  ar.meta_ = header.value("meta", nlohmann::json::object());
  const auto payload = static_cast<std::streamoff>(in.tellg());
  for (const auto& entry : header.at("tensors")) {
    const auto name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<std::vector<int64_t>>();
    const auto offset = entry.at("offset").get<std::uint64_t>();
    const auto nbytes = entry.at("nbytes").get<std::uint64_t>();
    auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype_from(entry.at("dtype"))));
    if (static_cast<std::uint64_t>(t.numel() * t.element_size()) != nbytes) {
      throw IoError(path.string() + ": size mismatch for '" + name + "'");
    }
    in.seekg(payload + static_cast<std::streamoff>(offset));
    in.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(nbytes));
    if (!in) throw IoError(path.string() + ": truncated tensor '" + name + "'");
    ar.tensors_[name] = t;
  }
  return ar;
}

}  // namespace pgdiffseg
