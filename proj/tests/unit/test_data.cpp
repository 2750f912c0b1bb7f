#include <doctest.h>

#include <algorithm>
#include <cstring>
#include <set>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <torch/torch.h>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "pgdiffseg/data.hpp"
#include "pgdiffseg/errors.hpp"

using namespace pgdiffseg;
namespace fs = std::filesystem;

namespace {

PreprocessConfig mri_window_no_rescale(int size) {
  auto cfg = PreprocessConfig::mri(size);
  cfg.rescale = IntensityRescale::none;
  return cfg;
}

bool is_binary(const torch::Tensor& m) { return ((m == 0) | (m == 1)).all().item<bool>(); }

void write_u8(const fs::path& p, const cv::Mat& m) {
  fs::create_directories(p.parent_path());
  REQUIRE(cv::imwrite(p.string(), m));
}

// Writes `<id>.png` and `<id>_mask.png` with a square lesion unless `id`
// starts with "empty".
void write_pair(const fs::path& dir, const std::string& id, int size = 20, bool mask = true) {
  cv::Mat img(size, size, CV_8UC1, cv::Scalar(60));
  cv::Mat m(size, size, CV_8UC1, cv::Scalar(0));
  if (id.rfind("empty", 0) != 0) {
    cv::rectangle(img, {4, 4}, {10, 10}, cv::Scalar(220), cv::FILLED);
    cv::rectangle(m, {4, 4}, {10, 10}, cv::Scalar(255), cv::FILLED);
  }
  write_u8(dir / (id + ".png"), img);
  if (mask) write_u8(dir / (id + "_mask.png"), m);
}

std::vector<std::string> ids_of(const std::vector<Sample>& s) {
  std::vector<std::string> out;
  for (const auto& x : s) out.push_back(x.source_id);
  return out;
}

}  // namespace

TEST_SUITE("data") {

TEST_CASE("window mapping examples") {
  const auto cfg = mri_window_no_rescale(4);
  auto mask = torch::zeros({4, 4});
  auto r = preprocess(torch::full({4, 4}, 50.0), mask, cfg);
  CHECK(r.sample.image.sizes() == std::vector<int64_t>{4, 4});
  CHECK((r.sample.image - (-2.0 / 3.0)).abs().max().item<double>() < 1e-6);
  CHECK(preprocess(torch::full({4, 4}, 200.0), mask, cfg).sample.image.min().item<double>() == 1.0);
  CHECK(preprocess(torch::full({4, 4}, 20.0), mask, cfg).sample.image.max().item<double>() == -1.0);
  CHECK_FALSE(r.sample.has_tumor);
}

TEST_CASE("random raw images land inside [-1, 1]") {
  torch::manual_seed(1);
  for (auto cfg : {PreprocessConfig::mri(32), PreprocessConfig::ultrasound(32)}) {
    for (int i = 0; i < 10; ++i) {
      auto raw = torch::rand({45, 37}) * 400 - 50;
      auto r = preprocess(raw, torch::rand({45, 37}), cfg);
      CHECK(r.sample.image.min().item<double>() >= -1.0);
      CHECK(r.sample.image.max().item<double>() <= 1.0);
      CHECK(r.sample.image.sizes() == std::vector<int64_t>{32, 32});
      CHECK(is_binary(r.sample.mask));
    }
  }
}

TEST_CASE("per-item rescale flags constant images") {
  auto r = preprocess(torch::full({8, 8}, 77.0), torch::zeros({8, 8}), PreprocessConfig::mri(8));
  CHECK(r.degenerate);
  CHECK((r.sample.image == -1.0).all().item<bool>());
  auto ok = preprocess(torch::arange(64.0).view({8, 8}), torch::zeros({8, 8}),
                       PreprocessConfig::mri(8));
  CHECK_FALSE(ok.degenerate);
  // Per-item rescale sends the brightest pixel to 255, which clips to +1.
  CHECK(ok.sample.image.max().item<double>() == 1.0);
  CHECK(ok.sample.image.min().item<double>() == -1.0);
}

TEST_CASE("mask thresholding and has_tumor") {
  auto raw_mask = torch::zeros({10, 10});
  raw_mask.index_put_({torch::indexing::Slice(2, 5), torch::indexing::Slice(2, 5)}, 40.0);
  raw_mask[0][0] = 15.0;  // below half of the maximum
  auto r = preprocess(torch::rand({10, 10}) * 255, raw_mask, PreprocessConfig::ultrasound(10));
  CHECK(is_binary(r.sample.mask));
  CHECK(r.sample.mask.sum().item<double>() == 9.0);
  CHECK(r.sample.has_tumor);
  auto down = preprocess(torch::rand({40, 40}) * 255,
                         torch::ones({40, 40}) * (torch::rand({40, 40}) > 0.5),
                         PreprocessConfig::ultrasound(16));
  CHECK(is_binary(down.sample.mask));
}

TEST_CASE("preprocess is the identity on normalized inputs at native size") {
  PreprocessConfig cfg{-1.0, 1.0, IntensityRescale::none, 16};
  auto img = torch::rand({16, 16}) * 2 - 1;
  auto r = preprocess(img, torch::zeros({16, 16}), cfg);
  CHECK(torch::allclose(r.sample.image, img, 1e-6, 1e-6));
  CHECK_THROWS_AS(preprocess(img, torch::zeros({8, 8}), cfg), InvalidArgument);
  cfg.window_lo = 2.0;
  CHECK_THROWS_AS(preprocess(img, torch::zeros({16, 16}), cfg), InvalidArgument);
}

TEST_CASE("six-fold augmentation") {
  auto base = make_synthetic_dataset(1, 24, 5).front();
  auto six = augment_sixfold(base);
  REQUIRE(six.size() == 6);
  const double area = base.mask.sum().item<double>();
  std::set<std::string> ids;
  for (const auto& s : six) {
    CHECK(s.mask.sum().item<double>() == area);
    CHECK(is_binary(s.mask));
    CHECK(s.image.sizes() == base.image.sizes());
    ids.insert(s.source_id);
  }
  CHECK(ids.size() == 6);
  CHECK(torch::equal(six[0].image, base.image));
  // rot180 applied to the emitted rot180 gives back the original.
  auto again = augment_sixfold(six[4]);
  CHECK(torch::equal(again[4].image, base.image));
  CHECK(torch::equal(again[4].mask, base.mask));
  CHECK(torch::equal(six[1].image, base.image.flip({1})));
  CHECK(torch::equal(six[2].image, base.image.flip({0})));

  Sample rect{torch::zeros({4, 6}), torch::zeros({4, 6}), false, "r"};
  CHECK_THROWS_AS(augment_sixfold(rect), InvalidArgument);
  CHECK(augment_sixfold(std::vector<Sample>{base, base}).size() == 12);
}

TEST_CASE("split counts follow 70/10/20") {
  CHECK(split_counts(10, {}) == std::array<std::size_t, 3>{7, 1, 2});
  CHECK(split_counts(64, {}) == std::array<std::size_t, 3>{45, 6, 13});
  CHECK(split_counts(100, {}) == std::array<std::size_t, 3>{70, 10, 20});
  CHECK_THROWS_AS(split_counts(10, {0.8, 0.3}), InvalidArgument);
}

TEST_CASE("flat directory split is deterministic and groups patients") {
  fixture::TempDir dir("flat");
  for (int g = 0; g < 10; ++g) {
    write_pair(dir.path(), "p" + std::to_string(g) + "__s0");
    write_pair(dir.path(), "p" + std::to_string(g) + "__s1");
  }
  const auto cfg = PreprocessConfig::ultrasound(16);
  auto a = load_dataset_dir(dir.path(), cfg);
  CHECK(a.train.size() == 14);
  CHECK(a.val.size() == 2);
  CHECK(a.test.size() == 4);
  auto b = load_dataset_dir(dir.path(), cfg);
  CHECK(ids_of(a.train) == ids_of(b.train));
  CHECK(ids_of(a.test) == ids_of(b.test));
  for (const auto& s : a.val) CHECK(s.source_id.substr(0, 2) == a.val.front().source_id.substr(0, 2));
  for (const auto& s : a.train) {
    CHECK(s.image.sizes() == std::vector<int64_t>{16, 16});
    CHECK(s.has_tumor);
  }
}

TEST_CASE("split membership ignores file creation order") {
  fixture::TempDir d1("ord1"), d2("ord2");
  std::vector<std::string> ids;
  for (int g = 0; g < 10; ++g) ids.push_back("case" + std::to_string(g));
  for (const auto& id : ids) write_pair(d1.path(), id);
  for (auto it = ids.rbegin(); it != ids.rend(); ++it) write_pair(d2.path(), *it);
  const auto cfg = PreprocessConfig::ultrasound(16);
  auto a = load_dataset_dir(d1.path(), cfg), b = load_dataset_dir(d2.path(), cfg);
  CHECK(ids_of(a.train) == ids_of(b.train));
  CHECK(ids_of(a.val) == ids_of(b.val));
  CHECK(ids_of(a.test) == ids_of(b.test));
}

TEST_CASE("class subdirectories are split independently") {
  fixture::TempDir dir("busi");
  for (const char* cls : {"benign", "malignant", "normal"}) {
    for (int g = 0; g < 10; ++g) {
      const std::string id = std::string(std::strcmp(cls, "normal") == 0 ? "empty" : "") + cls +
                             std::to_string(g);
      write_pair(dir.path() / cls, id);
    }
  }
  auto s = load_dataset_dir(dir.path(), PreprocessConfig::ultrasound(16));
  CHECK(s.train.size() == 21);
  CHECK(s.val.size() == 3);
  CHECK(s.test.size() == 6);
  for (const char* cls : {"benign/", "malignant/", "normal/"}) {
    auto count = [&](const std::vector<Sample>& v) {
      return std::count_if(v.begin(), v.end(),
                           [&](const Sample& x) { return x.source_id.rfind(cls, 0) == 0; });
    };
    CHECK(count(s.train) == 7);
    CHECK(count(s.val) == 1);
    CHECK(count(s.test) == 2);
  }
  for (const auto& x : s.test) {
    if (x.source_id.rfind("normal/", 0) == 0) CHECK_FALSE(x.has_tumor);
  }
}

TEST_CASE("unpaired files are skipped and extra masks are merged") {
  fixture::TempDir dir("pairs");
  for (int g = 0; g < 10; ++g) write_pair(dir.path(), "c" + std::to_string(g));
  write_pair(dir.path(), "orphan", 20, false);
  cv::Mat extra(20, 20, CV_8UC1, cv::Scalar(0));
  cv::rectangle(extra, {14, 14}, {17, 17}, cv::Scalar(255), cv::FILLED);
  write_u8(dir.path() / "c0_mask_1.png", extra);
  auto s = load_dataset_dir(dir.path(), PreprocessConfig::ultrasound(20));
  REQUIRE(s.skipped.size() == 1);
  CHECK(s.skipped.front().find("orphan") != std::string::npos);
  CHECK(s.train.size() + s.val.size() + s.test.size() == 10);
  CHECK(s.train.front().source_id == "c0");
  CHECK(s.train.front().mask.sum().item<double>() == 49.0 + 16.0);
}

TEST_CASE("an empty split is an error") {
  fixture::TempDir dir("tiny");
  write_pair(dir.path(), "a");
  write_pair(dir.path(), "b");
  CHECK_THROWS_AS(load_dataset_dir(dir.path(), PreprocessConfig::ultrasound(16)), InvalidArgument);
  CHECK_THROWS_AS(load_dataset_dir(dir.path() / "missing", PreprocessConfig::ultrasound(16)),
                  IoError);
}

TEST_CASE("synthetic scenes are deterministic and masks are exact ellipse interiors") {
  auto a = make_synthetic_scenes(30, 32, 11), b = make_synthetic_scenes(30, 32, 11);
  auto c = make_synthetic_scenes(30, 32, 12);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(torch::equal(a[i].sample.image, b[i].sample.image));
    CHECK(torch::equal(a[i].sample.mask, b[i].sample.mask));
    any_diff = any_diff || !torch::equal(a[i].sample.image, c[i].sample.image);

    const auto& sc = a[i];
    CHECK(sc.sample.has_tumor == !sc.ellipses.empty());
    CHECK(sc.ellipses.size() <= 2);
    auto m = sc.sample.mask.accessor<float, 2>();
    int mismatches = 0;
    for (int y = 0; y < 32; ++y) {
      for (int x = 0; x < 32; ++x) {
        bool inside = false;
        for (const auto& e : sc.ellipses) inside = inside || oracle::inside_ellipse(e, x, y);
        if (inside != (m[y][x] == 1.0f)) ++mismatches;
      }
    }
    CHECK(mismatches == 0);
    CHECK(sc.sample.image.min().item<double>() >= -1.0);
    CHECK(sc.sample.image.max().item<double>() <= 1.0);
    CHECK(sc.sample.has_tumor == (sc.sample.mask.sum().item<double>() > 0));
  }
  CHECK(any_diff);
}

TEST_CASE("about fifteen percent of synthetic scenes are tumour-free") {
  auto scenes = make_synthetic_scenes(400, 16, 3);
  const auto empty = std::count_if(scenes.begin(), scenes.end(),
                                   [](const SyntheticScene& s) { return s.ellipses.empty(); });
  CHECK(empty >= 35);
  CHECK(empty <= 85);
  CHECK_THROWS_AS(make_synthetic_scenes(0, 16, 1), InvalidArgument);
}

TEST_CASE("collate and mask signal") {
  auto data = make_synthetic_dataset(5, 16, 2);
  auto b = collate(data, 1, 4);
  CHECK(b.images.sizes() == std::vector<int64_t>{3, 1, 16, 16});
  CHECK(b.masks.sizes() == std::vector<int64_t>{3, 1, 16, 16});
  CHECK(b.has_tumor.size(0) == 3);
  auto sig = mask_to_signal(data[0].mask);
  CHECK(((sig == -1) | (sig == 1)).all().item<bool>());
  CHECK_THROWS_AS(collate(data, 3, 3), InvalidArgument);
}

TEST_CASE("dataset cache round trip") {
  fixture::TempDir dir("cache");
  DatasetSplits s;
  auto data = make_synthetic_dataset(10, 16, 4);
  s.train.assign(data.begin(), data.begin() + 7);
  s.val.assign(data.begin() + 7, data.begin() + 8);
  s.test.assign(data.begin() + 8, data.end());
  const auto cfg = PreprocessConfig::ultrasound(16);
  save_dataset_cache(dir.path(), s, cfg);
  CHECK(fs::exists(dir / "manifest.json"));
  auto back = load_dataset_cache(dir.path());
  REQUIRE(back.train.size() == 7);
  REQUIRE(back.test.size() == 2);
  for (std::size_t i = 0; i < 7; ++i) {
    CHECK(torch::equal(back.train[i].image, s.train[i].image));
    CHECK(torch::equal(back.train[i].mask, s.train[i].mask));
    CHECK(back.train[i].source_id == s.train[i].source_id);
  }
  CHECK(cfg.hash() == PreprocessConfig::ultrasound(16).hash());
  CHECK(cfg.hash() != PreprocessConfig::mri(16).hash());
}

TEST_CASE("png round trip keeps 8-bit values") {
  fixture::TempDir dir("png");
  auto mask = (torch::rand({9, 7}) > 0.5).to(torch::kFloat32);
  write_png(dir / "m.png", mask);
  auto back = read_grayscale(dir / "m.png");
  CHECK(torch::equal(back, mask.to(torch::kFloat64) * 255));
  CHECK_THROWS_AS(read_grayscale(dir / "nope.png"), IoError);
}

}
