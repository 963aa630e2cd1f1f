#include <doctest.h>

#include <filesystem>
#include <map>

#include "vqla/corruptions.hpp"
#include "vqla/dataio.hpp"
#include "vqla/error.hpp"

using namespace vqla;
using namespace vqla::corruptions;
namespace fs = std::filesystem;

namespace {

std::vector<std::pair<std::string, Image>> scenes(int n) {
  dataio::SyntheticConfig cfg;
  cfg.train_samples = n;
  cfg.test_samples = 1;
  const auto data = dataio::generate_synthetic(cfg);
  std::vector<std::pair<std::string, Image>> out;
  for (const auto& id : data.train.frame_ids()) out.emplace_back(id, data.images.at(id));
  return out;
}

}  // namespace

TEST_CASE("registry: 19 kinds in four categories") {
  CHECK(registry().size() == 19);
  std::map<Category, int> counts;
  for (const auto& k : registry()) ++counts[k.category];
  CHECK(counts[Category::kNoise] == 4);
  CHECK(counts[Category::kBlur] == 5);
  CHECK(counts[Category::kOcclusion] == 4);
  CHECK(counts[Category::kDigital] == 6);
  CHECK(category_of("jpeg") == Category::kDigital);
  CHECK(category_of("smoke") == Category::kOcclusion);
  CHECK(is_kind("glass_blur"));
  CHECK_FALSE(is_kind("fog"));
  CHECK_THROWS_AS(category_of("fog"), ConfigError);
}

TEST_CASE("argument parsing") {
  CHECK(parse_kinds("all").size() == 19);
  CHECK(parse_kinds("jpeg, gamma") == std::vector<std::string>{"jpeg", "gamma"});
  CHECK_THROWS_AS(parse_kinds("jpeg,fog"), ConfigError);
  CHECK(parse_severities("1..5") == std::vector<int>{1, 2, 3, 4, 5});
  CHECK(parse_severities("3") == std::vector<int>{3});
  CHECK(parse_severities("1,2,5") == std::vector<int>{1, 2, 5});
  CHECK_THROWS_AS(parse_severities("0..6"), ConfigError);
  CHECK_THROWS_AS(parse_severities("x"), ConfigError);
}

TEST_CASE("every kind: identity at severity 0, bounded, deterministic, monotone on average") {
  const auto images = scenes(4);
  for (const auto& kind : all_kinds()) {
    std::vector<double> mse(kMaxSeverity + 1, 0.0);
    for (const auto& [id, img] : images) {
      CHECK(corrupt(img, {kind, 0, 1}, id).data == img.data);
      for (int s = 1; s <= kMaxSeverity; ++s) {
        const auto out = corrupt(img, {kind, s, 1}, id);
        REQUIRE(out.height == img.height);
        CHECK(out.channels == 3);
        const auto [lo, hi] = std::minmax_element(out.data.begin(), out.data.end());
        CHECK(*lo >= 0.0);
        CHECK(*hi <= 1.0);
        CHECK(out.data == corrupt(img, {kind, s, 1}, id).data);
        mse[s] += mean_squared_error(out, img) / static_cast<double>(images.size());
      }
    }
    CHECK_MESSAGE(mse[1] > 0.0, kind);
    for (int s = 2; s <= kMaxSeverity; ++s) CHECK_MESSAGE(mse[s] >= mse[s - 1], kind << " severity " << s);
  }
}

TEST_CASE("seeding") {
  const auto images = scenes(2);
  const auto& img = images[0].second;
  const auto a = corrupt(img, {"gaussian_noise", 3, 1}, "f0");
  CHECK(a.data != corrupt(img, {"gaussian_noise", 3, 2}, "f0").data);
  CHECK(a.data != corrupt(img, {"gaussian_noise", 3, 1}, "f1").data);
  CHECK(fnv1a("") == 14695981039346656037ULL);
  CHECK(fnv1a("a") == 0xaf63dc4c8601ec8cULL);
}

TEST_CASE("input checks") {
  const Image img(8, 8, 3);
  CHECK_THROWS_AS(corrupt(img, {"fog", 1, 0}), ConfigError);
  CHECK_THROWS_AS(corrupt(img, {"jpeg", 6, 0}), ConfigError);
  CHECK_THROWS_AS(corrupt(img, {"jpeg", -1, 0}), ConfigError);
  CHECK_THROWS_AS(corrupt(Image(8, 8, 1), {"jpeg", 1, 0}), ShapeError);
}

TEST_CASE("dataset corruption tree") {
  dataio::SyntheticConfig cfg;
  cfg.train_samples = 3;
  cfg.test_samples = 1;
  const auto data = dataio::generate_synthetic(cfg);
  const auto dir = fs::temp_directory_path() / "vqla_test_corrupt";
  fs::remove_all(dir);
  const auto report = corrupt_dataset(data.train, {"jpeg", "smoke"}, {1, 3}, 4, dir, &data.images);
  const auto frames = data.train.frame_ids().size();
  CHECK(report.written == static_cast<int>(4 * frames));
  CHECK(report.failures.empty());
  const auto combined = dataio::load_manifest(report.manifest);
  CHECK(combined.records.size() == 4 * data.train.records.size());
  for (const auto& r : combined.records) {
    CHECK(fs::exists(combined.image_path(r)));
    CHECK((r.severity == 1 || r.severity == 3));
  }
  const auto one = dataio::load_manifest(dir / "smoke" / "3" / "manifest.txt");
  CHECK(one.records.size() == data.train.records.size());
  const auto& r0 = one.records[0];
  CHECK(read_image(one.image_path(r0)).data ==
        quantize8(corrupt(data.images.at(r0.frame_id), {"smoke", 3, 4}, r0.frame_id)).data);
  fs::remove_all(dir);
}
