#include <doctest.h>

#include <filesystem>
#include <set>
#include <sstream>

#include "vqla/dataio.hpp"
#include "vqla/error.hpp"

using namespace vqla;
using namespace vqla::dataio;
namespace fs = std::filesystem;

namespace {

const fs::path kFixtures = VQLA_FIXTURE_DIR;

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("vqla_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

DatasetManifest parse(const std::string& text) {
  std::istringstream in(text);
  return parse_manifest(in);
}

}  // namespace

TEST_CASE("fixture manifests have their hand-counted record counts") {
  const auto train = load_manifest(kFixtures / "endovis18_like_train.txt");
  const auto test = load_manifest(kFixtures / "endovis18_like_test.txt");
  const auto cross = load_manifest(kFixtures / "endovis17_like_test.txt");
  CHECK(train.records.size() == 9);
  CHECK(train.frame_ids().size() == 4);
  CHECK(test.records.size() == 5);
  CHECK(test.frame_ids().size() == 2);
  CHECK(cross.records.size() == 3);
  CHECK(train.split == "train");
  CHECK(train.image_width == 1280);
  CHECK(train.image_ext == ".png");
  CHECK(train.image_path(train.records[0]) == kFixtures / "images" / "seq_1/frame000.png");
  CHECK_NOTHROW(check_disjoint(train, test));
  const auto& r = train.records[4];
  CHECK(r.answer == "Retraction");
  CHECK(r.box.x_max() == doctest::Approx(1279.0 / 1280.0));
  const auto corrupted = load_manifest(kFixtures / "corrupted_small.txt");
  CHECK(corrupted.records.size() == 4);
  CHECK(corrupted.records[1].corruption == "gaussian_noise");
  CHECK(corrupted.records[1].severity == 5);
}

TEST_CASE("manifest round trip") {
  const auto m = load_manifest(kFixtures / "corrupted_small.txt");
  const auto again = parse(format_manifest(m));
  REQUIRE(again.records.size() == m.records.size());
  for (size_t i = 0; i < m.records.size(); ++i) {
    CHECK(again.records[i].frame_id == m.records[i].frame_id);
    CHECK(again.records[i].question == m.records[i].question);
    CHECK(again.records[i].box == m.records[i].box);
    CHECK(again.records[i].severity == m.records[i].severity);
  }
  CHECK(again.image_dir == m.image_dir);
  CHECK(again.image_width == 40);
}

TEST_CASE("manifest errors carry line numbers") {
  auto line_of = [](const std::string& text) {
    try {
      parse(text);
    } catch (const ParseError& e) {
      return e.line();
    }
    return -1;
  };
  CHECK(line_of("a | q | x | 0 0 1 1\n") == 1);  // before #size
  CHECK(line_of("#size=10x10\n\na | q | x | 0 0 1\n") == 3);
  CHECK(line_of("#size=10x10\na | q | x | 0 0 1 1 | k\n") == 2);
  CHECK(line_of("#size=10x10\na | q | x | 5 5 5 9\n") == 2);    // zero area
  CHECK(line_of("#size=10x10\na | q | x | 0 0 1 1 | k | high\n") == 2);
  CHECK(line_of("#size=ten\n") == 1);
  CHECK(line_of("#size=10x10\n | q | x | 0 0 1 1\n") == 2);
}

TEST_CASE("leakage between splits is rejected") {
  const auto a = parse("#size=10x10\nf1 | q | x | 0 0 1 1\nf2 | q | x | 0 0 1 1\n");
  const auto b = parse("#size=10x10\nf3 | q | x | 0 0 1 1\nf2 | q | y | 0 0 2 2\n");
  CHECK_THROWS_AS(check_disjoint(a, b), IntegrityError);
}

TEST_CASE("boxes") {
  const auto b = BBox::from_pixel_corners(-5, 10, 50, 30, 40, 40);
  CHECK(b.x_min() == 0.0);
  CHECK(b.x_max() == 1.0);
  CHECK(b.cy == doctest::Approx(0.5));
  const auto px = b.to_pixel_corners(40, 40);
  CHECK(px[1] == doctest::Approx(10.0));
  CHECK(px[3] == doctest::Approx(30.0));
}

TEST_CASE("vocabularies") {
  const auto [qv, av] = build_vocabs({"What color is the Circle?", "where is the circle"}, {"red", "top_left", "red"});
  // Set union of normalized words plus the two specials.
  std::set<std::string> words = {"what", "color", "is", "the", "circle", "where"};
  CHECK(qv.size() == words.size() + 2);
  CHECK(qv.id("<pad>") == Vocab::kPad);
  CHECK(qv.id("zebra") == Vocab::kUnk);
  CHECK(av.size() == 2);
  CHECK(av.id("green") == -1);
  CHECK(av.token(av.id("top_left")) == "top_left");
  CHECK_THROWS_AS(av.token(7), IndexError);
  CHECK_THROWS_AS(Vocab::from_tokens({"a", "a"}, false), ConfigError);
  CHECK_THROWS_AS(build_vocabs({}, {"x"}), ConfigError);

  const auto ids = tokenize("where is the zebra", qv, 6);
  CHECK(ids.size() == 6);
  CHECK(ids[3] == Vocab::kUnk);
  CHECK(ids[4] == Vocab::kPad);
  CHECK(tokenize("what color is the circle where is", qv, 3).size() == 3);
  CHECK(detokenize(tokenize("where is the circle", qv, 6), qv) == "where is the circle");
  CHECK_THROWS_AS(tokenize("x", qv, 0), ConfigError);
}

TEST_CASE("question types") {
  CHECK(classify_question("where is the square") == QuestionType::kLocation);
  CHECK(classify_question("what color is the circle") == QuestionType::kAttribute);
  CHECK(classify_question("is the triangle small or large") == QuestionType::kState);
  CHECK(classify_question("which shape is red") == QuestionType::kIdentity);
  CHECK(std::string(question_type_name(QuestionType::kAttribute)) == "tissue");
  for (const auto& t : default_templates()) {
    std::string q = t.text;
    for (const auto& [key, value] : {std::pair<std::string, std::string>{"{color}", "blue"}, {"{shape}", "circle"}}) {
      const auto pos = q.find(key);
      if (pos != std::string::npos) q.replace(pos, key.size(), value);
    }
    CHECK_MESSAGE(classify_question(q) == t.type, q);
  }
}

TEST_CASE("rasterized shapes") {
  SyntheticObject sq{"square", "red", "small", 2, 3, 5, {}};
  CHECK(tight_box(sq, 20) == std::array<int, 4>{2, 3, 7, 8});
  SyntheticObject tri{"triangle", "red", "large", 0, 0, 9, {}};
  const auto tb = tight_box(tri, 20);
  CHECK(tb[1] == 0);
  CHECK(tb[3] == 9);
  long painted = 0;
  for (int y = 0; y < 20; ++y) {
    for (int x = 0; x < 20; ++x) painted += object_covers(tri, x, y);
  }
  CHECK(painted > 0);
  CHECK(painted < 81);
  SyntheticObject outside{"circle", "red", "small", 30, 30, 5, {}};
  CHECK_THROWS_AS(tight_box(outside, 20), GenerationError);
  CHECK(quadrant_label({0, 0, 4, 4}, 20) == "top_left");
  CHECK(quadrant_label({12, 14, 18, 19}, 20) == "bottom_right");
}

TEST_CASE("synthetic generation") {
  SyntheticConfig cfg;
  cfg.train_samples = 40;
  cfg.test_samples = 20;
  const auto data = generate_synthetic(cfg);
  CHECK(data.train.records.size() == 40);
  CHECK(data.test.records.size() == 20);
  CHECK_NOTHROW(check_disjoint(data.train, data.test));
  for (const auto& r : data.train.records) {
    const auto& scene = data.scenes.at(r.frame_id);
    // The answer names a property of the object whose tight box is the target.
    bool found = false;
    for (const auto& o : scene.objects) {
      const auto& p = o.pixel_box;
      if (p[0] == r.pixel_box[0] && p[1] == r.pixel_box[1] && p[2] == r.pixel_box[2] && p[3] == r.pixel_box[3]) {
        found = r.answer == o.shape || r.answer == o.color || r.answer == o.size_label ||
                r.answer == quadrant_label(o.pixel_box, cfg.image_size);
      }
    }
    CHECK_MESSAGE(found, r.frame_id);
    CHECK(data.images.at(r.frame_id).height == cfg.image_size);
  }
  // Same seeds, same data.
  const auto again = generate_synthetic(cfg);
  CHECK(format_manifest(again.train) == format_manifest(data.train));
  CHECK(again.images.begin()->second.data == data.images.begin()->second.data);

  auto bad = cfg;
  bad.test_seed = bad.train_seed;
  CHECK_THROWS_AS(generate_synthetic(bad), ConfigError);
  bad = cfg;
  bad.colors = {"mauve"};
  CHECK_THROWS_AS(generate_synthetic(bad), ConfigError);
  bad = cfg;
  bad.min_objects = 3;
  bad.max_objects = 3;
  bad.large_min = bad.large_max = bad.small_min = bad.small_max = 19;
  bad.max_retries = 5;
  CHECK_THROWS_AS(generate_synthetic(bad), GenerationError);
}

TEST_CASE("synthetic data on disk materializes identically") {
  SyntheticConfig cfg;
  cfg.train_samples = 6;
  cfg.test_samples = 4;
  const auto data = generate_synthetic(cfg);
  const auto dir = scratch_dir("synth");
  write_synthetic(data, dir);
  const auto m = load_manifest(dir / "train.txt");
  const auto labels = Vocab::labels({"circle", "square", "triangle", "red", "green", "blue", "yellow", "small", "large",
                                     "top_left", "top_right", "bottom_left", "bottom_right"});
  const auto from_disk = materialize(m, labels);
  const auto from_memory = materialize(data.train, labels, &data.images);
  REQUIRE(from_disk.size() == from_memory.size());
  for (size_t i = 0; i < from_disk.size(); ++i) {
    CHECK(from_disk[i].image.data == from_memory[i].image.data);
    CHECK(from_disk[i].answer_class == from_memory[i].answer_class);
    CHECK(from_disk[i].answer_class >= 0);
  }
  fs::remove_all(dir);
}
