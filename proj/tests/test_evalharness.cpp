#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "common.hpp"
#include "vqla/config_io.hpp"
#include "vqla/error.hpp"
#include "vqla/evalharness.hpp"

using namespace vqla;
using namespace vqla::eval;
using dataio::BBox;
namespace fs = std::filesystem;

namespace {

// Small enough to train in well under a second per epoch.
TrainConfig small_config() {
  TrainConfig c;
  c.model = testing::tiny_model_config();
  c.model.encoder.image_size = 16;
  c.model.encoder.conv_channels = {4, 4, 4};
  c.synthetic.image_size = 16;
  c.synthetic.small_min = 3;
  c.synthetic.small_max = 4;
  c.synthetic.large_min = 5;
  c.synthetic.large_max = 6;
  c.synthetic.max_objects = 2;
  c.synthetic.train_samples = 12;
  c.synthetic.test_samples = 6;
  c.epochs = 2;
  c.batch_size = 4;
  c.learning_rate = 1e-3;
  c.seed = 3;
  c.model.seed = 3;
  return c;
}

}  // namespace

TEST_CASE("metrics on trivial inputs") {
  const std::vector<int> ref = {0, 1, 1, 2};
  CHECK(accuracy(ref, ref) == 1.0);
  CHECK(macro_f1(ref, ref) == 1.0);
  const std::vector<BBox> boxes = {{0.2, 0.2, 0.1, 0.1}, {0.5, 0.5, 0.3, 0.2}};
  CHECK(miou(boxes, boxes) == doctest::Approx(1.0));
  std::vector<BBox> shifted = boxes;
  for (auto& b : shifted) b.cx += b.w;
  CHECK(miou(shifted, boxes) == 0.0);
  CHECK(accuracy({1, 0, 1, 0}, {0, 1, 0, 1}) == 0.0);
  CHECK(macro_f1({1, 0, 1, 0}, {0, 1, 0, 1}) == 0.0);
  CHECK_THROWS_AS(accuracy({}, {}), EvaluationError);
  CHECK_THROWS_AS(macro_f1({1}, {1, 2}), EvaluationError);
  CHECK_THROWS_AS(miou({}, {}), EvaluationError);
}

TEST_CASE("macro F1 matches a confusion-matrix computation") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const int classes = 2 + static_cast<int>(rng() % 6);
    std::vector<int> pred(100), ref(100);
    for (int i = 0; i < 100; ++i) {
      pred[i] = static_cast<int>(rng() % classes);
      ref[i] = static_cast<int>(rng() % classes);
    }
    CHECK(std::abs(macro_f1(pred, ref) - testing::confusion_macro_f1(pred, ref, classes)) < 1e-9);
  }
}

TEST_CASE("report breakdown and serialization") {
  using T = dataio::QuestionType;
  const std::vector<int> pred = {0, 1, 2, 2, 1};
  const std::vector<int> ref = {0, 1, 1, 2, 0};
  const std::vector<BBox> pb(5, BBox{0.5, 0.5, 0.2, 0.2});
  const std::vector<BBox> rb(5, BBox{0.55, 0.5, 0.2, 0.2});
  const auto r = compute_report(pred, ref, pb, rb, {T::kLocation, T::kLocation, T::kState, T::kIdentity, T::kIdentity});
  long total = 0;
  for (const auto& t : r.by_type) total += t.count;
  CHECK(total == r.count);
  CHECK(r.by_type.size() == 4);
  CHECK(r.by_type[0].type == "tissue");
  CHECK(r.by_type[0].count == 0);
  CHECK(r.accuracy == doctest::Approx(0.6));
  CHECK(MetricsReport::from_json(nlohmann::json::parse(r.to_json().dump())) == r);
  CHECK(r.to_text().find("mIoU") != std::string::npos);
}

TEST_CASE("spearman") {
  CHECK(spearman({1, 2, 3, 4}, {10, 20, 30, 40}) == doctest::Approx(1.0));
  CHECK(spearman({1, 2, 3, 4}, {4, 3, 2, 1}) == doctest::Approx(-1.0));
  CHECK(spearman({1, 2, 3, 4, 5}, {0.9, 0.9, 0.8, 0.8, 0.5}) == doctest::Approx(-0.9486832980505138));
  CHECK(spearman({1, 2, 3}, {5, 5, 5}) == 0.0);
  CHECK_THROWS_AS(spearman({1}, {1}), EvaluationError);
}

TEST_CASE("train config parsing") {
  const auto c = TrainConfig::from_json(parse_config_text("epochs = 3\nbox = ciou\nadversarial = off\ndim = 64\n"));
  CHECK(c.epochs == 3);
  CHECK(c.loss.box == losses::BoxLoss::kCIoU);
  CHECK_FALSE(c.adversarial.enabled);
  CHECK(c.model.encoder.dim == 64);
  CHECK(TrainConfig::from_json(c.to_json()).to_json() == c.to_json());
  const auto nested = TrainConfig::from_json(
      parse_config_text(R"({"train": {"epochs": 5}, "loss": {"qa": "ce"}, "model": {"depth": 2}})"));
  CHECK(nested.epochs == 5);
  CHECK(nested.loss.qa == losses::QALoss::kCE);
  CHECK(nested.model.backbone.depth == 2);
  CHECK_THROWS_AS(TrainConfig::from_json(parse_config_text("epoch = 3\n")), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json(parse_config_text("learning_rate = -1\n")), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json(parse_config_text("box = smooth\n")), ConfigError);
  const TrainConfig defaults;
  CHECK(defaults.epochs == 80);
  CHECK(defaults.batch_size == 64);
  CHECK(defaults.learning_rate == 1e-5);
  CHECK(config_diff(defaults, c) == std::set<std::string>{"epochs", "box", "adversarial", "dim"});
}

TEST_CASE("ablation grids") {
  const TrainConfig base;
  std::map<std::string, size_t> expected = {{"loss_grid", 8},  {"iou_grid", 4},         {"attn_modes", 5},
                                            {"coattn_depth", 5}, {"alpha_beta_grid", 10}, {"module_knockout", 5}};
  CHECK(ablation_names().size() == expected.size());
  for (const auto& name : ablation_names()) {
    const auto t = ablation_grid(name, base);
    CHECK_MESSAGE(t.rows.size() == expected.at(name), name);
    for (const auto& row : t.rows) {
      for (const auto& key : row.changed) CHECK_MESSAGE(t.knob.count(key) == 1, name << ": " << row.label << " " << key);
    }
  }
  const auto depth = ablation_grid("coattn_depth", base);
  std::vector<int> layers;
  for (const auto& r : depth.rows) layers.push_back(r.config.model.fusion.n_coattn_layers);
  CHECK(layers == std::vector<int>{2, 4, 6, 8, 10});
  const auto ab = ablation_grid("alpha_beta_grid", base);
  CHECK(ab.rows.back().label == "w/o CTAS");
  CHECK_FALSE(ab.rows.back().config.adversarial.enabled);
  const auto ko = ablation_grid("module_knockout", base);
  CHECK(ko.rows.back().changed.size() == 4);
  CHECK_THROWS_AS(ablation_grid("everything", base), ConfigError);
}

TEST_CASE("training, determinism and checkpoint evaluation") {
  const auto cfg = small_config();
  const auto data = load_dataset(cfg);
  CHECK(data.train.size() == 12);
  const auto dir = fs::temp_directory_path() / "vqla_test_train";
  fs::remove_all(dir);
  TrainOptions options;
  options.validation = &data.test;
  options.checkpoint = dir / "model.bin";
  const auto a = train(cfg, data.train, data.question_vocab, data.answer_vocab, options);
  const auto b = train(cfg, data.train, data.question_vocab, data.answer_vocab);
  CHECK(a.steps == 6);
  CHECK(a.curve.size() == 6);
  CHECK(a.best_epoch >= 0);
  for (size_t i = 0; i < a.curve.size(); ++i) CHECK(a.curve[i].total == b.curve[i].total);
  for (const auto& bundle : a.curve) {
    CHECK(bundle.total == doctest::Approx(bundle.clean_loss + bundle.perturbed_loss + bundle.contrastive_loss));
  }

  // The checkpoint holds the best-by-validation parameters.
  dataio::write_synthetic(dataio::SyntheticDataset{data.train_manifest, data.test_manifest, data.images, {}}, dir);
  const auto from_files = evaluate(options.checkpoint, dir / "test.txt");
  CHECK(from_files == evaluate(*a.model, data.test));
  CHECK(from_files == a.best_validation);

  auto capped = cfg;
  capped.max_steps = 4;
  CHECK(train(capped, data.train, data.question_vocab, data.answer_vocab).steps == 4);
  fs::remove_all(dir);
}

TEST_CASE("non-finite loss aborts with a dump") {
  auto cfg = small_config();
  auto data = load_dataset(cfg);
  data.train[0].image.data[5] = std::nan("");
  const auto dir = fs::temp_directory_path() / "vqla_test_nan";
  fs::remove_all(dir);
  TrainOptions options;
  options.dump_dir = dir;
  cfg.batch_size = 12;
  CHECK_THROWS_AS(train(cfg, data.train, data.question_vocab, data.answer_vocab, options), NumericalError);
  CHECK(fs::exists(dir / "nan_dump.json"));
  fs::remove_all(dir);
}

TEST_CASE("robustness sweep shape and the null corruption") {
  const auto cfg = small_config();
  const auto data = load_dataset(cfg);
  const auto result = train(cfg, data.train, data.question_vocab, data.answer_vocab);
  const auto report = robustness_sweep(*result.model, data.test, {"jpeg", "gaussian_noise", "smoke"}, {0, 2, 5}, 1);
  CHECK(report.per_kind.size() == 3);
  for (const auto& row : report.per_kind) {
    CHECK(row.accuracy.size() == 3);
    CHECK(row.accuracy[0] == report.clean.accuracy);
    CHECK(row.miou[0] == report.clean.miou);
  }
  CHECK(report.per_severity.size() == 3);
  CHECK(report.per_kind[1].category == "noise");
  CHECK(report.to_json().at("per_kind").size() == 3);
  CHECK_THROWS_AS(robustness_sweep(*result.model, {}, {"jpeg"}, {1}, 1), EvaluationError);
}

TEST_CASE("throughput measurement") {
  const auto cfg = small_config();
  const auto data = load_dataset(cfg);
  const model::Model m(cfg.model, data.question_vocab, data.answer_vocab);
  CHECK_THROWS_AS(measure_fps(m, data.test, 0), MeasurementError);
  const auto first = measure_fps(m, data.test, 400);
  const auto second = measure_fps(m, data.test, 400);
  CHECK(first.fps > 0.0);
  CHECK(std::abs(first.fps - second.fps) <= 0.2 * std::max(first.fps, second.fps));
  CHECK_FALSE(first.hardware.empty());
  CHECK(first.to_json().contains("hardware"));
}
