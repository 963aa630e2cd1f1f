#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "common.hpp"
#include "vqla/encoders.hpp"
#include "vqla/error.hpp"
#include "vqla/model.hpp"

using namespace vqla;
using ag::Matrix;
using ag::Var;
namespace fs = std::filesystem;

TEST_CASE("encoder configuration") {
  encoders::EncoderConfig c;
  CHECK_NOTHROW(c.validate());
  c.text_len = 20;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.extractor = "resnet18";
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.image_size = 44;  // not grid * 2^k
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("image packing") {
  Image a(4, 4, 3), b(4, 4, 3);
  a.at(1, 2, 0) = 0.5;
  b.at(3, 3, 2) = 0.25;
  const Matrix p = encoders::pack_images({&a, &b});
  CHECK(p.rows() == 32);
  CHECK(p(1 * 4 + 2, 0) == 0.5);
  CHECK(p(16 + 15, 2) == 0.25);
  Image c(5, 4, 3);
  CHECK_THROWS_AS(encoders::pack_images({&a, &c}), ShapeError);
  Image g(4, 4, 1);
  CHECK_THROWS_AS(encoders::pack_images({&g}), ShapeError);
}

TEST_CASE("text embedding is token + position + text segment") {
  std::mt19937_64 rng(1);
  nn::ParamStore store;
  auto cfg = testing::tiny_model_config().encoder;
  encoders::Encoders enc(store, cfg, 10, rng);
  const Matrix e = enc.embed_text({{3, 1, 0, 0}, {9, 9, 2, 0}}).value();
  CHECK(e.rows() == 8);
  const Matrix& tok = enc.token_table.value();
  const Matrix& pos = enc.text_position.value();
  const Matrix& seg = enc.segment_table.value();
  CHECK(e.row(0).isApprox(tok.row(3) + pos.row(0) + seg.row(encoders::kTextSegment)));
  CHECK(e.row(6).isApprox(tok.row(2) + pos.row(2) + seg.row(encoders::kTextSegment)));
  CHECK_THROWS_AS(enc.embed_text({{1, 2, 3}}), ShapeError);
  CHECK(store.contains("encoders.segment"));
}

TEST_CASE("conv stack is translation covariant") {
  std::mt19937_64 rng(2);
  nn::ParamStore store;
  encoders::EncoderConfig cfg;
  cfg.dim = 8;
  encoders::Encoders enc(store, cfg, 4, rng);
  for (auto& b : enc.conv_bias) b.mutable_value().setZero();
  Image a(40, 40, 3), b(40, 40, 3);
  std::mt19937_64 pix(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int y = 12; y < 20; ++y) {
    for (int x = 12; x < 20; ++x) {
      for (int c = 0; c < 3; ++c) {
        const double v = u(pix);
        a.at(y, x, c) = v;
        b.at(y + 8, x + 8, c) = v;
      }
    }
  }
  const Matrix fa = enc.grid_features(encoders::pack_images({&a}), 1).value();
  const Matrix fb = enc.grid_features(encoders::pack_images({&b}), 1).value();
  REQUIRE(fa.rows() == 25);
  CHECK(fa.norm() > 0.0);
  for (int gy = 0; gy < 4; ++gy) {
    for (int gx = 0; gx < 4; ++gx) CHECK(fb.row((gy + 1) * 5 + gx + 1).isApprox(fa.row(gy * 5 + gx), 1e-12));
  }
  const Matrix v = enc.extract_visual(a).value();
  CHECK(v.rows() == 25);
  CHECK(v.cols() == 8);
}

TEST_CASE("forward shapes and prediction ranges") {
  auto setup = testing::tiny_setup(3, 4);
  const auto out = setup.model->forward(setup.batch);
  CHECK(out.logits.rows() == 3);
  CHECK(out.logits.cols() == setup.model->num_classes());
  CHECK(out.boxes.rows() == 3);
  CHECK(out.fused.rows() == 12);
  CHECK(out.class_feature.cols() == 8);
  const auto preds = setup.model->predict(setup.batch);
  REQUIRE(preds.size() == 3);
  for (const auto& p : preds) {
    CHECK(p.bbox.cx > 0.0);
    CHECK(p.bbox.cx < 1.0);
    CHECK(p.bbox.w > 0.0);
    CHECK(p.logits.size() == 5);
  }
  CHECK(preds[1].logits[2] == doctest::Approx(out.logits.value()(1, 2)).epsilon(1e-15));
}

TEST_CASE("dropout only with a generator") {
  auto cfg = testing::tiny_model_config();
  cfg.backbone.dropout = 0.5;
  auto setup = testing::tiny_setup(2, 5, cfg);
  const Matrix a = setup.model->forward(setup.batch).logits.value();
  CHECK(a == setup.model->forward(setup.batch).logits.value());
  std::mt19937_64 rng(1);
  CHECK(a != setup.model->forward(setup.batch, &rng).logits.value());
}

TEST_CASE("backbone depth zero and knockouts still run") {
  auto cfg = testing::tiny_model_config();
  cfg.backbone.depth = 0;
  cfg.fusion.n_coattn_layers = 0;
  cfg.fusion.use_gate = false;
  auto setup = testing::tiny_setup(2, 6, cfg);
  CHECK(setup.model->forward(setup.batch).logits.value().allFinite());
  cfg.backbone.depth = -1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("model config json round trip") {
  auto cfg = testing::tiny_model_config();
  cfg.fusion.attn_mode = fusion::AttnMode::kCoBi;
  cfg.fusion.use_gcc = false;
  const auto j = model::model_config_to_json(cfg);
  const auto back = model::model_config_from_json(j);
  CHECK(model::model_config_to_json(back) == j);
  CHECK(j.at("attn_mode") == "co_Bi");
  auto bad = j;
  bad["attn_mode"] = "sideways";
  CHECK_THROWS_AS(model::model_config_from_json(bad), ConfigError);
}

TEST_CASE("checkpoint round trip and integrity") {
  auto setup = testing::tiny_setup(2, 7);
  const auto dir = fs::temp_directory_path() / "vqla_test_ckpt";
  fs::create_directories(dir);
  const auto path = dir / "model.bin";
  model::save_checkpoint(path, *setup.model, {{"note", "x"}});
  nlohmann::json extra;
  const auto loaded = model::load_checkpoint(path, &extra);
  CHECK(extra.at("note") == "x");
  CHECK(loaded->answer_vocab() == setup.model->answer_vocab());
  CHECK(loaded->forward(setup.batch).logits.value() == setup.model->forward(setup.batch).logits.value());

  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  {
    std::ofstream out(dir / "truncated.bin", std::ios::binary);
    out << bytes.substr(0, bytes.size() - 16);
  }
  CHECK_THROWS_AS(model::load_checkpoint(dir / "truncated.bin"), IntegrityError);
  {
    std::ofstream out(dir / "header.bin", std::ios::binary);
    out << "NOT-A-CHECKPOINT\n" << bytes.substr(bytes.find('\n') + 1);
  }
  CHECK_THROWS_AS(model::load_checkpoint(dir / "header.bin"), IntegrityError);
  fs::remove_all(dir);
}
