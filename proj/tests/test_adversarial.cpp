#include <doctest.h>

#include "common.hpp"
#include "vqla/adversarial.hpp"
#include "vqla/error.hpp"
#include "vqla/model.hpp"

using namespace vqla;
using namespace vqla::adversarial;
using ag::Matrix;
using ag::Var;
using testing::random_matrix;

TEST_CASE("NT-Xent matches exhaustive enumeration") {
  std::mt19937_64 rng(5);
  for (int b : {2, 3, 4}) {
    for (double temperature : {0.1, 0.5, 1.0}) {
      const Matrix a = random_matrix(b, 6, rng), p = random_matrix(b, 6, rng);
      const double got = contrastive_loss(ag::constant(a), ag::constant(p), temperature).item();
      CHECK(std::abs(got - testing::ntxent_oracle(a, p, temperature)) < 1e-10);
    }
  }
}

TEST_CASE("NT-Xent is non-negative") {
  std::mt19937_64 rng(6);
  for (int i = 0; i < 200; ++i) {
    const int b = 2 + static_cast<int>(rng() % 5);
    const double scale = i % 2 ? 1.0 : 100.0;
    CHECK(contrastive_loss(ag::constant(random_matrix(b, 4, rng, scale)), ag::constant(random_matrix(b, 4, rng)), 0.5)
              .item() >= 0.0);
  }
}

TEST_CASE("NT-Xent input checks") {
  std::mt19937_64 rng(7);
  CHECK_THROWS_AS(contrastive_loss(ag::constant(random_matrix(1, 4, rng)), ag::constant(random_matrix(1, 4, rng)), 0.5),
                  ShapeError);
  CHECK_THROWS_AS(contrastive_loss(ag::constant(random_matrix(2, 4, rng)), ag::constant(random_matrix(3, 4, rng)), 0.5),
                  ShapeError);
  CHECK_THROWS_AS(contrastive_loss(ag::constant(random_matrix(2, 4, rng)), ag::constant(random_matrix(2, 4, rng)), 0.0),
                  ConfigError);
  // Identical pairs with orthogonal rows: the positive dominates at low temperature.
  const Matrix eye = Matrix::Identity(3, 3);
  CHECK(contrastive_loss(ag::constant(eye), ag::constant(eye), 0.05).item() < 1e-6);
}

TEST_CASE("cosine similarity") {
  ag::RowVector a(3), b(3), z = ag::RowVector::Zero(3);
  a << 1, 0, 0;
  b << 1, 1, 0;
  CHECK(cosine_similarity(a, b) == doctest::Approx(1.0 / std::sqrt(2.0)));
  CHECK(cosine_similarity(a, z) == 0.0);
}

TEST_CASE("FGSM perturbation") {
  Matrix g(1, 4);
  g << 0.5, -2.0, 0.0, 3.0;
  PerturbConfig cfg;
  cfg.epsilon = 0.1;
  cfg.alpha = 2.0;
  cfg.beta = 0.5;
  Matrix expect_text(1, 4);
  expect_text << 0.2, -0.2, 0.0, 0.2;
  CHECK(fgsm_perturbation(g, cfg, Modality::kText).isApprox(expect_text));
  CHECK(fgsm_perturbation(g, cfg, Modality::kVisual).isApprox(expect_text / 4.0));
  cfg.sign_mode = SignMode::kPaperLiteral;
  CHECK(fgsm_perturbation(g, cfg, Modality::kText).isApprox(-expect_text));
  CHECK(fgsm_perturb(Matrix::Ones(1, 4), g, cfg, Modality::kText).isApprox(Matrix::Ones(1, 4) - expect_text));
  cfg.epsilon = 0.0;
  CHECK_THROWS_AS(fgsm_perturbation(g, cfg, Modality::kText), ConfigError);
  cfg.epsilon = 0.1;
  CHECK_THROWS_AS(fgsm_perturb(Matrix::Ones(2, 4), g, cfg, Modality::kText), ShapeError);
  CHECK(parse_sign_mode("paper_literal") == SignMode::kPaperLiteral);
  CHECK_THROWS_AS(parse_sign_mode("descent"), ConfigError);
}

TEST_CASE("FGSM on a linear loss gains exactly epsilon times the L1 norm") {
  std::mt19937_64 rng(8);
  PerturbConfig cfg;
  cfg.epsilon = 1e-3;
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix w = random_matrix(3, 5, rng), x = random_matrix(3, 5, rng);
    auto loss = [&](const Matrix& v) { return w.cwiseProduct(v).sum(); };
    const Matrix r = fgsm_perturbation(w, cfg, Modality::kText);
    CHECK(std::abs(loss(x + r) - loss(x) - cfg.epsilon * w.cwiseAbs().sum()) < 1e-10);
  }
}

TEST_CASE("adversarial step") {
  auto setup = testing::tiny_setup(3, 9);
  auto& m = *setup.model;
  losses::LossConfig lc;
  AdversarialConfig ac;

  SUBCASE("disabled: clean objective only") {
    ac.enabled = false;
    const auto b = adversarial_contrastive_step(m, setup.batch, lc, ac, nullptr);
    CHECK(b.perturbed_loss == 0.0);
    CHECK(b.contrastive_loss == 0.0);
    CHECK(b.total == b.clean_loss);
  }
  SUBCASE("zero epsilon leaves the embeddings unperturbed") {
    ac.perturb.epsilon = 0.0;
    const auto b = adversarial_contrastive_step(m, setup.batch, lc, ac, nullptr);
    CHECK(b.perturbed_loss == doctest::Approx(b.clean_loss).epsilon(1e-14));
  }
  SUBCASE("zero weights leave the embeddings unperturbed") {
    ac.perturb.alpha = 0.0;
    ac.perturb.beta = 0.0;
    const auto b = adversarial_contrastive_step(m, setup.batch, lc, ac, nullptr);
    CHECK(b.perturbed_loss == doctest::Approx(b.clean_loss).epsilon(1e-14));
  }
  SUBCASE("ascent raises the loss") {
    ac.perturb.epsilon = 1e-3;
    const auto b = adversarial_contrastive_step(m, setup.batch, lc, ac, nullptr);
    CHECK(b.perturbed_loss > b.clean_loss);
    CHECK(b.total == doctest::Approx(b.clean_loss + b.perturbed_loss + b.contrastive_loss));
  }
  SUBCASE("parameter gradients are those of the summed objective") {
    const auto b = adversarial_contrastive_step(m, setup.batch, lc, ac, nullptr);
    std::vector<Matrix> stepped;
    for (const auto& [_, v] : m.params.items()) stepped.push_back(v.has_grad() ? v.grad() : Matrix());

    // Single graph: clean loss, the FGSM point taken as a constant, then one backward.
    m.params.zero_grad();
    const auto clean = m.forward(setup.batch);
    const auto lc_clean = losses::vqla_loss(clean.logits, clean.boxes, setup.batch.labels, setup.batch.boxes, lc,
                                            &m.uncertainty);
    lc_clean.total.backward();
    const Matrix rt = fgsm_perturbation(clean.text.grad(), ac.perturb, Modality::kText);
    const Matrix rv = fgsm_perturbation(clean.visual.grad(), ac.perturb, Modality::kVisual);
    m.params.zero_grad();
    const auto clean2 = m.forward(setup.batch);
    const auto l1 = losses::vqla_loss(clean2.logits, clean2.boxes, setup.batch.labels, setup.batch.boxes, lc,
                                      &m.uncertainty);
    const auto pert = m.forward_embeddings(ag::add(clean2.text, ag::constant(rt)),
                                           ag::add(clean2.visual, ag::constant(rv)), setup.batch.size);
    const auto l2 = losses::vqla_loss(pert.logits, pert.boxes, setup.batch.labels, setup.batch.boxes, lc,
                                      &m.uncertainty);
    const Var ctr = contrastive_loss(m.projection(clean2.class_feature), m.projection(pert.class_feature),
                                     ac.contrastive.temperature);
    const Var total = ag::add(ag::add(l1.total, l2.total), ctr);
    CHECK(total.item() == doctest::Approx(b.total).epsilon(1e-12));
    total.backward();
    size_t i = 0;
    for (const auto& [name, v] : m.params.items()) {
      const Matrix& ref = stepped[i++];
      if (!v.has_grad()) {
        CHECK_MESSAGE(ref.size() == 0, name);
        continue;
      }
      CHECK_MESSAGE((v.grad() - ref).norm() <= 1e-10 * std::max(1.0, ref.norm()), name);
    }
  }
}
