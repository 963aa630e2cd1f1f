#include <doctest.h>

#include <cmath>

#include "common.hpp"
#include "vqla/error.hpp"
#include "vqla/losses.hpp"

using namespace vqla;
using namespace vqla::losses;
using ag::Matrix;
using ag::Var;

namespace {

Box from_corners(const std::array<double, 4>& c) {
  return {0.5 * (c[0] + c[2]), 0.5 * (c[1] + c[3]), c[2] - c[0], c[3] - c[1]};
}

Matrix rows(std::initializer_list<Box> boxes) {
  Matrix m(static_cast<ag::Index>(boxes.size()), 4);
  ag::Index i = 0;
  for (const auto& b : boxes) {
    m.row(i++) << b[0], b[1], b[2], b[3];
  }
  return m;
}

}  // namespace

TEST_CASE("GIoU analytic corner case") {
  CHECK(giou(from_corners({0, 0, 1, 1}), from_corners({1, 1, 2, 2})) == -0.5);
  CHECK(iou(from_corners({0, 0, 1, 1}), from_corners({1, 1, 2, 2})) == 0.0);
  const Box a{0.4, 0.4, 0.2, 0.2};
  CHECK(iou(a, a) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(giou(a, a) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(diou(a, a) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(ciou(a, a) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("GIoU agrees with a rasterization oracle") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> pos(0.0, 0.7), side(0.1, 0.3);
  double worst = 0.0;
  for (int i = 0; i < 200; ++i) {
    const double ax = pos(rng), ay = pos(rng), bx = pos(rng), by = pos(rng);
    const std::array<double, 4> a{ax, ay, ax + side(rng), ay + side(rng)};
    const std::array<double, 4> b{bx, by, bx + side(rng), by + side(rng)};
    worst = std::max(worst, std::abs(giou(from_corners(a), from_corners(b)) - testing::raster_giou(a, b, 500)));
  }
  CHECK(worst < 5e-3);
}

TEST_CASE("distance and aspect penalties") {
  // Concentric boxes: no center distance, so DIoU = IoU.
  const Box a{0.5, 0.5, 0.4, 0.4}, b{0.5, 0.5, 0.2, 0.2};
  CHECK(diou(a, b) == doctest::Approx(iou(a, b)));
  // Same aspect ratio: CIoU = DIoU.
  const Box c{0.3, 0.3, 0.2, 0.1}, d{0.4, 0.35, 0.4, 0.2};
  CHECK(ciou(c, d) == doctest::Approx(diou(c, d)));
  // Disjoint boxes one full width apart: center distance 0.2, hull diagonal^2 = 0.3^2 + 0.1^2.
  const Box e{0.2, 0.5, 0.1, 0.1}, f{0.4, 0.5, 0.1, 0.1};
  CHECK(iou(e, f) == 0.0);
  CHECK(diou(e, f) == doctest::Approx(-0.04 / 0.10));
  CHECK(giou(e, f) == doctest::Approx(-(0.03 - 0.02) / 0.03));
}

TEST_CASE("degenerate boxes") {
  const Box zero{0.5, 0.5, 0.0, 0.0};
  CHECK(iou(zero, zero) == 0.0);
  CHECK(giou(zero, zero) == 0.0);
  CHECK(std::isfinite(ciou(zero, Box{0.5, 0.5, 0.1, 0.2})));
}

TEST_CASE("differentiable box losses match the scalar metrics") {
  const Box p1{0.3, 0.4, 0.2, 0.3}, p2{0.6, 0.6, 0.3, 0.2};
  const Box t1{0.35, 0.45, 0.25, 0.2}, t2{0.2, 0.8, 0.1, 0.1};
  const Matrix pred = rows({p1, p2});
  const Matrix target = rows({t1, t2});
  Var p = ag::parameter(pred);
  CHECK(iou_loss(p, target, IoUKind::kGIoU).item() == doctest::Approx(1.0 - 0.5 * (giou(p1, t1) + giou(p2, t2))));
  CHECK(iou_loss(p, target, IoUKind::kCIoU).item() == doctest::Approx(1.0 - 0.5 * (ciou(p1, t1) + ciou(p2, t2))));
  const double l1 = 0.5 * ((pred - target).cwiseAbs().sum());
  CHECK(l1_loss(p, target).item() == doctest::Approx(l1));
  CHECK(box_loss(p, target, BoxLoss::kL1GIoU).item() ==
        doctest::Approx(l1 + iou_loss(p, target, IoUKind::kGIoU).item()));
}

TEST_CASE("cross entropy and focal loss values") {
  Var logits = ag::constant((Matrix(2, 2) << 0.0, std::log(3.0), 1.0, 1.0).finished());
  const double ce = -0.5 * (std::log(0.75) + std::log(0.5));
  CHECK(cross_entropy(logits, {1, 0}).item() == doctest::Approx(ce));
  // gamma = 0 and alpha = 1 reduce focal loss to cross entropy.
  CHECK(focal_loss(logits, {1, 0}, 0.0, 1.0).item() == doctest::Approx(ce));
  const double focal = -0.5 * 0.25 * (0.0625 * std::log(0.75) + 0.25 * std::log(0.5));
  CHECK(focal_loss(logits, {1, 0}, 2.0, 0.25).item() == doctest::Approx(focal));
  // Confident correct predictions are down-weighted relative to cross entropy.
  CHECK(focal_loss(logits, {1, 0}, 2.0, 1.0).item() < ce);
  CHECK_THROWS_AS(cross_entropy(logits, {2, 0}), IndexError);
  CHECK_THROWS_AS(focal_loss(logits, {0}), ShapeError);
}

TEST_CASE("uncertainty weighting is stationary at sigma^2 = L") {
  for (double l : {0.1, 1.0, 4.0}) {
    auto objective = [&](double sigma) {
      return uncertainty_combine(ag::scalar(l), ag::scalar(0.0), ag::scalar(std::log(sigma)), ag::scalar(0.0)).item();
    };
    const double sigma = testing::golden_minimize(objective, 1e-3, 10.0);
    CHECK(sigma * sigma == doctest::Approx(l).epsilon(1e-4));
    Var s = ag::parameter(Matrix::Constant(1, 1, 0.5 * std::log(l)));
    uncertainty_combine(ag::scalar(l), ag::scalar(1.0), s, ag::scalar(0.0)).backward();
    CHECK(std::abs(s.grad()(0, 0)) < 1e-12);
  }
}

TEST_CASE("combined objective") {
  nn::ParamStore store;
  UncertaintyWeights w(store);
  CHECK(w.sigma1() == 1.0);
  CHECK(store.contains("losses.log_sigma1"));
  Var logits = ag::constant((Matrix(2, 3) << 1, 2, 3, 3, 2, 1).finished());
  Var boxes = ag::constant(rows({{0.5, 0.5, 0.2, 0.2}, {0.3, 0.3, 0.1, 0.1}}));
  const Matrix target = rows({{0.5, 0.5, 0.2, 0.2}, {0.35, 0.3, 0.1, 0.1}});
  LossConfig cfg;
  CHECK_THROWS_AS(vqla_loss(logits, boxes, {2, 0}, target, cfg, nullptr), ConfigError);
  const auto l = vqla_loss(logits, boxes, {2, 0}, target, cfg, &w);
  // log sigma = 0: total = L_qa / 2 + L_box / 2.
  CHECK(l.total.item() == doctest::Approx(0.5 * (l.qa.item() + l.box.item())));
  cfg.uncertainty = false;
  const auto plain = vqla_loss(logits, boxes, {2, 0}, target, cfg, nullptr);
  CHECK(plain.total.item() == doctest::Approx(plain.qa.item() + plain.box.item()));
  CHECK(legacy_loss(ag::scalar(1), ag::scalar(2), ag::scalar(3)).item() == 6.0);
}

TEST_CASE("selector strings") {
  for (const char* s : {"giou", "l1+giou", "iou", "diou", "ciou"}) CHECK(std::string(box_loss_name(parse_box_loss(s))) == s);
  for (const char* s : {"ce", "focal"}) CHECK(std::string(qa_loss_name(parse_qa_loss(s))) == s);
  CHECK(parse_switch("on"));
  CHECK_FALSE(parse_switch("off"));
  CHECK_THROWS_AS(parse_box_loss("smooth_l1"), ConfigError);
  CHECK_THROWS_AS(parse_switch("maybe"), ConfigError);
}
