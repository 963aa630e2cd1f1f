#include "vqla/losses.hpp"

#include <cmath>
#include <numbers>

#include "vqla/error.hpp"

namespace vqla::losses {

namespace {

// Forward-mode dual number carrying partials with respect to the 4 predicted
// box coordinates.
struct Dual {
  double v = 0.0;
  std::array<double, 4> d{};

  Dual() = default;
  Dual(double value) : v(value) {}  // NOLINT: implicit constants are convenient here
};

Dual operator+(const Dual& a, const Dual& b) {
  Dual r(a.v + b.v);
  for (int i = 0; i < 4; ++i) r.d[i] = a.d[i] + b.d[i];
  return r;
}
Dual operator-(const Dual& a, const Dual& b) {
  Dual r(a.v - b.v);
  for (int i = 0; i < 4; ++i) r.d[i] = a.d[i] - b.d[i];
  return r;
}
Dual operator*(const Dual& a, const Dual& b) {
  Dual r(a.v * b.v);
  for (int i = 0; i < 4; ++i) r.d[i] = a.d[i] * b.v + a.v * b.d[i];
  return r;
}
Dual operator/(const Dual& a, const Dual& b) {
  Dual r(a.v / b.v);
  for (int i = 0; i < 4; ++i) r.d[i] = (a.d[i] * b.v - a.v * b.d[i]) / (b.v * b.v);
  return r;
}
Dual min(const Dual& a, const Dual& b) { return a.v <= b.v ? a : b; }
Dual max(const Dual& a, const Dual& b) { return a.v >= b.v ? a : b; }
Dual atan2(const Dual& y, const Dual& x) {
  Dual r(std::atan2(y.v, x.v));
  const double den = x.v * x.v + y.v * y.v;
  for (int i = 0; i < 4; ++i) r.d[i] = den > 0 ? (x.v * y.d[i] - y.v * x.d[i]) / den : 0.0;
  return r;
}
double value(const Dual& a) { return a.v; }

using std::atan2;
using std::max;
using std::min;
double value(double a) { return a; }

template <class T>
T iou_variant_t(const std::array<T, 4>& p, const Box& g, IoUKind kind) {
  const T half(0.5);
  const T px0 = p[0] - half * p[2], px1 = p[0] + half * p[2];
  const T py0 = p[1] - half * p[3], py1 = p[1] + half * p[3];
  const double gx0 = g[0] - 0.5 * g[2], gx1 = g[0] + 0.5 * g[2];
  const double gy0 = g[1] - 0.5 * g[3], gy1 = g[1] + 0.5 * g[3];

  const T iw = max(T(0.0), min(px1, T(gx1)) - max(px0, T(gx0)));
  const T ih = max(T(0.0), min(py1, T(gy1)) - max(py0, T(gy0)));
  const T inter = iw * ih;
  const T union_area = p[2] * p[3] + T(g[2] * g[3]) - inter;
  const T iou_val = value(union_area) > 0 ? inter / union_area : T(0.0);
  if (kind == IoUKind::kIoU) return iou_val;

  const T cw = max(px1, T(gx1)) - min(px0, T(gx0));
  const T ch = max(py1, T(gy1)) - min(py0, T(gy0));
  if (kind == IoUKind::kGIoU) {
    const T c_area = cw * ch;
    if (!(value(c_area) > 0)) return iou_val;
    return iou_val - (c_area - union_area) / c_area;
  }

  const T diag2 = cw * cw + ch * ch;
  const T dx = p[0] - T(g[0]);
  const T dy = p[1] - T(g[1]);
  const T center2 = dx * dx + dy * dy;
  const T d = value(diag2) > 0 ? iou_val - center2 / diag2 : iou_val;
  if (kind == IoUKind::kDIoU) return d;

  const double k = 4.0 / (std::numbers::pi * std::numbers::pi);
  const T angle = atan2(T(g[2]), T(g[3])) - atan2(p[2], p[3]);
  const T v = T(k) * angle * angle;
  if (!(value(v) > 0)) return d;
  const T alpha = v / ((T(1.0) - iou_val) + v);
  return d - alpha * v;
}

void check_targets(const Var& logits, const std::vector<int>& targets) {
  if (static_cast<ag::Index>(targets.size()) != logits.rows()) throw ShapeError("loss: target count differs from batch");
  for (int t : targets) {
    if (t < 0 || t >= logits.cols()) throw IndexError("loss: target class " + std::to_string(t) + " out of range");
  }
}

Matrix log_softmax(const Matrix& z) {
  Matrix out(z.rows(), z.cols());
  for (ag::Index i = 0; i < z.rows(); ++i) {
    const double m = z.row(i).maxCoeff();
    const double lse = m + std::log((z.row(i).array() - m).exp().sum());
    out.row(i) = z.row(i).array() - lse;
  }
  return out;
}

void check_boxes(const Var& pred, const Matrix& target) {
  if (pred.cols() != 4 || target.cols() != 4 || pred.rows() != target.rows() || pred.rows() == 0) {
    throw ShapeError("box loss: expected matching B x 4 boxes");
  }
}

}  // namespace

BoxLoss parse_box_loss(const std::string& s) {
  if (s == "giou") return BoxLoss::kGIoU;
  if (s == "l1+giou") return BoxLoss::kL1GIoU;
  if (s == "iou") return BoxLoss::kIoU;
  if (s == "diou") return BoxLoss::kDIoU;
  if (s == "ciou") return BoxLoss::kCIoU;
  throw ConfigError("unknown box loss: " + s);
}

const char* box_loss_name(BoxLoss b) {
  switch (b) {
    case BoxLoss::kGIoU: return "giou";
    case BoxLoss::kL1GIoU: return "l1+giou";
    case BoxLoss::kIoU: return "iou";
    case BoxLoss::kDIoU: return "diou";
    case BoxLoss::kCIoU: return "ciou";
  }
  return "?";
}

QALoss parse_qa_loss(const std::string& s) {
  if (s == "ce") return QALoss::kCE;
  if (s == "focal") return QALoss::kFocal;
  throw ConfigError("unknown QA loss: " + s);
}

const char* qa_loss_name(QALoss q) { return q == QALoss::kCE ? "ce" : "focal"; }

bool parse_switch(const std::string& s) {
  if (s == "on" || s == "true" || s == "1") return true;
  if (s == "off" || s == "false" || s == "0") return false;
  throw ConfigError("expected on/off, got: " + s);
}

double iou(const Box& a, const Box& b) { return iou_variant(a, b, IoUKind::kIoU); }

double iou_variant(const Box& a, const Box& b, IoUKind kind) { return iou_variant_t<double>(a, b, kind); }

Var cross_entropy(const Var& logits, const std::vector<int>& targets) {
  check_targets(logits, targets);
  const Matrix logp = log_softmax(logits.value());
  const double inv_b = 1.0 / static_cast<double>(targets.size());
  double loss = 0.0;
  for (size_t i = 0; i < targets.size(); ++i) loss -= logp(static_cast<ag::Index>(i), targets[i]);
  return ag::make_op(Matrix::Constant(1, 1, loss * inv_b), {logits}, [logp, targets, inv_b](ag::Node& n) {
    Matrix g = logp.array().exp();
    for (size_t i = 0; i < targets.size(); ++i) g(static_cast<ag::Index>(i), targets[i]) -= 1.0;
    n.parents[0]->accumulate(g * (inv_b * n.grad(0, 0)));
  });
}

Var focal_loss(const Var& logits, const std::vector<int>& targets, double gamma, double alpha) {
  check_targets(logits, targets);
  if (gamma < 0) throw ConfigError("focal gamma must be >= 0");
  const Matrix logp = log_softmax(logits.value());
  const double inv_b = 1.0 / static_cast<double>(targets.size());
  double loss = 0.0;
  for (size_t i = 0; i < targets.size(); ++i) {
    const double lp = logp(static_cast<ag::Index>(i), targets[i]);
    const double pt = std::exp(lp);
    loss -= alpha * std::pow(1.0 - pt, gamma) * lp;
  }
  return ag::make_op(Matrix::Constant(1, 1, loss * inv_b), {logits},
                     [logp, targets, inv_b, gamma, alpha](ag::Node& n) {
                       const Matrix p = logp.array().exp();
                       Matrix g(p.rows(), p.cols());
                       for (ag::Index i = 0; i < p.rows(); ++i) {
                         const int y = targets[static_cast<size_t>(i)];
                         const double lp = logp(i, y);
                         const double pt = p(i, y);
                         const double q = 1.0 - pt;
                         // c = pt * dLoss/dpt
                         double c = -alpha * std::pow(q, gamma);
                         if (gamma != 0.0 && q > 0.0) c += alpha * gamma * std::pow(q, gamma - 1.0) * pt * lp;
                         for (ag::Index j = 0; j < p.cols(); ++j) g(i, j) = c * ((j == y ? 1.0 : 0.0) - p(i, j));
                       }
                       n.parents[0]->accumulate(g * (inv_b * n.grad(0, 0)));
                     });
}

Var iou_loss(const Var& pred, const Matrix& target, IoUKind kind) {
  check_boxes(pred, target);
  const ag::Index b = pred.rows();
  const double inv_b = 1.0 / static_cast<double>(b);
  Matrix grad(b, 4);
  double loss = 0.0;
  for (ag::Index i = 0; i < b; ++i) {
    std::array<Dual, 4> p;
    for (int k = 0; k < 4; ++k) {
      p[k] = Dual(pred.value()(i, k));
      p[k].d[k] = 1.0;
    }
    const Box g = {target(i, 0), target(i, 1), target(i, 2), target(i, 3)};
    const Dual v = iou_variant_t<Dual>(p, g, kind);
    loss += 1.0 - v.v;
    for (int k = 0; k < 4; ++k) grad(i, k) = -v.d[k] * inv_b;
  }
  return ag::make_op(Matrix::Constant(1, 1, loss * inv_b), {pred},
                     [grad](ag::Node& n) { n.parents[0]->accumulate(grad * n.grad(0, 0)); });
}

Var l1_loss(const Var& pred, const Matrix& target) {
  check_boxes(pred, target);
  const Matrix diff = pred.value() - target;
  const double inv_b = 1.0 / static_cast<double>(pred.rows());
  const Matrix grad = diff.array().sign().matrix() * inv_b;
  return ag::make_op(Matrix::Constant(1, 1, diff.cwiseAbs().sum() * inv_b), {pred},
                     [grad](ag::Node& n) { n.parents[0]->accumulate(grad * n.grad(0, 0)); });
}

Var box_loss(const Var& pred, const Matrix& target, BoxLoss kind) {
  switch (kind) {
    case BoxLoss::kGIoU: return iou_loss(pred, target, IoUKind::kGIoU);
    case BoxLoss::kL1GIoU: return ag::add(l1_loss(pred, target), iou_loss(pred, target, IoUKind::kGIoU));
    case BoxLoss::kIoU: return iou_loss(pred, target, IoUKind::kIoU);
    case BoxLoss::kDIoU: return iou_loss(pred, target, IoUKind::kDIoU);
    case BoxLoss::kCIoU: return iou_loss(pred, target, IoUKind::kCIoU);
  }
  throw ConfigError("unknown box loss");
}

UncertaintyWeights::UncertaintyWeights(nn::ParamStore& store)
    : log_sigma1(store.add("losses.log_sigma1", Matrix::Zero(1, 1))),
      log_sigma2(store.add("losses.log_sigma2", Matrix::Zero(1, 1))) {}

double UncertaintyWeights::sigma1() const { return std::exp(log_sigma1.item()); }
double UncertaintyWeights::sigma2() const { return std::exp(log_sigma2.item()); }

Var uncertainty_combine(const Var& l_qa, const Var& l_box, const Var& log_sigma1, const Var& log_sigma2) {
  auto term = [](const Var& l, const Var& s) {
    return ag::add(ag::mul(ag::scale(l, 0.5), ag::exp(ag::scale(s, -2.0))), s);
  };
  return ag::add(term(l_qa, log_sigma1), term(l_box, log_sigma2));
}

Var legacy_loss(const Var& l_qa, const Var& l_box) { return ag::add(l_qa, l_box); }

Var legacy_loss(const Var& l_ce, const Var& l_giou, const Var& l_l1) {
  return ag::add(l_ce, ag::add(l_giou, l_l1));
}

VqlaLoss vqla_loss(const Var& logits, const Var& pred_boxes, const std::vector<int>& targets,
                   const Matrix& target_boxes, const LossConfig& config, const UncertaintyWeights* weights) {
  VqlaLoss out;
  out.qa = config.qa == QALoss::kFocal ? focal_loss(logits, targets, config.focal_gamma, config.focal_alpha)
                                       : cross_entropy(logits, targets);
  out.box = box_loss(pred_boxes, target_boxes, config.box);
  if (config.uncertainty) {
    if (!weights) throw ConfigError("uncertainty weighting needs learnable sigma parameters");
    out.total = uncertainty_combine(out.qa, out.box, weights->log_sigma1, weights->log_sigma2);
  } else {
    out.total = legacy_loss(out.qa, out.box);
  }
  return out;
}

}  // namespace vqla::losses
