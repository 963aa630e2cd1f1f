#include "vqla/adversarial.hpp"

#include <atomic>
#include <cmath>
#include <iostream>
#include <limits>

#include "vqla/error.hpp"
#include "vqla/model.hpp"

namespace vqla::adversarial {

namespace {

std::atomic<bool> g_zero_warned{false};

void warn_zero_norm() {
  if (!g_zero_warned.exchange(true)) {
    std::cerr << "warning: cosine similarity of a zero vector is taken as 0\n";
  }
}

}  // namespace

SignMode parse_sign_mode(const std::string& s) {
  if (s == "ascent") return SignMode::kAscent;
  if (s == "paper_literal") return SignMode::kPaperLiteral;
  throw ConfigError("unknown sign mode: " + s);
}

const char* sign_mode_name(SignMode m) { return m == SignMode::kAscent ? "ascent" : "paper_literal"; }

void PerturbConfig::validate() const {
  if (!(epsilon > 0.0)) throw ConfigError("epsilon must be > 0");
  if (alpha < 0.0 || beta < 0.0) throw ConfigError("alpha and beta must be >= 0");
}

Matrix fgsm_perturbation(const Matrix& grad, const PerturbConfig& cfg, Modality modality) {
  cfg.validate();
  const double w = modality == Modality::kText ? cfg.alpha : cfg.beta;
  const double s = cfg.sign_mode == SignMode::kAscent ? 1.0 : -1.0;
  return grad.array().sign().matrix() * (s * w * cfg.epsilon);
}

Matrix fgsm_perturb(const Matrix& embedding, const Matrix& grad, const PerturbConfig& cfg, Modality modality) {
  if (embedding.rows() != grad.rows() || embedding.cols() != grad.cols()) {
    throw ShapeError("fgsm_perturb: gradient shape differs from embedding");
  }
  return embedding + fgsm_perturbation(grad, cfg, modality);
}

double cosine_similarity(const RowVector& a, const RowVector& b) {
  if (a.size() != b.size()) throw ShapeError("cosine_similarity: length mismatch");
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) {
    warn_zero_norm();
    return 0.0;
  }
  return a.dot(b) / (na * nb);
}

Var contrastive_loss(const Var& clean, const Var& perturbed, double temperature) {
  if (clean.rows() != perturbed.rows() || clean.cols() != perturbed.cols()) {
    throw ShapeError("contrastive_loss: clean and perturbed shapes differ");
  }
  if (clean.rows() < 2) throw ShapeError("contrastive_loss: batch of 1 has no negatives");
  if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
  const Index b = clean.rows();
  const Index n2 = 2 * b;
  Matrix z(n2, clean.cols());
  z.topRows(b) = clean.value();
  z.bottomRows(b) = perturbed.value();

  Eigen::VectorXd norms(n2);
  Matrix n(n2, z.cols());
  for (Index i = 0; i < n2; ++i) {
    norms(i) = z.row(i).norm();
    if (norms(i) == 0.0) {
      warn_zero_norm();
      n.row(i).setZero();
    } else {
      n.row(i) = z.row(i) / norms(i);
    }
  }
  const Matrix s = (n * n.transpose()) / temperature;
  const double inv = 1.0 / static_cast<double>(n2);
  Matrix g = Matrix::Zero(n2, n2);  // d loss / d s
  double loss = 0.0;
  for (Index i = 0; i < n2; ++i) {
    const Index pos = (i + b) % n2;
    double m = -std::numeric_limits<double>::infinity();
    for (Index j = 0; j < n2; ++j) {
      if (j != i) m = std::max(m, s(i, j));
    }
    double denom = 0.0;
    for (Index j = 0; j < n2; ++j) {
      if (j != i) denom += std::exp(s(i, j) - m);
    }
    loss += -s(i, pos) + m + std::log(denom);
    for (Index j = 0; j < n2; ++j) {
      if (j != i) g(i, j) = inv * std::exp(s(i, j) - m) / denom;
    }
    g(i, pos) -= inv;
  }

  return ag::make_op(Matrix::Constant(1, 1, loss * inv), {clean, perturbed},
                     [g, n, norms, b, temperature](ag::Node& node) {
                       const Matrix dn = ((g + g.transpose()) * n) * (node.grad(0, 0) / temperature);
                       Matrix dz(dn.rows(), dn.cols());
                       for (Index i = 0; i < dn.rows(); ++i) {
                         if (norms(i) == 0.0) {
                           dz.row(i).setZero();
                         } else {
                           dz.row(i) = (dn.row(i) - n.row(i) * n.row(i).dot(dn.row(i))) / norms(i);
                         }
                       }
                       node.parents[0]->accumulate(dz.topRows(b));
                       node.parents[1]->accumulate(dz.bottomRows(b));
                     });
}

ProjectionHead::ProjectionHead(nn::ParamStore& store, const std::string& name, Index dim, std::mt19937_64& rng)
    : fc1(store, name + ".fc1", dim, dim, rng), fc2(store, name + ".fc2", dim, std::max<Index>(1, dim / 2), rng) {}

losses::LossBundle adversarial_contrastive_step(model::Model& m, const model::Batch& batch,
                                                const losses::LossConfig& loss_cfg, const AdversarialConfig& cfg,
                                                std::mt19937_64* dropout_rng) {
  m.params.zero_grad();
  const auto clean = m.forward(batch, dropout_rng);
  const auto l_clean = losses::vqla_loss(clean.logits, clean.boxes, batch.labels, batch.boxes, loss_cfg, &m.uncertainty);

  losses::LossBundle out;
  out.qa_loss = l_clean.qa.item();
  out.box_loss = l_clean.box.item();
  out.clean_loss = l_clean.total.item();
  l_clean.total.backward();

  if (cfg.enabled) {
    Matrix r_text = Matrix::Zero(clean.text.rows(), clean.text.cols());
    Matrix r_visual = Matrix::Zero(clean.visual.rows(), clean.visual.cols());
    if (cfg.perturb.epsilon != 0.0) {
      if (clean.text.has_grad()) r_text = fgsm_perturbation(clean.text.grad(), cfg.perturb, Modality::kText);
      if (clean.visual.has_grad()) r_visual = fgsm_perturbation(clean.visual.grad(), cfg.perturb, Modality::kVisual);
    }
    const Var text_adv = ag::add(clean.text, ag::constant(r_text));
    const Var visual_adv = ag::add(clean.visual, ag::constant(r_visual));
    const auto pert = m.forward_embeddings(text_adv, visual_adv, batch.size, dropout_rng);
    const auto l_pert = losses::vqla_loss(pert.logits, pert.boxes, batch.labels, batch.boxes, loss_cfg, &m.uncertainty);
    const Var l_ctr = contrastive_loss(m.projection(clean.class_feature), m.projection(pert.class_feature),
                                       cfg.contrastive.temperature);
    const Var second = ag::add(l_pert.total, l_ctr);
    second.backward();
    out.perturbed_loss = l_pert.total.item();
    out.contrastive_loss = l_ctr.item();
  }
  out.total = out.clean_loss + out.perturbed_loss + out.contrastive_loss;
  out.sigma1 = m.uncertainty.sigma1();
  out.sigma2 = m.uncertainty.sigma2();
  return out;
}

}  // namespace vqla::adversarial
