#pragma once

#include <random>
#include <string>

#include "vqla/losses.hpp"
#include "vqla/nn.hpp"

namespace vqla::model {
class Model;
struct Batch;
}  // namespace vqla::model

namespace vqla::adversarial {

using ag::Index;
using ag::Matrix;
using ag::RowVector;
using ag::Var;

enum class SignMode { kAscent, kPaperLiteral };
SignMode parse_sign_mode(const std::string& s);  // ascent | paper_literal
const char* sign_mode_name(SignMode m);

enum class Modality { kText, kVisual };

struct PerturbConfig {
  double epsilon = 1e-2;
  double alpha = 1.0;  // text weight
  double beta = 0.5;   // visual weight
  SignMode sign_mode = SignMode::kAscent;

  void validate() const;
};

struct ContrastiveConfig {
  double temperature = 0.5;
};

struct AdversarialConfig {
  bool enabled = true;
  PerturbConfig perturb;
  ContrastiveConfig contrastive;
};

// r = s * w * epsilon * sign(grad); s = +1 (ascent) or -1 (paper_literal).
Matrix fgsm_perturbation(const Matrix& grad, const PerturbConfig& cfg, Modality modality);
Matrix fgsm_perturb(const Matrix& embedding, const Matrix& grad, const PerturbConfig& cfg, Modality modality);

// Zero vectors have similarity 0 (a warning is printed once per process).
double cosine_similarity(const RowVector& a, const RowVector& b);

// NT-Xent over the 2B rows [clean; perturbed]: the positive of row i is its
// partner i +/- B, the denominator runs over every row except i itself, and
// the loss is the mean over all 2B anchors. Requires B >= 2.
Var contrastive_loss(const Var& clean, const Var& perturbed, double temperature);

// Linear D -> D, ReLU, Linear D -> D/2.
struct ProjectionHead {
  nn::Linear fc1, fc2;

  ProjectionHead() = default;
  ProjectionHead(nn::ParamStore& store, const std::string& name, Index dim, std::mt19937_64& rng);
  Var operator()(const Var& x) const { return fc2(ag::relu(fc1(x))); }
};

// One clean + perturbed pass over `batch`. Parameter gradients of the total
// objective are left on the model parameters (previous ones are cleared);
// the caller applies the optimizer. `dropout_rng` enables training-mode
// dropout; pass nullptr for a deterministic step.
losses::LossBundle adversarial_contrastive_step(model::Model& model, const model::Batch& batch,
                                                const losses::LossConfig& loss_cfg,
                                                const AdversarialConfig& cfg, std::mt19937_64* dropout_rng);

}  // namespace vqla::adversarial
