#pragma once

#include <array>
#include <string>
#include <vector>

#include "vqla/nn.hpp"

namespace vqla::losses {

using ag::Matrix;
using ag::Var;

// Boxes are (cx, cy, w, h) in normalized coordinates.
using Box = std::array<double, 4>;

enum class BoxLoss { kGIoU, kL1GIoU, kIoU, kDIoU, kCIoU };
enum class QALoss { kCE, kFocal };
enum class IoUKind { kIoU, kGIoU, kDIoU, kCIoU };

BoxLoss parse_box_loss(const std::string& s);  // giou | l1+giou | iou | diou | ciou
const char* box_loss_name(BoxLoss b);
QALoss parse_qa_loss(const std::string& s);  // ce | focal
const char* qa_loss_name(QALoss q);
bool parse_switch(const std::string& s);  // on | off

struct LossConfig {
  BoxLoss box = BoxLoss::kGIoU;
  QALoss qa = QALoss::kFocal;
  bool uncertainty = true;
  double focal_gamma = 2.0;
  double focal_alpha = 0.25;
};

// Scalar box similarities. Zero-area boxes have IoU 0; the enclosing-box
// penalties vanish when the enclosing box itself has no extent.
double iou(const Box& a, const Box& b);
double iou_variant(const Box& a, const Box& b, IoUKind kind);
inline double giou(const Box& a, const Box& b) { return iou_variant(a, b, IoUKind::kGIoU); }
inline double diou(const Box& a, const Box& b) { return iou_variant(a, b, IoUKind::kDIoU); }
inline double ciou(const Box& a, const Box& b) { return iou_variant(a, b, IoUKind::kCIoU); }

// logits: B x C. Mean over the batch.
Var cross_entropy(const Var& logits, const std::vector<int>& targets);
// -alpha (1 - p_t)^gamma log p_t, mean over the batch.
Var focal_loss(const Var& logits, const std::vector<int>& targets, double gamma = 2.0, double alpha = 0.25);

// pred: B x 4 predicted boxes; target: B x 4. Mean over samples of 1 - variant.
Var iou_loss(const Var& pred, const Matrix& target, IoUKind kind);
// Mean over samples of the summed absolute coordinate differences.
Var l1_loss(const Var& pred, const Matrix& target);
Var box_loss(const Var& pred, const Matrix& target, BoxLoss kind);

// Learnable s = log sigma per task, initialized to 0.
struct UncertaintyWeights {
  Var log_sigma1;
  Var log_sigma2;

  UncertaintyWeights() = default;
  explicit UncertaintyWeights(nn::ParamStore& store);
  double sigma1() const;
  double sigma2() const;
};

// L_qa / (2 sigma1^2) + log sigma1 + L_box / (2 sigma2^2) + log sigma2.
Var uncertainty_combine(const Var& l_qa, const Var& l_box, const Var& log_sigma1, const Var& log_sigma2);
// Unweighted sum L_qa + L_box.
Var legacy_loss(const Var& l_qa, const Var& l_box);
// Three-term form: L_ce + (L_giou + L_l1).
Var legacy_loss(const Var& l_ce, const Var& l_giou, const Var& l_l1);

struct VqlaLoss {
  Var qa;
  Var box;
  Var total;
};

VqlaLoss vqla_loss(const Var& logits, const Var& pred_boxes, const std::vector<int>& targets,
                   const Matrix& target_boxes, const LossConfig& config,
                   const UncertaintyWeights* weights);

// Named scalar losses of one training step.
struct LossBundle {
  double qa_loss = 0.0;
  double box_loss = 0.0;
  double clean_loss = 0.0;       // L_VQLA on clean embeddings
  double perturbed_loss = 0.0;   // L_VQLA on perturbed embeddings
  double contrastive_loss = 0.0;
  double total = 0.0;
  double sigma1 = 1.0;
  double sigma2 = 1.0;
};

}  // namespace vqla::losses
