#pragma once
// Shared oracles for the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <random>
#include <vector>

#include "vqla/autograd.hpp"
#include "vqla/dataio.hpp"
#include "vqla/model.hpp"

namespace vqla::testing {

using ag::Matrix;
using ag::Var;

inline Matrix random_matrix(ag::Index r, ag::Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(r, c);
  for (ag::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

// Worst relative error ||g - g_fd|| / max(||g||, ||g_fd||) over the leaves,
// with central differences of step h. `f` must rebuild its graph from the
// current leaf values on every call. A leaf whose gradient is below
// `floor` times the total gradient norm (a key bias under softmax, say, which
// is exactly zero) is measured against that floor instead of its own norm.
inline double gradient_error(const std::function<Var()>& f, std::vector<Var> leaves, double h = 1e-6,
                             double floor = 1e-3) {
  for (auto& l : leaves) l.zero_grad();
  f().backward();
  std::vector<Matrix> analytic;
  double total = 0.0;
  for (auto& leaf : leaves) {
    analytic.push_back(leaf.has_grad() ? leaf.grad() : Matrix::Zero(leaf.rows(), leaf.cols()));
    total += analytic.back().squaredNorm();
  }
  total = std::sqrt(total);
  double worst = 0.0;
  for (size_t k = 0; k < leaves.size(); ++k) {
    auto& leaf = leaves[k];
    Matrix numeric(leaf.rows(), leaf.cols());
    for (ag::Index i = 0; i < leaf.value().size(); ++i) {
      double& x = leaf.mutable_value().data()[i];
      const double saved = x;
      x = saved + h;
      const double up = f().item();
      x = saved - h;
      const double down = f().item();
      x = saved;
      numeric.data()[i] = (up - down) / (2.0 * h);
    }
    const double scale = std::max({analytic[k].norm(), numeric.norm(), floor * total, 1e-12});
    worst = std::max(worst, (analytic[k] - numeric).norm() / scale);
  }
  return worst;
}

// Smallest configuration matching the (B=2, L=4, D=8) gradient instances.
inline model::ModelConfig tiny_model_config() {
  model::ModelConfig c;
  c.encoder.dim = 8;
  c.encoder.grid = 2;
  c.encoder.text_len = 4;
  c.encoder.image_size = 8;
  c.encoder.conv_channels = {4, 4};
  c.fusion.n_coattn_layers = 1;
  c.fusion.attn_heads = 2;
  c.fusion.mcc_heads = 2;
  c.fusion.gcc_heads = 2;
  c.backbone.depth = 1;
  c.backbone.heads = 2;
  c.backbone.mlp_ratio = 2;
  c.backbone.dropout = 0.0;
  c.seed = 7;
  return c;
}

// Tiny model plus a hand-made batch of `batch` random frames.
struct TinySetup {
  std::unique_ptr<model::Model> model;
  model::Batch batch;
};

inline TinySetup tiny_setup(int batch, std::uint64_t seed, model::ModelConfig cfg = tiny_model_config()) {
  static const std::vector<std::string> questions = {"what color is the circle", "where is the square",
                                                     "what shape is red", "is the triangle large"};
  static const std::vector<std::string> answers = {"red", "blue", "top_left", "circle", "large"};
  auto qv = dataio::Vocab::words(questions);
  auto av = dataio::Vocab::labels(answers);
  TinySetup t;
  t.model = std::make_unique<model::Model>(cfg, qv, av);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const int s = cfg.encoder.image_size;
  t.batch.size = batch;
  t.batch.pixels.resize(static_cast<ag::Index>(batch) * s * s, 3);
  for (ag::Index i = 0; i < t.batch.pixels.size(); ++i) t.batch.pixels.data()[i] = u(rng);
  t.batch.boxes.resize(batch, 4);
  for (int b = 0; b < batch; ++b) {
    const auto& q = questions[static_cast<size_t>(b) % questions.size()];
    t.batch.token_ids.push_back(dataio::tokenize(q, qv, cfg.encoder.text_len));
    t.batch.labels.push_back(static_cast<int>(rng() % answers.size()));
    t.batch.boxes.row(b) << 0.2 + 0.6 * u(rng), 0.2 + 0.6 * u(rng), 0.1 + 0.2 * u(rng), 0.1 + 0.2 * u(rng);
    t.batch.types.push_back(dataio::classify_question(q));
    t.batch.frame_ids.push_back("frame" + std::to_string(b));
  }
  return t;
}

// Brute-force NT-Xent: every one of the 2B anchors, denominator summed over
// the 2B - 1 other rows.
inline double ntxent_oracle(const Matrix& a, const Matrix& b, double temperature) {
  const auto n = a.rows();
  Matrix z(2 * n, a.cols());
  z << a, b;
  auto cosine = [&](ag::Index i, ag::Index j) {
    const double na = z.row(i).norm();
    const double nb = z.row(j).norm();
    return z.row(i).dot(z.row(j)) / (na * nb);
  };
  double total = 0.0;
  for (ag::Index i = 0; i < 2 * n; ++i) {
    const ag::Index pos = i < n ? i + n : i - n;
    double denom = 0.0;
    for (ag::Index k = 0; k < 2 * n; ++k) {
      if (k != i) denom += std::exp(cosine(i, k) / temperature);
    }
    total += -std::log(std::exp(cosine(i, pos) / temperature) / denom);
  }
  return total / static_cast<double>(2 * n);
}

// GIoU of two corner boxes estimated on a res x res grid over their hull.
inline double raster_giou(const std::array<double, 4>& a, const std::array<double, 4>& b, int res) {
  const double x0 = std::min(a[0], b[0]), y0 = std::min(a[1], b[1]);
  const double x1 = std::max(a[2], b[2]), y1 = std::max(a[3], b[3]);
  const double dx = (x1 - x0) / res, dy = (y1 - y0) / res;
  long in_a = 0, in_b = 0, inter = 0;
  for (int j = 0; j < res; ++j) {
    const double y = y0 + (j + 0.5) * dy;
    for (int i = 0; i < res; ++i) {
      const double x = x0 + (i + 0.5) * dx;
      const bool pa = x >= a[0] && x < a[2] && y >= a[1] && y < a[3];
      const bool pb = x >= b[0] && x < b[2] && y >= b[1] && y < b[3];
      in_a += pa;
      in_b += pb;
      inter += pa && pb;
    }
  }
  const double uni = static_cast<double>(in_a + in_b - inter);
  const double hull = static_cast<double>(res) * res;
  return inter / uni - (hull - uni) / hull;
}

// Golden-section minimum of a unimodal function on [lo, hi].
inline double golden_minimize(const std::function<double(double)>& f, double lo, double hi, double tol = 1e-12) {
  const double g = (std::sqrt(5.0) - 1.0) / 2.0;
  double c = hi - g * (hi - lo), d = lo + g * (hi - lo);
  while (hi - lo > tol) {
    if (f(c) < f(d)) {
      hi = d;
    } else {
      lo = c;
    }
    c = hi - g * (hi - lo);
    d = lo + g * (hi - lo);
  }
  return 0.5 * (lo + hi);
}

// Per-class F1 from an explicit confusion matrix, averaged over reference classes.
inline double confusion_macro_f1(const std::vector<int>& pred, const std::vector<int>& ref, int classes) {
  std::vector<std::vector<long>> cm(classes, std::vector<long>(classes, 0));
  for (size_t i = 0; i < pred.size(); ++i) ++cm[ref[i]][pred[i]];
  double sum = 0.0;
  int present = 0;
  for (int c = 0; c < classes; ++c) {
    long row = 0, col = 0;
    for (int k = 0; k < classes; ++k) {
      row += cm[c][k];
      col += cm[k][c];
    }
    if (row == 0) continue;
    ++present;
    const double precision = col ? static_cast<double>(cm[c][c]) / col : 0.0;
    const double recall = static_cast<double>(cm[c][c]) / row;
    sum += precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
  }
  return sum / present;
}

}  // namespace vqla::testing
