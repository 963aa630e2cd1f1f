#pragma once

// Minimal reverse-mode automatic differentiation over dense double matrices.
//
// Every tensor in the library is a 2-D row-major matrix. Sequences of shape
// (B, L, D) are stored as (B*L) x D with the batch index varying slowest, and
// images of shape (B, H, W, C) as (B*H*W) x C. Ops that need the batch
// structure (attention, pooling, class-token handling) take B explicitly.

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace vqla::ag {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using Index = Eigen::Index;

struct Node {
  Matrix value;
  Matrix grad;  // empty until something flows into it
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  bool requires_grad = false;
  bool leaf = true;

  template <class Derived>
  void accumulate(const Eigen::MatrixBase<Derived>& g) {
    if (!requires_grad) return;
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(Matrix value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Matrix& value() const { return node_->value; }
  // Direct mutation is only legal for leaves (parameters, inputs).
  Matrix& mutable_value() { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  bool has_grad() const { return node_ && node_->grad.size() != 0; }
  void zero_grad() const { node_->grad.resize(0, 0); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  double item() const;

  // Reverse pass from a 1x1 value. Gradients of intermediate nodes reachable
  // from this root are reset first; leaf gradients accumulate.
  void backward() const;
  void backward(const Matrix& seed) const;

  const std::shared_ptr<Node>& node() const { return node_; }
  static Var from_node(std::shared_ptr<Node> n);

 private:
  std::shared_ptr<Node> node_;
};

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Builds an op result. `backward` is dropped when no parent needs a gradient.
Var make_op(Matrix value, std::vector<Var> parents, std::function<void(Node&)> backward);

Var constant(Matrix value);
Var parameter(Matrix value);
Var scalar(double v);

// Elementwise / linear algebra
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var matmul(const Var& a, const Var& b);
Var add_row(const Var& a, const Var& row);      // row: 1 x cols, broadcast down
Var add_tiled(const Var& a, const Var& block);  // block: r x cols, tiled down a

Var relu(const Var& a);
Var sigmoid(const Var& a);
Var tanh(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var gelu(const Var& a);

// Row-wise layer normalization with affine gain/bias (each 1 x cols).
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);
Var softmax_rows(const Var& x);

Var sum(const Var& a);
Var mean(const Var& a);

// Structure
Var reshape(const Var& a, Index rows, Index cols);
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var slice_cols(const Var& a, Index start, Index count);
Var slice_rows(const Var& a, Index start, Index count);
Var gather_rows(const Var& table, const std::vector<int>& ids);
// (B*L) x D  ->  (B*(L+1)) x D with `token` (1 x D) inserted before each sample.
Var prepend_token(const Var& seq, const Var& token, Index batch);
// Picks row `index` of every sample: (B*L) x D -> B x D.
Var select_position(const Var& seq, Index batch, Index index);
// B x D -> (B*L) x D, every row repeated L times.
Var repeat_rows(const Var& a, Index times);
// weights: B x L, values: (B*L) x D  ->  B x D weighted sums per sample.
Var weighted_pool(const Var& weights, const Var& values);

// Scaled dot-product attention over `heads` column groups, per sample.
// q: (B*Lq) x D, k, v: (B*Lk) x D. Optionally copies out the B*heads softmax
// matrices (Lq x Lk, sample-major).
Var attention(const Var& q, const Var& k, const Var& v, Index batch, Index heads,
              std::vector<Matrix>* weights_out = nullptr);

Var dropout(const Var& a, double p, std::mt19937_64& rng);

struct Conv2dShape {
  Index batch = 1;
  Index height = 0;
  Index width = 0;
  Index in_channels = 0;
  Index out_channels = 0;
  Index kernel = 3;
  Index stride = 1;
  Index padding = 1;

  Index out_height() const { return (height + 2 * padding - kernel) / stride + 1; }
  Index out_width() const { return (width + 2 * padding - kernel) / stride + 1; }
};

// x: (B*H*W) x Cin, weight: (k*k*Cin) x Cout, bias: 1 x Cout.
Var conv2d(const Var& x, const Var& weight, const Var& bias, const Conv2dShape& shape);

}  // namespace vqla::ag
