#include "vqla/autograd.hpp"

#include <cmath>
#include <unordered_set>

#include "vqla/error.hpp"

namespace vqla::ag {

namespace {

thread_local bool g_grad_enabled = true;

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()) + ")");
  }
}

Node& parent(Node& n, size_t i) { return *n.parents[i]; }

}  // namespace

Var::Var(Matrix value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
  node_->leaf = true;
}

Var Var::from_node(std::shared_ptr<Node> n) {
  Var v;
  v.node_ = std::move(n);
  return v;
}

double Var::item() const {
  if (rows() != 1 || cols() != 1) throw ShapeError("item() on a non-scalar value");
  return node_->value(0, 0);
}

void Var::backward() const {
  if (rows() != 1 || cols() != 1) throw ShapeError("backward() without seed needs a scalar");
  backward(Matrix::Ones(1, 1));
}

void Var::backward(const Matrix& seed) const {
  if (!node_->requires_grad) return;
  if (seed.rows() != rows() || seed.cols() != cols()) throw ShapeError("backward seed shape");

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (!n->leaf) n->grad.resize(0, 0);
  }
  node_->accumulate(seed);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->grad.size() == 0 || !n->backward_fn) continue;
    n->backward_fn(*n);
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

Var make_op(Matrix value, std::vector<Var> parents, std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->leaf = false;
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& p : parents) needs = needs || p.requires_grad();
  }
  if (needs) {
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backward_fn = std::move(backward);
  }
  return Var::from_node(std::move(n));
}

Var constant(Matrix value) { return Var(std::move(value), false); }
Var parameter(Matrix value) { return Var(std::move(value), true); }
Var scalar(double v) { return constant(Matrix::Constant(1, 1, v)); }

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  return make_op(a.value() + b.value(), {a, b}, [](Node& n) {
    parent(n, 0).accumulate(n.grad);
    parent(n, 1).accumulate(n.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  return make_op(a.value() - b.value(), {a, b}, [](Node& n) {
    parent(n, 0).accumulate(n.grad);
    parent(n, 1).accumulate(-n.grad);
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  return make_op(a.value().cwiseProduct(b.value()), {a, b}, [](Node& n) {
    Node& pa = parent(n, 0);
    Node& pb = parent(n, 1);
    pa.accumulate(n.grad.cwiseProduct(pb.value));
    pb.accumulate(n.grad.cwiseProduct(pa.value));
  });
}

Var scale(const Var& a, double s) {
  return make_op(a.value() * s, {a}, [s](Node& n) { parent(n, 0).accumulate(n.grad * s); });
}

Var add_scalar(const Var& a, double s) {
  Matrix out = a.value().array() + s;
  return make_op(std::move(out), {a}, [](Node& n) { parent(n, 0).accumulate(n.grad); });
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions " + std::to_string(a.cols()) + " vs " +
                     std::to_string(b.rows()));
  }
  Matrix out = a.value() * b.value();
  return make_op(std::move(out), {a, b}, [](Node& n) {
    Node& pa = parent(n, 0);
    Node& pb = parent(n, 1);
    if (pa.requires_grad) pa.accumulate(n.grad * pb.value.transpose());
    if (pb.requires_grad) pb.accumulate(pa.value.transpose() * n.grad);
  });
}

Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("add_row: row shape");
  Matrix out = a.value().rowwise() + row.value().row(0);
  return make_op(std::move(out), {a, row}, [](Node& n) {
    parent(n, 0).accumulate(n.grad);
    parent(n, 1).accumulate(n.grad.colwise().sum());
  });
}

Var add_tiled(const Var& a, const Var& block) {
  const Index r = block.rows();
  if (block.cols() != a.cols() || r == 0 || a.rows() % r != 0) {
    throw ShapeError("add_tiled: block does not tile input");
  }
  const Index reps = a.rows() / r;
  Matrix out = a.value();
  for (Index t = 0; t < reps; ++t) out.middleRows(t * r, r) += block.value();
  return make_op(std::move(out), {a, block}, [r, reps](Node& n) {
    parent(n, 0).accumulate(n.grad);
    Node& pb = parent(n, 1);
    if (!pb.requires_grad) return;
    Matrix g = Matrix::Zero(r, n.grad.cols());
    for (Index t = 0; t < reps; ++t) g += n.grad.middleRows(t * r, r);
    pb.accumulate(g);
  });
}

Var relu(const Var& a) {
  Matrix out = a.value().cwiseMax(0.0);
  return make_op(std::move(out), {a}, [](Node& n) {
    Node& p = parent(n, 0);
    p.accumulate((p.value.array() > 0.0).select(n.grad.array(), 0.0).matrix());
  });
}

Var sigmoid(const Var& a) {
  Matrix out = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  return make_op(std::move(out), {a}, [](Node& n) {
    const auto& y = n.value.array();
    parent(n, 0).accumulate((n.grad.array() * y * (1.0 - y)).matrix());
  });
}

Var tanh(const Var& a) {
  Matrix out = a.value().array().tanh().matrix();
  return make_op(std::move(out), {a}, [](Node& n) {
    const auto& y = n.value.array();
    parent(n, 0).accumulate((n.grad.array() * (1.0 - y * y)).matrix());
  });
}

Var exp(const Var& a) {
  Matrix out = a.value().array().exp().matrix();
  return make_op(std::move(out), {a},
                 [](Node& n) { parent(n, 0).accumulate(n.grad.cwiseProduct(n.value)); });
}

Var log(const Var& a) {
  Matrix out = a.value().array().log().matrix();
  return make_op(std::move(out), {a}, [](Node& n) {
    Node& p = parent(n, 0);
    p.accumulate((n.grad.array() / p.value.array()).matrix());
  });
}

Var gelu(const Var& a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  Matrix out = a.value().unaryExpr(
      [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); });
  return make_op(std::move(out), {a}, [](Node& n) {
    Node& p = parent(n, 0);
    Matrix d = p.value.unaryExpr([](double x) {
      return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
    });
    p.accumulate(n.grad.cwiseProduct(d));
  });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  const Index d = x.cols();
  if (gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 || bias.cols() != d) {
    throw ShapeError("layer_norm: affine parameter shape");
  }
  auto normed = std::make_shared<Matrix>(x.rows(), d);
  auto inv_std = std::make_shared<Eigen::VectorXd>(x.rows());
  for (Index r = 0; r < x.rows(); ++r) {
    const auto row = x.value().row(r);
    const double mu = row.mean();
    const double var = (row.array() - mu).square().mean();
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)(r) = is;
    normed->row(r) = (row.array() - mu) * is;
  }
  Matrix out = normed->array().rowwise() * gain.value().row(0).array();
  out.rowwise() += bias.value().row(0);
  return make_op(std::move(out), {x, gain, bias}, [normed, inv_std, d](Node& n) {
    Node& px = parent(n, 0);
    Node& pg = parent(n, 1);
    Node& pb = parent(n, 2);
    if (pg.requires_grad) pg.accumulate(n.grad.cwiseProduct(*normed).colwise().sum());
    if (pb.requires_grad) pb.accumulate(n.grad.colwise().sum());
    if (!px.requires_grad) return;
    Matrix dxhat = n.grad.array().rowwise() * pg.value.row(0).array();
    Matrix dx(n.grad.rows(), d);
    for (Index r = 0; r < dx.rows(); ++r) {
      const double m1 = dxhat.row(r).mean();
      const double m2 = dxhat.row(r).dot(normed->row(r)) / static_cast<double>(d);
      dx.row(r) = (*inv_std)(r) * (dxhat.row(r).array() - m1 - normed->row(r).array() * m2);
    }
    px.accumulate(dx);
  });
}

Var softmax_rows(const Var& x) {
  Matrix out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const double m = x.value().row(r).maxCoeff();
    out.row(r) = (x.value().row(r).array() - m).exp();
    out.row(r) /= out.row(r).sum();
  }
  return make_op(std::move(out), {x}, [](Node& n) {
    Matrix g(n.grad.rows(), n.grad.cols());
    for (Index r = 0; r < g.rows(); ++r) {
      const double dot = n.grad.row(r).dot(n.value.row(r));
      g.row(r) = n.value.row(r).array() * (n.grad.row(r).array() - dot);
    }
    parent(n, 0).accumulate(g);
  });
}

Var sum(const Var& a) {
  return make_op(Matrix::Constant(1, 1, a.value().sum()), {a}, [](Node& n) {
    Node& p = parent(n, 0);
    p.accumulate(Matrix::Constant(p.value.rows(), p.value.cols(), n.grad(0, 0)));
  });
}

Var mean(const Var& a) {
  const double count = static_cast<double>(a.value().size());
  return make_op(Matrix::Constant(1, 1, a.value().sum() / count), {a}, [count](Node& n) {
    Node& p = parent(n, 0);
    p.accumulate(Matrix::Constant(p.value.rows(), p.value.cols(), n.grad(0, 0) / count));
  });
}

Var reshape(const Var& a, Index rows, Index cols) {
  if (rows * cols != a.value().size()) throw ShapeError("reshape: element count changes");
  Matrix out = Eigen::Map<const Matrix>(a.value().data(), rows, cols);
  const Index r0 = a.rows();
  const Index c0 = a.cols();
  return make_op(std::move(out), {a}, [r0, c0](Node& n) {
    parent(n, 0).accumulate(Eigen::Map<const Matrix>(n.grad.data(), r0, c0));
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const Index rows = parts.front().rows();
  Index total = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row mismatch");
    total += p.cols();
  }
  Matrix out(rows, total);
  std::vector<Index> offsets;
  Index off = 0;
  for (const auto& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    offsets.push_back(off);
    off += p.cols();
  }
  return make_op(std::move(out), parts, [offsets](Node& n) {
    for (size_t i = 0; i < n.parents.size(); ++i) {
      Node& p = parent(n, i);
      if (p.requires_grad) p.accumulate(n.grad.middleCols(offsets[i], p.value.cols()));
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const Index cols = parts.front().cols();
  Index total = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat_rows: column mismatch");
    total += p.rows();
  }
  Matrix out(total, cols);
  std::vector<Index> offsets;
  Index off = 0;
  for (const auto& p : parts) {
    out.middleRows(off, p.rows()) = p.value();
    offsets.push_back(off);
    off += p.rows();
  }
  return make_op(std::move(out), parts, [offsets](Node& n) {
    for (size_t i = 0; i < n.parents.size(); ++i) {
      Node& p = parent(n, i);
      if (p.requires_grad) p.accumulate(n.grad.middleRows(offsets[i], p.value.rows()));
    }
  });
}

Var slice_cols(const Var& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw ShapeError("slice_cols: range");
  Matrix out = a.value().middleCols(start, count);
  return make_op(std::move(out), {a}, [start, count](Node& n) {
    Node& p = parent(n, 0);
    Matrix g = Matrix::Zero(p.value.rows(), p.value.cols());
    g.middleCols(start, count) = n.grad;
    p.accumulate(g);
  });
}

Var slice_rows(const Var& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw ShapeError("slice_rows: range");
  Matrix out = a.value().middleRows(start, count);
  return make_op(std::move(out), {a}, [start, count](Node& n) {
    Node& p = parent(n, 0);
    Matrix g = Matrix::Zero(p.value.rows(), p.value.cols());
    g.middleRows(start, count) = n.grad;
    p.accumulate(g);
  });
}

Var gather_rows(const Var& table, const std::vector<int>& ids) {
  const Index vocab = table.rows();
  Matrix out(static_cast<Index>(ids.size()), table.cols());
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= vocab) {
      throw IndexError("gather_rows: id " + std::to_string(ids[i]) + " outside table of " +
                       std::to_string(vocab) + " rows");
    }
    out.row(static_cast<Index>(i)) = table.value().row(ids[i]);
  }
  return make_op(std::move(out), {table}, [ids](Node& n) {
    Node& p = parent(n, 0);
    Matrix g = Matrix::Zero(p.value.rows(), p.value.cols());
    for (size_t i = 0; i < ids.size(); ++i) g.row(ids[i]) += n.grad.row(static_cast<Index>(i));
    p.accumulate(g);
  });
}

Var prepend_token(const Var& seq, const Var& token, Index batch) {
  if (token.rows() != 1 || token.cols() != seq.cols() || batch <= 0 || seq.rows() % batch != 0) {
    throw ShapeError("prepend_token: shape");
  }
  const Index len = seq.rows() / batch;
  Matrix out(batch * (len + 1), seq.cols());
  for (Index b = 0; b < batch; ++b) {
    out.row(b * (len + 1)) = token.value().row(0);
    out.middleRows(b * (len + 1) + 1, len) = seq.value().middleRows(b * len, len);
  }
  return make_op(std::move(out), {seq, token}, [batch, len](Node& n) {
    Node& ps = parent(n, 0);
    Node& pt = parent(n, 1);
    if (ps.requires_grad) {
      Matrix g(batch * len, n.grad.cols());
      for (Index b = 0; b < batch; ++b) {
        g.middleRows(b * len, len) = n.grad.middleRows(b * (len + 1) + 1, len);
      }
      ps.accumulate(g);
    }
    if (pt.requires_grad) {
      RowVector g = RowVector::Zero(n.grad.cols());
      for (Index b = 0; b < batch; ++b) g += n.grad.row(b * (len + 1));
      pt.accumulate(g);
    }
  });
}

Var select_position(const Var& seq, Index batch, Index index) {
  if (batch <= 0 || seq.rows() % batch != 0) throw ShapeError("select_position: batch");
  const Index len = seq.rows() / batch;
  if (index < 0 || index >= len) throw ShapeError("select_position: index");
  Matrix out(batch, seq.cols());
  for (Index b = 0; b < batch; ++b) out.row(b) = seq.value().row(b * len + index);
  return make_op(std::move(out), {seq}, [batch, len, index](Node& n) {
    Node& p = parent(n, 0);
    Matrix g = Matrix::Zero(p.value.rows(), p.value.cols());
    for (Index b = 0; b < batch; ++b) g.row(b * len + index) = n.grad.row(b);
    p.accumulate(g);
  });
}

Var repeat_rows(const Var& a, Index times) {
  if (times <= 0) throw ShapeError("repeat_rows: times");
  Matrix out(a.rows() * times, a.cols());
  for (Index r = 0; r < a.rows(); ++r) {
    out.middleRows(r * times, times).rowwise() = a.value().row(r);
  }
  return make_op(std::move(out), {a}, [times](Node& n) {
    Node& p = parent(n, 0);
    Matrix g(p.value.rows(), p.value.cols());
    for (Index r = 0; r < g.rows(); ++r) g.row(r) = n.grad.middleRows(r * times, times).colwise().sum();
    p.accumulate(g);
  });
}

Var weighted_pool(const Var& weights, const Var& values) {
  const Index batch = weights.rows();
  const Index len = weights.cols();
  if (values.rows() != batch * len) throw ShapeError("weighted_pool: rows");
  Matrix out(batch, values.cols());
  for (Index b = 0; b < batch; ++b) {
    out.row(b) = weights.value().row(b) * values.value().middleRows(b * len, len);
  }
  return make_op(std::move(out), {weights, values}, [batch, len](Node& n) {
    Node& pw = parent(n, 0);
    Node& pv = parent(n, 1);
    if (pw.requires_grad) {
      Matrix g(batch, len);
      for (Index b = 0; b < batch; ++b) {
        g.row(b) = n.grad.row(b) * pv.value.middleRows(b * len, len).transpose();
      }
      pw.accumulate(g);
    }
    if (pv.requires_grad) {
      Matrix g(batch * len, pv.value.cols());
      for (Index b = 0; b < batch; ++b) {
        g.middleRows(b * len, len) = pw.value.row(b).transpose() * n.grad.row(b);
      }
      pv.accumulate(g);
    }
  });
}

Var attention(const Var& q, const Var& k, const Var& v, Index batch, Index heads,
              std::vector<Matrix>* weights_out) {
  const Index d = q.cols();
  if (k.cols() != d || v.cols() != d) throw ShapeError("attention: model width mismatch");
  if (k.rows() != v.rows()) throw ShapeError("attention: key/value length mismatch");
  if (heads <= 0 || d % heads != 0) throw ShapeError("attention: width not divisible by heads");
  if (batch <= 0 || q.rows() % batch != 0 || k.rows() % batch != 0) {
    throw ShapeError("attention: rows not divisible by batch");
  }
  const Index lq = q.rows() / batch;
  const Index lk = k.rows() / batch;
  const Index dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

  auto probs = std::make_shared<std::vector<Matrix>>(batch * heads);
  Matrix out(q.rows(), d);
  for (Index b = 0; b < batch; ++b) {
    for (Index h = 0; h < heads; ++h) {
      const auto qb = q.value().block(b * lq, h * dh, lq, dh);
      const auto kb = k.value().block(b * lk, h * dh, lk, dh);
      const auto vb = v.value().block(b * lk, h * dh, lk, dh);
      Matrix s = (qb * kb.transpose()) * sc;
      for (Index r = 0; r < lq; ++r) {
        const double m = s.row(r).maxCoeff();
        s.row(r) = (s.row(r).array() - m).exp();
        s.row(r) /= s.row(r).sum();
      }
      out.block(b * lq, h * dh, lq, dh) = s * vb;
      (*probs)[b * heads + h] = std::move(s);
    }
  }
  if (weights_out) *weights_out = *probs;

  return make_op(std::move(out), {q, k, v}, [probs, batch, heads, lq, lk, dh, sc](Node& n) {
    Node& pq = parent(n, 0);
    Node& pk = parent(n, 1);
    Node& pv = parent(n, 2);
    Matrix gq = Matrix::Zero(pq.value.rows(), pq.value.cols());
    Matrix gk = Matrix::Zero(pk.value.rows(), pk.value.cols());
    Matrix gv = Matrix::Zero(pv.value.rows(), pv.value.cols());
    for (Index b = 0; b < batch; ++b) {
      for (Index h = 0; h < heads; ++h) {
        const Matrix& a = (*probs)[b * heads + h];
        const auto go = n.grad.block(b * lq, h * dh, lq, dh);
        const auto qb = pq.value.block(b * lq, h * dh, lq, dh);
        const auto kb = pk.value.block(b * lk, h * dh, lk, dh);
        const auto vb = pv.value.block(b * lk, h * dh, lk, dh);
        gv.block(b * lk, h * dh, lk, dh).noalias() += a.transpose() * go;
        Matrix da = go * vb.transpose();
        Matrix ds(lq, lk);
        for (Index r = 0; r < lq; ++r) {
          const double dot = da.row(r).dot(a.row(r));
          ds.row(r) = a.row(r).array() * (da.row(r).array() - dot);
        }
        ds *= sc;
        gq.block(b * lq, h * dh, lq, dh).noalias() += ds * kb;
        gk.block(b * lk, h * dh, lk, dh).noalias() += ds.transpose() * qb;
      }
    }
    pq.accumulate(gq);
    pk.accumulate(gk);
    pv.accumulate(gv);
  });
}

Var dropout(const Var& a, double p, std::mt19937_64& rng) {
  if (p <= 0.0) return a;
  if (p >= 1.0) throw ConfigError("dropout probability must be < 1");
  auto mask = std::make_shared<Matrix>(a.rows(), a.cols());
  std::bernoulli_distribution keep(1.0 - p);
  const double s = 1.0 / (1.0 - p);
  for (Index i = 0; i < mask->size(); ++i) mask->data()[i] = keep(rng) ? s : 0.0;
  Matrix out = a.value().cwiseProduct(*mask);
  return make_op(std::move(out), {a},
                 [mask](Node& n) { parent(n, 0).accumulate(n.grad.cwiseProduct(*mask)); });
}

Var conv2d(const Var& x, const Var& weight, const Var& bias, const Conv2dShape& s) {
  const Index ho = s.out_height();
  const Index wo = s.out_width();
  const Index k = s.kernel;
  const Index cin = s.in_channels;
  if (x.rows() != s.batch * s.height * s.width || x.cols() != cin) {
    throw ShapeError("conv2d: input is not (B*H*W) x Cin");
  }
  if (weight.rows() != k * k * cin || weight.cols() != s.out_channels) {
    throw ShapeError("conv2d: weight shape");
  }
  if (bias.rows() != 1 || bias.cols() != s.out_channels) throw ShapeError("conv2d: bias shape");
  if (ho <= 0 || wo <= 0) throw ShapeError("conv2d: empty output");

  // im2col; out-of-bounds taps read zero padding.
  auto cols = std::make_shared<Matrix>(Matrix::Zero(s.batch * ho * wo, k * k * cin));
  const auto& xv = x.value();
  for (Index b = 0; b < s.batch; ++b) {
    for (Index oy = 0; oy < ho; ++oy) {
      for (Index ox = 0; ox < wo; ++ox) {
        const Index row = (b * ho + oy) * wo + ox;
        for (Index ky = 0; ky < k; ++ky) {
          const Index iy = oy * s.stride + ky - s.padding;
          if (iy < 0 || iy >= s.height) continue;
          for (Index kx = 0; kx < k; ++kx) {
            const Index ix = ox * s.stride + kx - s.padding;
            if (ix < 0 || ix >= s.width) continue;
            cols->block(row, (ky * k + kx) * cin, 1, cin) =
                xv.row((b * s.height + iy) * s.width + ix);
          }
        }
      }
    }
  }
  Matrix out = (*cols) * weight.value();
  out.rowwise() += bias.value().row(0);

  return make_op(std::move(out), {x, weight, bias}, [cols, s, ho, wo, k, cin](Node& n) {
    Node& px = parent(n, 0);
    Node& pw = parent(n, 1);
    Node& pb = parent(n, 2);
    if (pw.requires_grad) pw.accumulate(cols->transpose() * n.grad);
    if (pb.requires_grad) pb.accumulate(n.grad.colwise().sum());
    if (!px.requires_grad) return;
    Matrix dcols = n.grad * pw.value.transpose();
    Matrix dx = Matrix::Zero(px.value.rows(), px.value.cols());
    for (Index b = 0; b < s.batch; ++b) {
      for (Index oy = 0; oy < ho; ++oy) {
        for (Index ox = 0; ox < wo; ++ox) {
          const Index row = (b * ho + oy) * wo + ox;
          for (Index ky = 0; ky < k; ++ky) {
            const Index iy = oy * s.stride + ky - s.padding;
            if (iy < 0 || iy >= s.height) continue;
            for (Index kx = 0; kx < k; ++kx) {
              const Index ix = ox * s.stride + kx - s.padding;
              if (ix < 0 || ix >= s.width) continue;
              dx.row((b * s.height + iy) * s.width + ix) +=
                  dcols.block(row, (ky * k + kx) * cin, 1, cin);
            }
          }
        }
      }
    }
    px.accumulate(dx);
  });
}

}  // namespace vqla::ag
