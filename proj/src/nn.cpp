#include "vqla/nn.hpp"

#include <cmath>

#include "vqla/error.hpp"

namespace vqla::nn {

Var ParamStore::add(const std::string& name, Matrix init) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
  Var v = ag::parameter(std::move(init));
  index_[name] = params_.size();
  params_.emplace_back(name, v);
  return v;
}

Var ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return params_[it->second].second;
}

size_t ParamStore::scalar_count() const {
  size_t n = 0;
  for (const auto& [_, v] : params_) n += static_cast<size_t>(v.value().size());
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [_, v] : params_) v.zero_grad();
}

Matrix xavier_uniform(Index rows, Index cols, std::mt19937_64& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> dist(-a, a);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Matrix normal(Index rows, Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Linear::Linear(ParamStore& store, const std::string& name, Index in, Index out,
               std::mt19937_64& rng, bool with_bias) {
  weight = store.add(name + ".weight", xavier_uniform(in, out, rng));
  if (with_bias) bias = store.add(name + ".bias", Matrix::Zero(1, out));
}

Var Linear::operator()(const Var& x) const {
  Var y = ag::matmul(x, weight);
  return bias.defined() ? ag::add_row(y, bias) : y;
}

LayerNorm::LayerNorm(ParamStore& store, const std::string& name, Index dim) {
  gain = store.add(name + ".gain", Matrix::Ones(1, dim));
  bias = store.add(name + ".bias", Matrix::Zero(1, dim));
}

FeedForward::FeedForward(ParamStore& store, const std::string& name, Index dim, Index hidden,
                         std::mt19937_64& rng)
    : fc1(store, name + ".fc1", dim, hidden, rng), fc2(store, name + ".fc2", hidden, dim, rng) {}

void Adam::step(ParamStore& store) {
  auto& items = store.items();
  if (m_.size() != items.size()) {
    m_.clear();
    v_.clear();
    for (const auto& [_, p] : items) {
      m_.push_back(Matrix::Zero(p.rows(), p.cols()));
      v_.push_back(Matrix::Zero(p.rows(), p.cols()));
    }
  }
  double clip_scale = 1.0;
  if (config_.grad_clip > 0.0) {
    double sq = 0.0;
    for (const auto& [_, p] : items) {
      if (p.has_grad()) sq += p.grad().squaredNorm();
    }
    const double norm = std::sqrt(sq);
    if (norm > config_.grad_clip) clip_scale = config_.grad_clip / norm;
  }
  ++t_;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (size_t i = 0; i < items.size(); ++i) {
    Var p = items[i].second;
    if (!p.has_grad()) continue;
    const Matrix g = p.grad() * clip_scale;
    m_[i] = b1 * m_[i] + (1.0 - b1) * g;
    v_[i] = b2 * v_[i] + (1.0 - b2) * g.cwiseProduct(g);
    p.mutable_value().array() -= config_.learning_rate * (m_[i].array() / c1) /
                                 ((v_[i].array() / c2).sqrt() + config_.epsilon);
  }
}

}  // namespace vqla::nn
