#pragma once

#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "vqla/autograd.hpp"

namespace vqla::nn {

using ag::Index;
using ag::Matrix;
using ag::Var;

// Ordered registry of named trainable parameters. Names are unique; order is
// registration order, which makes checkpoints and optimizer state stable.
class ParamStore {
 public:
  Var add(const std::string& name, Matrix init);
  Var get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const std::vector<std::pair<std::string, Var>>& items() const { return params_; }
  size_t scalar_count() const;
  void zero_grad();

 private:
  std::vector<std::pair<std::string, Var>> params_;
  std::map<std::string, size_t> index_;
};

Matrix xavier_uniform(Index rows, Index cols, std::mt19937_64& rng);
Matrix normal(Index rows, Index cols, double stddev, std::mt19937_64& rng);

// y = x W + b with W stored as (in x out).
struct Linear {
  Var weight;
  Var bias;  // undefined for bias-free maps

  Linear() = default;
  Linear(ParamStore& store, const std::string& name, Index in, Index out, std::mt19937_64& rng,
         bool with_bias = true);
  Var operator()(const Var& x) const;
  Index in_features() const { return weight.rows(); }
  Index out_features() const { return weight.cols(); }
};

struct LayerNorm {
  Var gain;
  Var bias;

  LayerNorm() = default;
  LayerNorm(ParamStore& store, const std::string& name, Index dim);
  Var operator()(const Var& x) const { return ag::layer_norm(x, gain, bias); }
};

// Two-layer position-wise feed-forward map with GELU.
struct FeedForward {
  Linear fc1;
  Linear fc2;

  FeedForward() = default;
  FeedForward(ParamStore& store, const std::string& name, Index dim, Index hidden,
              std::mt19937_64& rng);
  Var operator()(const Var& x) const { return fc2(ag::gelu(fc1(x))); }
};

struct AdamConfig {
  double learning_rate = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double grad_clip = 0.0;  // global L2 norm; 0 disables
};

class Adam {
 public:
  explicit Adam(AdamConfig config) : config_(config) {}
  // Applies one update from the gradients currently stored on the parameters.
  // Parameters without a gradient are left untouched.
  void step(ParamStore& store);
  long steps() const { return t_; }
  const AdamConfig& config() const { return config_; }
  void set_learning_rate(double lr) { config_.learning_rate = lr; }

 private:
  AdamConfig config_;
  long t_ = 0;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
};

}  // namespace vqla::nn
