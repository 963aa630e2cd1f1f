#pragma once

#include <random>
#include <string>
#include <vector>

#include "vqla/image.hpp"
#include "vqla/nn.hpp"

namespace vqla::encoders {

using ag::Index;
using ag::Matrix;
using ag::Var;

inline constexpr int kTextSegment = 0;
inline constexpr int kVisualSegment = 1;

struct EncoderConfig {
  int dim = 128;
  int grid = 5;  // visual tokens = grid * grid
  int text_len = 25;
  int image_size = 40;
  std::vector<int> conv_channels = {16, 32, 32, 32};
  std::string extractor = "conv";  // only the trained-from-scratch conv stack is built in

  int visual_len() const { return grid * grid; }
  // Throws ConfigError on inconsistent values, including grid^2 != text_len.
  void validate() const;
};

// Packs same-sized RGB images into a (B*H*W) x 3 matrix.
Matrix pack_images(const std::vector<const Image*>& images);

// Token, positional and segment tables for the question, plus the conv stack,
// grid projection and positional table for the image. The segment table is
// shared by both modalities.
class Encoders {
 public:
  Encoders() = default;
  Encoders(nn::ParamStore& store, const EncoderConfig& config, int vocab_size, std::mt19937_64& rng);

  // ids: B rows of exactly text_len ids  ->  (B*text_len) x dim.
  Var embed_text(const std::vector<std::vector<int>>& ids) const;
  // pixels: (B*H*W) x 3 with H = W = image_size  ->  (B*grid^2) x dim.
  Var extract_visual(const Matrix& pixels, Index batch) const;
  Var extract_visual(const Image& image) const;
  // Conv stack output on the grid, before projection and embeddings.
  Var grid_features(const Matrix& pixels, Index batch) const;

  const EncoderConfig& config() const { return config_; }
  int vocab_size() const { return vocab_size_; }

  Var token_table;     // vocab x dim
  Var text_position;   // text_len x dim
  Var segment_table;   // 2 x dim
  Var visual_position; // grid^2 x dim
  std::vector<Var> conv_weight;
  std::vector<Var> conv_bias;
  std::vector<int> conv_stride;
  nn::Linear visual_proj;

 private:
  EncoderConfig config_;
  int vocab_size_ = 0;
};

}  // namespace vqla::encoders
