#pragma once

#include <filesystem>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vqla/adversarial.hpp"
#include "vqla/dataio.hpp"
#include "vqla/encoders.hpp"
#include "vqla/fusion.hpp"
#include "vqla/losses.hpp"
#include "vqla/nn.hpp"

namespace vqla::model {

using ag::Index;
using ag::Matrix;
using ag::Var;

struct BackboneConfig {
  int depth = 4;
  int heads = 4;
  int mlp_ratio = 4;
  double dropout = 0.1;
  bool positional = true;
};

struct ModelConfig {
  encoders::EncoderConfig encoder;
  fusion::FusionConfig fusion;
  BackboneConfig backbone;
  std::uint64_t seed = 0;

  void validate() const;
};

// Flat key view shared with the configuration files.
nlohmann::json model_config_to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& flat, ModelConfig base = {});

struct EncoderLayer {
  nn::LayerNorm ln1, ln2;
  fusion::MultiHeadAttention attn;
  nn::FeedForward ffn;
};

struct BackboneOutput {
  Var class_feature;  // B x D
  Var tokens;         // (B*(L+1)) x D, class token first
};

// Pre-norm transformer encoder with a learnable class token.
class Backbone {
 public:
  Backbone() = default;
  Backbone(nn::ParamStore& store, const BackboneConfig& config, Index dim, Index len, std::mt19937_64& rng);
  BackboneOutput operator()(const Var& fused, Index batch, std::mt19937_64* dropout_rng = nullptr) const;

  Var class_token;  // 1 x D
  Var position;     // L x D
  std::vector<EncoderLayer> layers;
  nn::LayerNorm final_norm;

 private:
  BackboneConfig config_;
};

Var backbone_forward(const Var& fused, const Backbone& backbone, Index batch);

// Linear D -> D, ReLU, Linear D -> D, ReLU, Linear D -> 4, sigmoid; (cx, cy, w, h).
struct BoxHead {
  nn::Linear fc1, fc2, fc3;

  BoxHead() = default;
  BoxHead(nn::ParamStore& store, const std::string& name, Index dim, std::mt19937_64& rng);
  Var operator()(const Var& x) const;
};

Var classify(const Var& class_feature, const nn::Linear& head);
Var localize(const Var& class_feature, const BoxHead& head);

// Model-ready tensors for a list of samples.
struct Batch {
  Index size = 0;
  std::vector<std::vector<int>> token_ids;
  Matrix pixels;  // (B*H*W) x 3
  std::vector<int> labels;
  Matrix boxes;   // B x 4
  std::vector<dataio::QuestionType> types;
  std::vector<std::string> frame_ids;
};

Batch make_batch(const std::vector<dataio::QASample>& samples, const std::vector<size_t>& indices,
                 const dataio::QuestionVocab& vocab, int text_len);

struct ForwardOutput {
  Var text;           // text embedding sequence
  Var visual;         // visual embedding sequence
  Var fused;
  Var class_feature;
  Var logits;         // B x C
  Var boxes;          // B x 4
};

struct Prediction {
  std::vector<double> logits;
  dataio::BBox bbox;
};

class Model {
 public:
  Model(const ModelConfig& config, dataio::QuestionVocab questions, dataio::AnswerVocab answers);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  ForwardOutput forward(const Batch& batch, std::mt19937_64* dropout_rng = nullptr) const;
  // Fusion, backbone and heads from given embedding sequences.
  ForwardOutput forward_embeddings(const Var& text, const Var& visual, Index batch,
                                   std::mt19937_64* dropout_rng = nullptr) const;
  std::vector<Prediction> predict(const Batch& batch) const;

  const ModelConfig& config() const { return config_; }
  const dataio::QuestionVocab& question_vocab() const { return questions_; }
  const dataio::AnswerVocab& answer_vocab() const { return answers_; }
  int num_classes() const { return static_cast<int>(answers_.size()); }

  nn::ParamStore params;
  encoders::Encoders encoders;
  fusion::C2GViL fusion;
  Backbone backbone;
  nn::Linear classifier;
  BoxHead box_head;
  adversarial::ProjectionHead projection;
  losses::UncertaintyWeights uncertainty;

 private:
  ModelConfig config_;
  dataio::QuestionVocab questions_;
  dataio::AnswerVocab answers_;
};

// Text header, JSON line (config echo, vocabularies, parameter table), then
// the raw parameter values as little-endian doubles in table order.
inline constexpr const char* kCheckpointHeader = "VQLA-CHECKPOINT v1";
void save_checkpoint(const std::filesystem::path& path, const Model& model,
                     const nlohmann::json& extra = nlohmann::json::object());
std::unique_ptr<Model> load_checkpoint(const std::filesystem::path& path, nlohmann::json* extra = nullptr);

}  // namespace vqla::model
