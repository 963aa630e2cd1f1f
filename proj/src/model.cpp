#include "vqla/model.hpp"

#include <cstring>
#include <fstream>

#include "vqla/error.hpp"

namespace vqla::model {

void ModelConfig::validate() const {
  encoder.validate();
  if (backbone.depth < 0) throw ConfigError("depth must be >= 0");
  if (backbone.heads < 1 || encoder.dim % backbone.heads != 0) throw ConfigError("dim must be divisible by heads");
  if (backbone.mlp_ratio < 1) throw ConfigError("mlp_ratio must be >= 1");
  if (backbone.dropout < 0.0 || backbone.dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
  const int d = encoder.dim;
  if (fusion.attn_heads < 1 || d % fusion.attn_heads != 0) throw ConfigError("dim must be divisible by attn_heads");
  if (fusion.mcc_heads < 1 || d % fusion.mcc_heads != 0) throw ConfigError("dim must be divisible by mcc_heads");
  if (fusion.gcc_heads < 1 || d % fusion.gcc_heads != 0) throw ConfigError("dim must be divisible by gcc_heads");
  if (fusion.n_coattn_layers < 0) throw ConfigError("n_coattn_layers must be >= 0");
}

nlohmann::json model_config_to_json(const ModelConfig& c) {
  nlohmann::json j;
  j["dim"] = c.encoder.dim;
  j["grid"] = c.encoder.grid;
  j["text_len"] = c.encoder.text_len;
  j["image_size"] = c.encoder.image_size;
  j["conv_channels"] = c.encoder.conv_channels;
  j["extractor"] = c.encoder.extractor;
  j["n_coattn_layers"] = c.fusion.n_coattn_layers;
  j["attn_mode"] = fusion::attn_mode_name(c.fusion.attn_mode);
  j["attn_heads"] = c.fusion.attn_heads;
  j["mcc_heads"] = c.fusion.mcc_heads;
  j["gcc_heads"] = c.fusion.gcc_heads;
  j["use_ca"] = c.fusion.use_coattention;
  j["use_mcc"] = c.fusion.use_mcc;
  j["use_gcc"] = c.fusion.use_gcc;
  j["use_gf"] = c.fusion.use_gate;
  j["depth"] = c.backbone.depth;
  j["heads"] = c.backbone.heads;
  j["mlp_ratio"] = c.backbone.mlp_ratio;
  j["dropout"] = c.backbone.dropout;
  j["positional"] = c.backbone.positional;
  j["seed"] = c.seed;
  return j;
}

ModelConfig model_config_from_json(const nlohmann::json& flat, ModelConfig c) {
  try {
    auto set = [&](const char* key, auto& dst) {
      if (flat.contains(key)) dst = flat.at(key).get<std::decay_t<decltype(dst)>>();
    };
    set("dim", c.encoder.dim);
    set("grid", c.encoder.grid);
    set("text_len", c.encoder.text_len);
    set("image_size", c.encoder.image_size);
    if (flat.contains("conv_channels")) {
      const auto& v = flat.at("conv_channels");
      c.encoder.conv_channels = v.is_array() ? v.get<std::vector<int>>() : std::vector<int>{v.get<int>()};
    }
    set("extractor", c.encoder.extractor);
    set("n_coattn_layers", c.fusion.n_coattn_layers);
    if (flat.contains("attn_mode")) c.fusion.attn_mode = fusion::parse_attn_mode(flat.at("attn_mode").get<std::string>());
    set("attn_heads", c.fusion.attn_heads);
    set("mcc_heads", c.fusion.mcc_heads);
    set("gcc_heads", c.fusion.gcc_heads);
    set("use_ca", c.fusion.use_coattention);
    set("use_mcc", c.fusion.use_mcc);
    set("use_gcc", c.fusion.use_gcc);
    set("use_gf", c.fusion.use_gate);
    set("depth", c.backbone.depth);
    set("heads", c.backbone.heads);
    set("mlp_ratio", c.backbone.mlp_ratio);
    set("dropout", c.backbone.dropout);
    set("positional", c.backbone.positional);
    set("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad model config value: ") + e.what());
  }
  return c;
}

Backbone::Backbone(nn::ParamStore& store, const BackboneConfig& config, Index dim, Index len,
                   std::mt19937_64& rng)
    : config_(config) {
  class_token = store.add("backbone.class_token", nn::normal(1, dim, 0.02, rng));
  position = store.add("backbone.position", nn::normal(len, dim, 0.02, rng));
  for (int i = 0; i < config.depth; ++i) {
    const std::string p = "backbone.layer" + std::to_string(i);
    EncoderLayer layer;
    layer.ln1 = nn::LayerNorm(store, p + ".ln1", dim);
    layer.attn = fusion::MultiHeadAttention(store, p + ".attn", dim, config.heads, rng);
    layer.ln2 = nn::LayerNorm(store, p + ".ln2", dim);
    layer.ffn = nn::FeedForward(store, p + ".ffn", dim, config.mlp_ratio * dim, rng);
    layers.push_back(std::move(layer));
  }
  final_norm = nn::LayerNorm(store, "backbone.final_norm", dim);
}

BackboneOutput Backbone::operator()(const Var& fused, Index batch, std::mt19937_64* dropout_rng) const {
  if (batch < 1 || fused.rows() != batch * position.rows() || fused.cols() != class_token.cols()) {
    throw ShapeError("backbone: expected (B*L) x D input");
  }
  auto drop = [&](const Var& x) {
    return dropout_rng && config_.dropout > 0.0 ? ag::dropout(x, config_.dropout, *dropout_rng) : x;
  };
  Var x = config_.positional ? ag::add_tiled(fused, position) : fused;
  x = ag::prepend_token(x, class_token, batch);
  for (const auto& layer : layers) {
    const Var h = layer.ln1(x);
    x = ag::add(x, drop(fusion::mha(h, h, h, layer.attn, batch)));
    x = ag::add(x, drop(layer.ffn(layer.ln2(x))));
  }
  if (!layers.empty()) x = final_norm(x);
  return {ag::select_position(x, batch, 0), x};
}

Var backbone_forward(const Var& fused, const Backbone& backbone, Index batch) {
  return backbone(fused, batch).class_feature;
}

BoxHead::BoxHead(nn::ParamStore& store, const std::string& name, Index dim, std::mt19937_64& rng)
    : fc1(store, name + ".fc1", dim, dim, rng),
      fc2(store, name + ".fc2", dim, dim, rng),
      fc3(store, name + ".fc3", dim, 4, rng) {}

Var BoxHead::operator()(const Var& x) const { return ag::sigmoid(fc3(ag::relu(fc2(ag::relu(fc1(x)))))); }

Var classify(const Var& class_feature, const nn::Linear& head) { return head(class_feature); }
Var localize(const Var& class_feature, const BoxHead& head) { return head(class_feature); }

Batch make_batch(const std::vector<dataio::QASample>& samples, const std::vector<size_t>& indices,
                 const dataio::QuestionVocab& vocab, int text_len) {
  if (indices.empty()) throw ShapeError("make_batch: empty batch");
  Batch b;
  b.size = static_cast<Index>(indices.size());
  std::vector<const Image*> images;
  b.boxes.resize(b.size, 4);
  for (size_t i = 0; i < indices.size(); ++i) {
    const auto& s = samples.at(indices[i]);
    b.token_ids.push_back(dataio::tokenize(s.question, vocab, text_len));
    images.push_back(&s.image);
    b.labels.push_back(s.answer_class);
    b.boxes.row(static_cast<Index>(i)) << s.bbox.cx, s.bbox.cy, s.bbox.w, s.bbox.h;
    b.types.push_back(dataio::classify_question(s.question));
    b.frame_ids.push_back(s.frame_id);
  }
  b.pixels = encoders::pack_images(images);
  return b;
}

Model::Model(const ModelConfig& config, dataio::QuestionVocab questions, dataio::AnswerVocab answers)
    : config_(config), questions_(std::move(questions)), answers_(std::move(answers)) {
  config_.validate();
  if (answers_.size() == 0) throw ConfigError("answer vocabulary is empty");
  std::mt19937_64 rng(config_.seed);
  const Index d = config_.encoder.dim;
  encoders = encoders::Encoders(params, config_.encoder, static_cast<int>(questions_.size()), rng);
  fusion = fusion::C2GViL(params, config_.fusion, d, rng);
  backbone = Backbone(params, config_.backbone, d, config_.encoder.text_len, rng);
  classifier = nn::Linear(params, "heads.classifier", d, static_cast<Index>(answers_.size()), rng);
  box_head = BoxHead(params, "heads.box", d, rng);
  projection = adversarial::ProjectionHead(params, "adversarial.projection", d, rng);
  uncertainty = losses::UncertaintyWeights(params);
}

ForwardOutput Model::forward_embeddings(const Var& text, const Var& visual, Index batch,
                                        std::mt19937_64* dropout_rng) const {
  ForwardOutput out;
  out.text = text;
  out.visual = visual;
  out.fused = fusion(text, visual, batch);
  out.class_feature = backbone(out.fused, batch, dropout_rng).class_feature;
  out.logits = classify(out.class_feature, classifier);
  out.boxes = localize(out.class_feature, box_head);
  return out;
}

ForwardOutput Model::forward(const Batch& batch, std::mt19937_64* dropout_rng) const {
  const Var text = encoders.embed_text(batch.token_ids);
  const Var visual = encoders.extract_visual(batch.pixels, batch.size);
  return forward_embeddings(text, visual, batch.size, dropout_rng);
}

std::vector<Prediction> Model::predict(const Batch& batch) const {
  ag::NoGradGuard guard;
  const auto out = forward(batch);
  std::vector<Prediction> preds(static_cast<size_t>(batch.size));
  for (Index i = 0; i < batch.size; ++i) {
    auto& p = preds[static_cast<size_t>(i)];
    const auto row = out.logits.value().row(i);
    p.logits.assign(row.data(), row.data() + row.size());
    const auto b = out.boxes.value().row(i);
    p.bbox = {b(0), b(1), b(2), b(3)};
  }
  return preds;
}

void save_checkpoint(const std::filesystem::path& path, const Model& model, const nlohmann::json& extra) {
  nlohmann::json meta;
  meta["config"] = model_config_to_json(model.config());
  meta["question_vocab"] = model.question_vocab().tokens();
  meta["answer_vocab"] = model.answer_vocab().tokens();
  meta["extra"] = extra;
  nlohmann::json table = nlohmann::json::array();
  for (const auto& [name, v] : model.params.items()) table.push_back({{"name", name}, {"rows", v.rows()}, {"cols", v.cols()}});
  meta["params"] = table;

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out << kCheckpointHeader << "\n" << meta.dump() << "\n";
  for (const auto& [name, v] : model.params.items()) {
    out.write(reinterpret_cast<const char*>(v.value().data()),
              static_cast<std::streamsize>(v.value().size() * sizeof(double)));
  }
  if (!out) throw IoError("checkpoint write failed: " + path.string());
}

std::unique_ptr<Model> load_checkpoint(const std::filesystem::path& path, nlohmann::json* extra) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::string header;
  std::getline(in, header);
  if (header != kCheckpointHeader) throw IntegrityError(path.string() + ": unsupported checkpoint header '" + header + "'");
  std::string meta_line;
  std::getline(in, meta_line);
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(meta_line);
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(path.string() + ": corrupt checkpoint metadata");
  }
  const auto config = model_config_from_json(meta.at("config"));
  auto questions = dataio::Vocab::from_tokens(meta.at("question_vocab").get<std::vector<std::string>>(), true);
  auto answers = dataio::Vocab::from_tokens(meta.at("answer_vocab").get<std::vector<std::string>>(), false);
  auto model = std::make_unique<Model>(config, std::move(questions), std::move(answers));

  const auto& table = meta.at("params");
  const auto& items = model->params.items();
  if (table.size() != items.size()) throw IntegrityError("checkpoint parameter count does not match the model");
  for (size_t i = 0; i < items.size(); ++i) {
    const auto& entry = table[i];
    Var v = items[i].second;
    if (entry.at("name").get<std::string>() != items[i].first || entry.at("rows").get<Index>() != v.rows() ||
        entry.at("cols").get<Index>() != v.cols()) {
      throw IntegrityError("checkpoint parameter mismatch at " + items[i].first);
    }
    in.read(reinterpret_cast<char*>(v.mutable_value().data()),
            static_cast<std::streamsize>(v.value().size() * sizeof(double)));
    if (!in) throw IntegrityError(path.string() + ": truncated checkpoint");
  }
  if (extra) *extra = meta.value("extra", nlohmann::json::object());
  return model;
}

}  // namespace vqla::model
