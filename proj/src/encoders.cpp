#include "vqla/encoders.hpp"

#include <cmath>

#include "vqla/error.hpp"

namespace vqla::encoders {

void EncoderConfig::validate() const {
  if (dim < 1 || grid < 1 || text_len < 1) throw ConfigError("dim, grid and text_len must be positive");
  if (visual_len() != text_len) {
    throw ConfigError("fusion needs equal lengths: grid^2 = " + std::to_string(visual_len()) +
                      " but text_len = " + std::to_string(text_len));
  }
  if (extractor != "conv") throw ConfigError("visual extractor '" + extractor + "' is not available");
  if (conv_channels.empty()) throw ConfigError("conv_channels must not be empty");
  for (int c : conv_channels) {
    if (c < 1) throw ConfigError("conv channel counts must be positive");
  }
  if (image_size % grid != 0) throw ConfigError("image_size must be a multiple of grid");
  int ratio = image_size / grid;
  int halvings = 0;
  while (ratio > 1 && ratio % 2 == 0) {
    ratio /= 2;
    ++halvings;
  }
  if (ratio != 1) throw ConfigError("image_size / grid must be a power of two");
  if (halvings > static_cast<int>(conv_channels.size())) {
    throw ConfigError("not enough conv blocks to reach the grid resolution");
  }
}

Matrix pack_images(const std::vector<const Image*>& images) {
  if (images.empty()) throw ShapeError("pack_images: empty batch");
  const int h = images[0]->height;
  const int w = images[0]->width;
  Matrix out(static_cast<Index>(images.size()) * h * w, 3);
  for (size_t b = 0; b < images.size(); ++b) {
    const Image& img = *images[b];
    if (img.channels != 3) throw ShapeError("expected a 3-channel image, got " + std::to_string(img.channels));
    if (img.height != h || img.width != w) throw ShapeError("images in a batch must share a size");
    const Index base = static_cast<Index>(b) * h * w;
    for (Index p = 0; p < static_cast<Index>(h) * w; ++p) {
      for (int c = 0; c < 3; ++c) out(base + p, c) = img.data[static_cast<size_t>(p) * 3 + c];
    }
  }
  return out;
}

Encoders::Encoders(nn::ParamStore& store, const EncoderConfig& config, int vocab_size,
                   std::mt19937_64& rng)
    : config_(config), vocab_size_(vocab_size) {
  config_.validate();
  if (vocab_size < 1) throw ConfigError("vocabulary must not be empty");
  const Index d = config_.dim;
  token_table = store.add("encoders.token", nn::normal(vocab_size, d, 1.0, rng));
  text_position = store.add("encoders.text_position", nn::normal(config_.text_len, d, 1.0, rng));
  segment_table = store.add("encoders.segment", nn::normal(2, d, 1.0, rng));

  int halvings = 0;
  for (int r = config_.image_size / config_.grid; r > 1; r /= 2) ++halvings;
  Index in = 3;
  for (size_t i = 0; i < config_.conv_channels.size(); ++i) {
    const Index out = config_.conv_channels[i];
    const double stddev = std::sqrt(2.0 / static_cast<double>(9 * in));
    const std::string name = "encoders.conv" + std::to_string(i);
    conv_weight.push_back(store.add(name + ".weight", nn::normal(9 * in, out, stddev, rng)));
    conv_bias.push_back(store.add(name + ".bias", Matrix::Zero(1, out)));
    conv_stride.push_back(static_cast<int>(i) < halvings ? 2 : 1);
    in = out;
  }
  visual_proj = nn::Linear(store, "encoders.visual_proj", in, d, rng);
  visual_position = store.add("encoders.visual_position", nn::normal(config_.visual_len(), d, 0.02, rng));
}

Var Encoders::embed_text(const std::vector<std::vector<int>>& ids) const {
  const Index batch = static_cast<Index>(ids.size());
  if (batch == 0) throw ShapeError("embed_text: empty batch");
  std::vector<int> flat;
  flat.reserve(static_cast<size_t>(batch) * config_.text_len);
  for (const auto& row : ids) {
    if (static_cast<int>(row.size()) != config_.text_len) {
      throw ShapeError("embed_text: expected " + std::to_string(config_.text_len) + " ids per question");
    }
    flat.insert(flat.end(), row.begin(), row.end());
  }
  const Var tokens = ag::gather_rows(token_table, flat);
  const Var seg = ag::gather_rows(segment_table, {kTextSegment});
  const Var pos = ag::add_row(text_position, seg);
  return ag::add_tiled(tokens, pos);
}

Var Encoders::grid_features(const Matrix& pixels, Index batch) const {
  if (pixels.cols() != 3) throw ShapeError("extract_visual: expected 3 channels, got " + std::to_string(pixels.cols()));
  const Index s = config_.image_size;
  if (batch < 1 || pixels.rows() != batch * s * s) {
    throw ShapeError("extract_visual: expected " + std::to_string(s) + "x" + std::to_string(s) + " images");
  }
  Var x = ag::constant(pixels);
  Index h = s;
  Index w = s;
  Index cin = 3;
  for (size_t i = 0; i < conv_weight.size(); ++i) {
    ag::Conv2dShape shape;
    shape.batch = batch;
    shape.height = h;
    shape.width = w;
    shape.in_channels = cin;
    shape.out_channels = conv_weight[i].cols();
    shape.stride = conv_stride[i];
    x = ag::relu(ag::conv2d(x, conv_weight[i], conv_bias[i], shape));
    h = shape.out_height();
    w = shape.out_width();
    cin = shape.out_channels;
  }
  if (h != config_.grid || w != config_.grid) throw ShapeError("conv stack did not reach the grid size");
  return x;
}

Var Encoders::extract_visual(const Matrix& pixels, Index batch) const {
  const Var cells = visual_proj(grid_features(pixels, batch));
  const Var seg = ag::gather_rows(segment_table, {kVisualSegment});
  return ag::add_tiled(cells, ag::add_row(visual_position, seg));
}

Var Encoders::extract_visual(const Image& image) const {
  return extract_visual(pack_images({&image}), 1);
}

}  // namespace vqla::encoders
