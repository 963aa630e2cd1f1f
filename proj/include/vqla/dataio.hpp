#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "vqla/image.hpp"

namespace vqla::dataio {

// Normalized (cx, cy, w, h) box in image-relative coordinates.
struct BBox {
  double cx = 0.5;
  double cy = 0.5;
  double w = 1.0;
  double h = 1.0;

  double x_min() const { return cx - 0.5 * w; }
  double y_min() const { return cy - 0.5 * h; }
  double x_max() const { return cx + 0.5 * w; }
  double y_max() const { return cy + 0.5 * h; }

  // Pixel corners are clipped to the frame before normalization.
  static BBox from_pixel_corners(double x0, double y0, double x1, double y1, int width, int height);
  std::array<double, 4> to_pixel_corners(int width, int height) const;
  bool operator==(const BBox&) const = default;
};

// Question categories used for per-type reporting. The synthetic data mirrors
// the four surgical categories: tissue (attribute), action (state), location
// and instrument (identity).
enum class QuestionType { kAttribute, kState, kLocation, kIdentity };
inline constexpr int kQuestionTypeCount = 4;
const char* question_type_name(QuestionType t);
QuestionType classify_question(const std::string& question);

// Word vocabulary. Question vocabularies reserve pad=0 and unk=1; answer
// vocabularies are dense class ids with no specials.
class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;

  static Vocab words(const std::vector<std::string>& corpus);
  static Vocab labels(const std::vector<std::string>& labels);
  static Vocab from_tokens(std::vector<std::string> tokens, bool specials);

  // Unknown tokens map to kUnk for word vocabularies and -1 for label vocabularies.
  int id(const std::string& token) const;
  const std::string& token(int id) const;
  size_t size() const { return tokens_.size(); }
  bool has_specials() const { return specials_; }
  const std::vector<std::string>& tokens() const { return tokens_; }
  bool operator==(const Vocab& o) const { return specials_ == o.specials_ && tokens_ == o.tokens_; }

 private:
  void insert(const std::string& t);

  bool specials_ = false;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

using QuestionVocab = Vocab;
using AnswerVocab = Vocab;

// Lowercases, strips punctuation (underscores are kept) and splits on whitespace.
std::vector<std::string> normalize_words(const std::string& text);
std::pair<QuestionVocab, AnswerVocab> build_vocabs(const std::vector<std::string>& question_corpus,
                                                   const std::vector<std::string>& answer_corpus);
std::vector<int> tokenize(const std::string& question, const QuestionVocab& vocab, int max_len);
std::string detokenize(const std::vector<int>& ids, const QuestionVocab& vocab);

struct ManifestRecord {
  std::string frame_id;
  std::string question;
  std::string answer;
  std::array<double, 4> pixel_box{};  // x_min y_min x_max y_max
  BBox box;
  std::string corruption;  // empty unless the record comes from a corrupted tree
  int severity = 0;
};

// Text format, one record per line:
//   frame_id | question | answer | x_min y_min x_max y_max [| kind | severity]
// Header lines start with '#': #split=<name>, #size=<W>x<H>, #images=<dir>,
// #ext=<.ppm|.png>. Other '#' lines are comments.
struct DatasetManifest {
  std::string split;
  int image_width = 0;
  int image_height = 0;
  std::string image_dir = "images";
  std::string image_ext = ".ppm";
  std::filesystem::path base_dir;  // directory of the manifest file
  std::vector<ManifestRecord> records;

  std::filesystem::path image_path(const ManifestRecord& r) const;
  std::vector<std::string> frame_ids() const;  // unique, first-occurrence order
};

DatasetManifest parse_manifest(std::istream& in, const std::filesystem::path& base_dir = {});
DatasetManifest load_manifest(const std::filesystem::path& path);
std::string format_manifest(const DatasetManifest& m);
void save_manifest(const std::filesystem::path& path, const DatasetManifest& m);

// Throws IntegrityError when any frame id occurs in both manifests.
void check_disjoint(const DatasetManifest& a, const DatasetManifest& b);

struct QASample {
  std::string frame_id;
  Image image;
  std::string question;
  int answer_class = -1;  // -1: answer absent from the vocabulary
  BBox bbox;
};

// Resolves images from `cache` first, then from disk.
std::vector<QASample> materialize(const DatasetManifest& m, const AnswerVocab& answers,
                                  const std::map<std::string, Image>* cache = nullptr);

struct QuestionTemplate {
  QuestionType type = QuestionType::kIdentity;
  std::string text;  // may reference {color} and {shape}
};

std::vector<QuestionTemplate> default_templates();

struct SyntheticConfig {
  int image_size = 40;
  std::vector<std::string> colors = {"red", "green", "blue", "yellow"};
  std::vector<std::string> shapes = {"circle", "square", "triangle"};
  std::vector<QuestionTemplate> templates = default_templates();
  int train_samples = 64;
  int test_samples = 64;
  std::uint64_t train_seed = 1;
  std::uint64_t test_seed = 2;
  int min_objects = 1;
  int max_objects = 3;
  int small_min = 8;
  int small_max = 11;
  int large_min = 14;
  int large_max = 18;
  double max_overlap_iou = 0.0;  // 0: boxes may not intersect at all
  int max_retries = 500;

  static SyntheticConfig from_json(const nlohmann::json& flat);
};

struct SyntheticObject {
  std::string shape;
  std::string color;
  std::string size_label;  // "small" | "large"
  int x0 = 0;              // placement square, pixels
  int y0 = 0;
  int side = 0;
  std::array<int, 4> pixel_box{};  // tight box: x_min y_min x_max y_max (exclusive max)
};

struct SyntheticScene {
  Image image;
  std::vector<SyntheticObject> objects;
};

struct SyntheticDataset {
  DatasetManifest train;
  DatasetManifest test;
  std::map<std::string, Image> images;
  std::map<std::string, SyntheticScene> scenes;
};

// Pixel membership of an object at its placement; the same predicate the
// renderer paints with.
bool object_covers(const SyntheticObject& obj, int x, int y);
std::array<int, 4> tight_box(const SyntheticObject& obj, int image_size);
std::string quadrant_label(const std::array<int, 4>& pixel_box, int image_size);

SyntheticDataset generate_synthetic(const SyntheticConfig& config);
void write_synthetic(const SyntheticDataset& data, const std::filesystem::path& out_dir);

}  // namespace vqla::dataio
