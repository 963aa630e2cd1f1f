#include "vqla/dataio.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "vqla/error.hpp"

namespace vqla::dataio {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

bool contains_word(const std::vector<std::string>& words, std::initializer_list<const char*> keys) {
  for (const auto& w : words) {
    for (const char* k : keys) {
      if (w == k) return true;
    }
  }
  return false;
}

std::string format_number(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::array<std::uint8_t, 3> palette_rgb(const std::string& name) {
  static const std::map<std::string, std::array<std::uint8_t, 3>> table = {
      {"red", {230, 40, 30}},     {"green", {30, 200, 60}},   {"blue", {40, 80, 240}},
      {"yellow", {240, 220, 30}}, {"purple", {150, 50, 200}}, {"orange", {250, 140, 20}},
      {"white", {240, 240, 240}}, {"cyan", {30, 210, 220}},
  };
  auto it = table.find(name);
  if (it == table.end()) throw ConfigError("unknown palette color: " + name);
  return it->second;
}

std::string fill_template(const std::string& text, const SyntheticObject& obj) {
  std::string out = text;
  auto replace = [&](const std::string& key, const std::string& value) {
    for (auto pos = out.find(key); pos != std::string::npos; pos = out.find(key, pos + value.size())) {
      out.replace(pos, key.size(), value);
    }
  };
  replace("{color}", obj.color);
  replace("{shape}", obj.shape);
  return out;
}

double box_iou(const std::array<int, 4>& a, const std::array<int, 4>& b) {
  const int iw = std::max(0, std::min(a[2], b[2]) - std::max(a[0], b[0]));
  const int ih = std::max(0, std::min(a[3], b[3]) - std::max(a[1], b[1]));
  const double inter = static_cast<double>(iw) * ih;
  const double ua = static_cast<double>(a[2] - a[0]) * (a[3] - a[1]) +
                    static_cast<double>(b[2] - b[0]) * (b[3] - b[1]) - inter;
  return ua > 0 ? inter / ua : 0.0;
}

bool boxes_intersect(const std::array<int, 4>& a, const std::array<int, 4>& b) {
  return std::min(a[2], b[2]) > std::max(a[0], b[0]) && std::min(a[3], b[3]) > std::max(a[1], b[1]);
}

}  // namespace

BBox BBox::from_pixel_corners(double x0, double y0, double x1, double y1, int width, int height) {
  const double W = width;
  const double H = height;
  x0 = std::clamp(x0, 0.0, W);
  x1 = std::clamp(x1, 0.0, W);
  y0 = std::clamp(y0, 0.0, H);
  y1 = std::clamp(y1, 0.0, H);
  BBox b;
  b.cx = 0.5 * (x0 + x1) / W;
  b.cy = 0.5 * (y0 + y1) / H;
  b.w = (x1 - x0) / W;
  b.h = (y1 - y0) / H;
  return b;
}

std::array<double, 4> BBox::to_pixel_corners(int width, int height) const {
  return {x_min() * width, y_min() * height, x_max() * width, y_max() * height};
}

const char* question_type_name(QuestionType t) {
  switch (t) {
    case QuestionType::kAttribute: return "tissue";
    case QuestionType::kState: return "action";
    case QuestionType::kLocation: return "location";
    case QuestionType::kIdentity: return "instrument";
  }
  return "unknown";
}

QuestionType classify_question(const std::string& question) {
  const auto words = normalize_words(question);
  if (contains_word(words, {"where", "quadrant", "location", "located"})) return QuestionType::kLocation;
  if (contains_word(words, {"color", "colour", "organ", "tissue"})) return QuestionType::kAttribute;
  if (contains_word(words, {"size", "big", "small", "large", "state", "doing", "action"})) {
    return QuestionType::kState;
  }
  return QuestionType::kIdentity;
}

std::vector<std::string> normalize_words(const std::string& text) {
  std::string cleaned;
  cleaned.reserve(text.size());
  for (unsigned char c : text) {
    if (std::ispunct(c) && c != '_') {
      cleaned.push_back(' ');
    } else {
      cleaned.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  std::vector<std::string> words;
  std::stringstream ss(cleaned);
  std::string w;
  while (ss >> w) words.push_back(w);
  return words;
}

void Vocab::insert(const std::string& t) {
  if (ids_.count(t)) return;
  ids_[t] = static_cast<int>(tokens_.size());
  tokens_.push_back(t);
}

Vocab Vocab::words(const std::vector<std::string>& corpus) {
  Vocab v;
  v.specials_ = true;
  v.insert("<pad>");
  v.insert("<unk>");
  for (const auto& q : corpus) {
    for (const auto& w : normalize_words(q)) v.insert(w);
  }
  return v;
}

Vocab Vocab::labels(const std::vector<std::string>& labels) {
  Vocab v;
  for (const auto& l : labels) v.insert(trim(l));
  return v;
}

Vocab Vocab::from_tokens(std::vector<std::string> tokens, bool specials) {
  Vocab v;
  v.specials_ = specials;
  for (const auto& t : tokens) {
    if (v.ids_.count(t)) throw ConfigError("duplicate vocabulary token: " + t);
    v.insert(t);
  }
  return v;
}

int Vocab::id(const std::string& token) const {
  auto it = ids_.find(token);
  if (it != ids_.end()) return it->second;
  return specials_ ? kUnk : -1;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || static_cast<size_t>(id) >= tokens_.size()) {
    throw IndexError("vocabulary id out of range: " + std::to_string(id));
  }
  return tokens_[id];
}

std::pair<QuestionVocab, AnswerVocab> build_vocabs(const std::vector<std::string>& question_corpus,
                                                   const std::vector<std::string>& answer_corpus) {
  if (question_corpus.empty()) throw ConfigError("question corpus is empty");
  if (answer_corpus.empty()) throw ConfigError("answer corpus is empty");
  return {Vocab::words(question_corpus), Vocab::labels(answer_corpus)};
}

std::vector<int> tokenize(const std::string& question, const QuestionVocab& vocab, int max_len) {
  if (max_len < 1) throw ConfigError("max_len must be >= 1");
  std::vector<int> ids(static_cast<size_t>(max_len), Vocab::kPad);
  const auto words = normalize_words(question);
  for (size_t i = 0; i < words.size() && i < ids.size(); ++i) ids[i] = vocab.id(words[i]);
  return ids;
}

std::string detokenize(const std::vector<int>& ids, const QuestionVocab& vocab) {
  std::string out;
  for (int id : ids) {
    if (id == Vocab::kPad) continue;
    if (!out.empty()) out.push_back(' ');
    out += vocab.token(id);
  }
  return out;
}

std::filesystem::path DatasetManifest::image_path(const ManifestRecord& r) const {
  return base_dir / image_dir / (r.frame_id + image_ext);
}

std::vector<std::string> DatasetManifest::frame_ids() const {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& r : records) {
    if (seen.insert(r.frame_id).second) out.push_back(r.frame_id);
  }
  return out;
}

DatasetManifest parse_manifest(std::istream& in, const std::filesystem::path& base_dir) {
  DatasetManifest m;
  m.base_dir = base_dir;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto t = trim(line);
    if (t.empty()) continue;
    if (t[0] == '#') {
      const auto eq = t.find('=');
      if (eq == std::string::npos) continue;
      const auto key = trim(t.substr(1, eq - 1));
      const auto value = trim(t.substr(eq + 1));
      if (key == "split") {
        m.split = value;
      } else if (key == "size") {
        int w = 0, h = 0;
        char x = 0;
        std::stringstream ss(value);
        if (!(ss >> w >> x >> h) || x != 'x' || w <= 0 || h <= 0) {
          throw ParseError("bad #size header, expected <W>x<H>", lineno);
        }
        m.image_width = w;
        m.image_height = h;
      } else if (key == "images") {
        m.image_dir = value;
      } else if (key == "ext") {
        m.image_ext = value;
      }
      continue;
    }
    if (m.image_width <= 0) throw ParseError("record before #size header", lineno);

    std::vector<std::string> fields;
    std::stringstream ss(t);
    std::string f;
    while (std::getline(ss, f, '|')) fields.push_back(trim(f));
    if (fields.size() != 4 && fields.size() != 6) {
      throw ParseError("expected 4 or 6 '|'-separated fields, got " + std::to_string(fields.size()),
                       lineno);
    }
    ManifestRecord r;
    r.frame_id = fields[0];
    r.question = fields[1];
    r.answer = fields[2];
    if (r.frame_id.empty() || r.answer.empty()) throw ParseError("empty frame id or answer", lineno);
    std::stringstream bs(fields[3]);
    for (auto& v : r.pixel_box) {
      if (!(bs >> v)) throw ParseError("box needs 4 numbers", lineno);
    }
    std::string extra;
    if (bs >> extra) throw ParseError("box has trailing content", lineno);
    const auto& p = r.pixel_box;
    r.box = BBox::from_pixel_corners(p[0], p[1], p[2], p[3], m.image_width, m.image_height);
    if (!(r.box.w > 0.0) || !(r.box.h > 0.0)) throw ParseError("box has no area inside the frame", lineno);
    if (fields.size() == 6) {
      r.corruption = fields[4];
      try {
        r.severity = std::stoi(fields[5]);
      } catch (const std::exception&) {
        throw ParseError("bad severity", lineno);
      }
    }
    m.records.push_back(std::move(r));
  }
  return m;
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  return parse_manifest(in, path.parent_path());
}

std::string format_manifest(const DatasetManifest& m) {
  std::ostringstream out;
  out << "#split=" << m.split << "\n";
  out << "#size=" << m.image_width << "x" << m.image_height << "\n";
  out << "#images=" << m.image_dir << "\n";
  out << "#ext=" << m.image_ext << "\n";
  for (const auto& r : m.records) {
    out << r.frame_id << " | " << r.question << " | " << r.answer << " | "
        << format_number(r.pixel_box[0]) << " " << format_number(r.pixel_box[1]) << " "
        << format_number(r.pixel_box[2]) << " " << format_number(r.pixel_box[3]);
    if (!r.corruption.empty()) out << " | " << r.corruption << " | " << r.severity;
    out << "\n";
  }
  return out.str();
}

void save_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write manifest " + path.string());
  out << format_manifest(m);
}

void check_disjoint(const DatasetManifest& a, const DatasetManifest& b) {
  std::set<std::string> ids;
  for (const auto& r : a.records) ids.insert(r.frame_id);
  for (const auto& r : b.records) {
    if (ids.count(r.frame_id)) {
      throw IntegrityError("frame '" + r.frame_id + "' appears in both '" + a.split + "' and '" +
                           b.split + "' splits");
    }
  }
}

std::vector<QASample> materialize(const DatasetManifest& m, const AnswerVocab& answers,
                                  const std::map<std::string, Image>* cache) {
  std::map<std::string, Image> loaded;
  std::vector<QASample> out;
  out.reserve(m.records.size());
  for (const auto& r : m.records) {
    QASample s;
    s.frame_id = r.frame_id;
    s.question = r.question;
    s.answer_class = answers.id(r.answer);
    s.bbox = r.box;
    const Image* img = nullptr;
    if (cache) {
      auto it = cache->find(r.frame_id);
      if (it != cache->end()) img = &it->second;
    }
    if (!img) {
      auto it = loaded.find(r.frame_id);
      if (it == loaded.end()) it = loaded.emplace(r.frame_id, read_image(m.image_path(r))).first;
      img = &it->second;
    }
    s.image = *img;
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<QuestionTemplate> default_templates() {
  using T = QuestionType;
  return {
      {T::kIdentity, "what is the {color} object"},
      {T::kIdentity, "which shape is {color}"},
      {T::kIdentity, "name the {color} item"},
      {T::kAttribute, "what color is the {shape}"},
      {T::kAttribute, "which colour does the {shape} have"},
      {T::kAttribute, "tell the color of the {shape}"},
      {T::kState, "what size is the {color} {shape}"},
      {T::kState, "is the {shape} small or large"},
      {T::kState, "how big is the {color} object"},
      {T::kLocation, "where is the {shape}"},
      {T::kLocation, "where is the {color} {shape} located"},
      {T::kLocation, "in which quadrant is the {color} object"},
  };
}

SyntheticConfig SyntheticConfig::from_json(const nlohmann::json& flat) {
  SyntheticConfig c;
  auto get_int = [&](const char* key, int& dst) {
    if (flat.contains(key)) dst = flat.at(key).get<int>();
  };
  auto get_seed = [&](const char* key, std::uint64_t& dst) {
    if (flat.contains(key)) dst = flat.at(key).get<std::uint64_t>();
  };
  auto get_list = [&](const char* key, std::vector<std::string>& dst) {
    if (!flat.contains(key)) return;
    const auto& v = flat.at(key);
    dst.clear();
    if (v.is_array()) {
      for (const auto& e : v) dst.push_back(e.get<std::string>());
    } else {
      std::stringstream ss(v.get<std::string>());
      std::string item;
      while (std::getline(ss, item, ',')) dst.push_back(trim(item));
    }
  };
  get_int("image_size", c.image_size);
  get_int("train_samples", c.train_samples);
  get_int("test_samples", c.test_samples);
  get_seed("train_seed", c.train_seed);
  get_seed("test_seed", c.test_seed);
  get_int("min_objects", c.min_objects);
  get_int("max_objects", c.max_objects);
  get_int("small_min", c.small_min);
  get_int("small_max", c.small_max);
  get_int("large_min", c.large_min);
  get_int("large_max", c.large_max);
  get_int("max_retries", c.max_retries);
  if (flat.contains("max_overlap_iou")) c.max_overlap_iou = flat.at("max_overlap_iou").get<double>();
  get_list("colors", c.colors);
  get_list("shapes", c.shapes);
  if (flat.contains("templates")) {
    c.templates.clear();
    for (const auto& t : flat.at("templates")) {
      const auto type = t.at("type").get<std::string>();
      QuestionTemplate qt;
      qt.text = t.at("text").get<std::string>();
      if (type == "tissue" || type == "attribute") {
        qt.type = QuestionType::kAttribute;
      } else if (type == "action" || type == "state") {
        qt.type = QuestionType::kState;
      } else if (type == "location") {
        qt.type = QuestionType::kLocation;
      } else if (type == "instrument" || type == "identity") {
        qt.type = QuestionType::kIdentity;
      } else {
        throw ConfigError("unknown template type: " + type);
      }
      c.templates.push_back(qt);
    }
  }
  return c;
}

bool object_covers(const SyntheticObject& obj, int x, int y) {
  const double s = obj.side;
  const double u = x - obj.x0 + 0.5;
  const double v = y - obj.y0 + 0.5;
  if (u < 0 || v < 0 || u > s || v > s) return false;
  if (obj.shape == "square") return true;
  if (obj.shape == "circle") {
    const double du = u - 0.5 * s;
    const double dv = v - 0.5 * s;
    return du * du + dv * dv <= 0.25 * s * s;
  }
  if (obj.shape == "triangle") return std::abs(u - 0.5 * s) <= 0.5 * v;
  if (obj.shape == "diamond") return std::abs(u - 0.5 * s) + std::abs(v - 0.5 * s) <= 0.5 * s;
  throw ConfigError("unknown shape: " + obj.shape);
}

std::array<int, 4> tight_box(const SyntheticObject& obj, int image_size) {
  std::array<int, 4> box = {image_size, image_size, -1, -1};
  for (int y = std::max(0, obj.y0); y < std::min(image_size, obj.y0 + obj.side); ++y) {
    for (int x = std::max(0, obj.x0); x < std::min(image_size, obj.x0 + obj.side); ++x) {
      if (!object_covers(obj, x, y)) continue;
      box[0] = std::min(box[0], x);
      box[1] = std::min(box[1], y);
      box[2] = std::max(box[2], x + 1);
      box[3] = std::max(box[3], y + 1);
    }
  }
  if (box[2] < 0) throw GenerationError("object rasterizes to an empty mask");
  return box;
}

std::string quadrant_label(const std::array<int, 4>& b, int image_size) {
  const double cx = 0.5 * (b[0] + b[2]);
  const double cy = 0.5 * (b[1] + b[3]);
  const double mid = 0.5 * image_size;
  return std::string(cy < mid ? "top" : "bottom") + "_" + (cx < mid ? "left" : "right");
}

namespace {

SyntheticScene render_scene(const SyntheticConfig& c, std::mt19937_64& rng) {
  const int S = c.image_size;
  const int max_obj = std::min({c.max_objects, static_cast<int>(c.colors.size()),
                                static_cast<int>(c.shapes.size())});
  std::uniform_int_distribution<int> count_dist(c.min_objects, max_obj);
  const int n = count_dist(rng);

  auto colors = c.colors;
  auto shapes = c.shapes;
  std::shuffle(colors.begin(), colors.end(), rng);
  std::shuffle(shapes.begin(), shapes.end(), rng);

  SyntheticScene scene;
  for (int i = 0; i < n; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < c.max_retries && !placed; ++attempt) {
      SyntheticObject obj;
      obj.shape = shapes[i];
      obj.color = colors[i];
      const bool large = std::bernoulli_distribution(0.5)(rng);
      obj.size_label = large ? "large" : "small";
      obj.side = large ? std::uniform_int_distribution<int>(c.large_min, c.large_max)(rng)
                       : std::uniform_int_distribution<int>(c.small_min, c.small_max)(rng);
      if (obj.side >= S) continue;
      obj.x0 = std::uniform_int_distribution<int>(0, S - obj.side)(rng);
      obj.y0 = std::uniform_int_distribution<int>(0, S - obj.side)(rng);
      obj.pixel_box = tight_box(obj, S);
      const auto& b = obj.pixel_box;
      // Keep quadrant answers unambiguous.
      if (std::abs(0.5 * (b[0] + b[2]) - 0.5 * S) < 1.0 ||
          std::abs(0.5 * (b[1] + b[3]) - 0.5 * S) < 1.0) {
        continue;
      }
      bool clash = false;
      for (const auto& other : scene.objects) {
        const bool hit = c.max_overlap_iou <= 0.0 ? boxes_intersect(b, other.pixel_box)
                                                  : box_iou(b, other.pixel_box) > c.max_overlap_iou;
        clash = clash || hit;
      }
      if (clash) continue;
      scene.objects.push_back(obj);
      placed = true;
    }
    if (!placed) {
      throw GenerationError("could not place object " + std::to_string(i) + " after " +
                            std::to_string(c.max_retries) + " attempts");
    }
  }

  scene.image = Image(S, S, 3);
  for (int y = 0; y < S; ++y) {
    const double shade = 0.08 + 0.12 * y / S;
    for (int x = 0; x < S; ++x) {
      for (int ch = 0; ch < 3; ++ch) scene.image.at(y, x, ch) = shade;
      for (const auto& obj : scene.objects) {
        if (!object_covers(obj, x, y)) continue;
        const auto rgb = palette_rgb(obj.color);
        for (int ch = 0; ch < 3; ++ch) scene.image.at(y, x, ch) = rgb[ch] / 255.0;
      }
    }
  }
  scene.image = quantize8(scene.image);
  return scene;
}

void generate_split(const SyntheticConfig& c, const std::string& split, int count,
                    std::uint64_t seed, DatasetManifest& m, SyntheticDataset& out) {
  std::mt19937_64 rng(seed);
  m.split = split;
  m.image_width = c.image_size;
  m.image_height = c.image_size;
  std::map<QuestionType, std::vector<const QuestionTemplate*>> by_type;
  for (const auto& t : c.templates) by_type[t.type].push_back(&t);
  std::vector<QuestionType> types;
  for (const auto& [t, _] : by_type) types.push_back(t);

  for (int i = 0; i < count; ++i) {
    SyntheticScene scene = render_scene(c, rng);
    const auto type = types[std::uniform_int_distribution<size_t>(0, types.size() - 1)(rng)];
    const auto& candidates = by_type[type];
    const auto* tmpl = candidates[std::uniform_int_distribution<size_t>(0, candidates.size() - 1)(rng)];
    const auto& obj =
        scene.objects[std::uniform_int_distribution<size_t>(0, scene.objects.size() - 1)(rng)];

    char id[32];
    std::snprintf(id, sizeof(id), "%s_%05d", split.c_str(), i);
    ManifestRecord r;
    r.frame_id = id;
    r.question = fill_template(tmpl->text, obj);
    switch (type) {
      case QuestionType::kIdentity: r.answer = obj.shape; break;
      case QuestionType::kAttribute: r.answer = obj.color; break;
      case QuestionType::kState: r.answer = obj.size_label; break;
      case QuestionType::kLocation: r.answer = quadrant_label(obj.pixel_box, c.image_size); break;
    }
    for (int k = 0; k < 4; ++k) r.pixel_box[k] = obj.pixel_box[k];
    r.box = BBox::from_pixel_corners(r.pixel_box[0], r.pixel_box[1], r.pixel_box[2], r.pixel_box[3],
                                     c.image_size, c.image_size);
    m.records.push_back(r);
    out.images[r.frame_id] = scene.image;
    out.scenes[r.frame_id] = std::move(scene);
  }
}

}  // namespace

SyntheticDataset generate_synthetic(const SyntheticConfig& c) {
  if (c.train_seed == c.test_seed) throw ConfigError("train and test seeds must differ");
  if (c.image_size < 8) throw ConfigError("image_size too small");
  if (c.min_objects < 1 || c.max_objects < c.min_objects) throw ConfigError("object count range");
  if (c.colors.empty() || c.shapes.empty() || c.templates.empty()) {
    throw ConfigError("palettes and templates must be non-empty");
  }
  for (const auto& col : c.colors) palette_rgb(col);
  SyntheticDataset out;
  generate_split(c, "train", c.train_samples, c.train_seed, out.train, out);
  generate_split(c, "test", c.test_samples, c.test_seed, out.test, out);
  check_disjoint(out.train, out.test);
  return out;
}

void write_synthetic(const SyntheticDataset& data, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir / "images");
  save_manifest(out_dir / "train.txt", data.train);
  save_manifest(out_dir / "test.txt", data.test);
  for (const auto& [id, img] : data.images) write_image(out_dir / "images" / (id + ".ppm"), img);
}

}  // namespace vqla::dataio
