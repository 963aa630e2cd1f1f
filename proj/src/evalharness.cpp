#include "vqla/evalharness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>

#include "vqla/config_io.hpp"
#include "vqla/corruptions.hpp"
#include "vqla/error.hpp"

namespace vqla::eval {

namespace {

using dataio::BBox;
using dataio::QuestionType;

constexpr std::array<QuestionType, 4> kTypeOrder = {QuestionType::kAttribute, QuestionType::kState,
                                                    QuestionType::kLocation, QuestionType::kIdentity};

losses::Box to_box(const BBox& b) { return {b.cx, b.cy, b.w, b.h}; }

int argmax(const std::vector<double>& v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

// Left-aligned first column, right-aligned numeric columns.
std::string render_table(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
  std::vector<size_t> width(header.size(), 0);
  auto grow = [&](const std::vector<std::string>& r) {
    for (size_t i = 0; i < r.size() && i < width.size(); ++i) width[i] = std::max(width[i], r[i].size());
  };
  grow(header);
  for (const auto& r : rows) grow(r);
  std::ostringstream os;
  auto line = [&](const std::vector<std::string>& r) {
    for (size_t i = 0; i < r.size(); ++i) {
      if (i) os << "  ";
      os << (i == 0 ? std::left : std::right) << std::setw(static_cast<int>(width[i])) << r[i];
    }
    os << "\n";
  };
  line(header);
  size_t total = 0;
  for (size_t w : width) total += w + 2;
  os << std::string(total > 2 ? total - 2 : 0, '-') << "\n";
  for (const auto& r : rows) line(r);
  return os.str();
}

bool parse_bool_value(const nlohmann::json& v) {
  if (v.is_boolean()) return v.get<bool>();
  if (v.is_number_integer()) return v.get<int>() != 0;
  if (v.is_string()) return losses::parse_switch(v.get<std::string>());
  throw ConfigError("expected a boolean or on/off");
}

nlohmann::json templates_to_json(const std::vector<dataio::QuestionTemplate>& ts) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& t : ts) arr.push_back({{"type", dataio::question_type_name(t.type)}, {"text", t.text}});
  return arr;
}

}  // namespace

// ---- metrics ---------------------------------------------------------------

double accuracy(const std::vector<int>& predicted, const std::vector<int>& reference) {
  if (predicted.size() != reference.size()) throw EvaluationError("accuracy: length mismatch");
  if (predicted.empty()) throw EvaluationError("accuracy: empty input");
  long hit = 0;
  for (size_t i = 0; i < predicted.size(); ++i) hit += predicted[i] == reference[i];
  return static_cast<double>(hit) / static_cast<double>(predicted.size());
}

double macro_f1(const std::vector<int>& predicted, const std::vector<int>& reference) {
  if (predicted.size() != reference.size()) throw EvaluationError("macro_f1: length mismatch");
  if (predicted.empty()) throw EvaluationError("macro_f1: empty input");
  std::set<int> classes(reference.begin(), reference.end());
  double sum = 0.0;
  for (int c : classes) {
    long tp = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < predicted.size(); ++i) {
      const bool p = predicted[i] == c;
      const bool r = reference[i] == c;
      tp += p && r;
      fp += p && !r;
      fn += !p && r;
    }
    sum += 2.0 * tp / static_cast<double>(2 * tp + fp + fn);
  }
  return sum / static_cast<double>(classes.size());
}

double miou(const std::vector<BBox>& predicted, const std::vector<BBox>& reference) {
  if (predicted.size() != reference.size()) throw EvaluationError("miou: length mismatch");
  if (predicted.empty()) throw EvaluationError("miou: empty input");
  double s = 0.0;
  for (size_t i = 0; i < predicted.size(); ++i) s += losses::iou(to_box(predicted[i]), to_box(reference[i]));
  return s / static_cast<double>(predicted.size());
}

MetricsReport compute_report(const std::vector<int>& predicted, const std::vector<int>& reference,
                             const std::vector<BBox>& predicted_boxes, const std::vector<BBox>& reference_boxes,
                             const std::vector<QuestionType>& types) {
  if (types.size() != predicted.size()) throw EvaluationError("compute_report: type list length mismatch");
  MetricsReport r;
  r.count = static_cast<long>(predicted.size());
  r.accuracy = accuracy(predicted, reference);
  r.f_score = macro_f1(predicted, reference);
  r.miou = miou(predicted_boxes, reference_boxes);
  for (QuestionType t : kTypeOrder) {
    TypeMetrics tm;
    tm.type = dataio::question_type_name(t);
    std::vector<int> p, ref;
    std::vector<BBox> pb, rb;
    for (size_t i = 0; i < types.size(); ++i) {
      if (types[i] != t) continue;
      p.push_back(predicted[i]);
      ref.push_back(reference[i]);
      pb.push_back(predicted_boxes[i]);
      rb.push_back(reference_boxes[i]);
    }
    tm.count = static_cast<long>(p.size());
    if (!p.empty()) {
      tm.accuracy = accuracy(p, ref);
      tm.f_score = macro_f1(p, ref);
      tm.miou = miou(pb, rb);
    }
    r.by_type.push_back(tm);
  }
  return r;
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json j;
  j["count"] = count;
  j["accuracy"] = accuracy;
  j["f_score"] = f_score;
  j["miou"] = miou;
  nlohmann::json types = nlohmann::json::array();
  for (const auto& t : by_type) {
    types.push_back({{"type", t.type}, {"count", t.count}, {"accuracy", t.accuracy}, {"f_score", t.f_score}, {"miou", t.miou}});
  }
  j["by_type"] = types;
  return j;
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.count = j.at("count").get<long>();
  r.accuracy = j.at("accuracy").get<double>();
  r.f_score = j.at("f_score").get<double>();
  r.miou = j.at("miou").get<double>();
  for (const auto& t : j.at("by_type")) {
    r.by_type.push_back({t.at("type").get<std::string>(), t.at("count").get<long>(), t.at("accuracy").get<double>(),
                         t.at("f_score").get<double>(), t.at("miou").get<double>()});
  }
  return r;
}

std::string MetricsReport::to_text() const {
  std::vector<std::vector<std::string>> rows;
  rows.push_back({"all", std::to_string(count), fixed(accuracy), fixed(f_score), fixed(miou)});
  for (const auto& t : by_type) {
    rows.push_back({t.type, std::to_string(t.count), fixed(t.accuracy), fixed(t.f_score), fixed(t.miou)});
  }
  return render_table({"type", "n", "Acc", "F-Score", "mIoU"}, rows);
}

// ---- configuration ---------------------------------------------------------

nlohmann::json TrainConfig::to_json() const {
  nlohmann::json j = model::model_config_to_json(model);
  j["seed"] = seed;
  j["box"] = losses::box_loss_name(loss.box);
  j["qa"] = losses::qa_loss_name(loss.qa);
  j["uncertainty"] = loss.uncertainty;
  j["focal_gamma"] = loss.focal_gamma;
  j["focal_alpha"] = loss.focal_alpha;
  j["adversarial"] = adversarial.enabled;
  j["epsilon"] = adversarial.perturb.epsilon;
  j["alpha"] = adversarial.perturb.alpha;
  j["beta"] = adversarial.perturb.beta;
  j["sign_mode"] = adversarial::sign_mode_name(adversarial.perturb.sign_mode);
  j["temperature"] = adversarial.contrastive.temperature;
  j["colors"] = synthetic.colors;
  j["shapes"] = synthetic.shapes;
  j["templates"] = templates_to_json(synthetic.templates);
  j["train_samples"] = synthetic.train_samples;
  j["test_samples"] = synthetic.test_samples;
  j["train_seed"] = synthetic.train_seed;
  j["test_seed"] = synthetic.test_seed;
  j["min_objects"] = synthetic.min_objects;
  j["max_objects"] = synthetic.max_objects;
  j["small_min"] = synthetic.small_min;
  j["small_max"] = synthetic.small_max;
  j["large_min"] = synthetic.large_min;
  j["large_max"] = synthetic.large_max;
  j["max_overlap_iou"] = synthetic.max_overlap_iou;
  j["max_retries"] = synthetic.max_retries;
  j["epochs"] = epochs;
  j["batch_size"] = batch_size;
  j["learning_rate"] = learning_rate;
  j["grad_clip"] = grad_clip;
  j["max_steps"] = max_steps;
  j["eval_every"] = eval_every;
  j["ablation_epochs"] = ablation_epochs;
  j["train_manifest"] = train_manifest;
  j["test_manifest"] = test_manifest;
  return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& flat) { return from_json(flat, TrainConfig{}); }

TrainConfig TrainConfig::from_json(const nlohmann::json& flat, const TrainConfig& base) {
  if (!flat.is_object()) throw ConfigError("configuration must be an object");
  nlohmann::json merged = base.to_json();
  for (auto it = flat.begin(); it != flat.end(); ++it) {
    if (!merged.contains(it.key())) throw ConfigError("unknown config key: " + it.key());
    merged[it.key()] = it.value();
  }
  TrainConfig c;
  try {
    c.model = model::model_config_from_json(merged, model::ModelConfig{});
    c.synthetic = dataio::SyntheticConfig::from_json(merged);
    auto set = [&](const char* key, auto& dst) { dst = merged.at(key).get<std::decay_t<decltype(dst)>>(); };
    set("seed", c.seed);
    c.model.seed = c.seed;
    c.loss.box = losses::parse_box_loss(merged.at("box").get<std::string>());
    c.loss.qa = losses::parse_qa_loss(merged.at("qa").get<std::string>());
    c.loss.uncertainty = parse_bool_value(merged.at("uncertainty"));
    set("focal_gamma", c.loss.focal_gamma);
    set("focal_alpha", c.loss.focal_alpha);
    c.adversarial.enabled = parse_bool_value(merged.at("adversarial"));
    set("epsilon", c.adversarial.perturb.epsilon);
    set("alpha", c.adversarial.perturb.alpha);
    set("beta", c.adversarial.perturb.beta);
    c.adversarial.perturb.sign_mode = adversarial::parse_sign_mode(merged.at("sign_mode").get<std::string>());
    set("temperature", c.adversarial.contrastive.temperature);
    set("epochs", c.epochs);
    set("batch_size", c.batch_size);
    set("learning_rate", c.learning_rate);
    set("grad_clip", c.grad_clip);
    set("max_steps", c.max_steps);
    set("eval_every", c.eval_every);
    set("ablation_epochs", c.ablation_epochs);
    set("train_manifest", c.train_manifest);
    set("test_manifest", c.test_manifest);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  c.validate();
  return c;
}

void TrainConfig::validate() const {
  model.validate();
  if (epochs < 1 || batch_size < 2) throw ConfigError("epochs must be >= 1 and batch_size >= 2");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
  if (grad_clip < 0.0 || max_steps < 0 || eval_every < 1 || ablation_epochs < 1) {
    throw ConfigError("grad_clip, max_steps, eval_every and ablation_epochs must be non-negative / positive");
  }
  if (adversarial.enabled && adversarial.perturb.epsilon < 0.0) throw ConfigError("epsilon must be >= 0");
  if (adversarial.perturb.alpha < 0.0 || adversarial.perturb.beta < 0.0) throw ConfigError("alpha and beta must be >= 0");
  if (!(adversarial.contrastive.temperature > 0.0)) throw ConfigError("temperature must be > 0");
  if (synthetic.image_size != model.encoder.image_size) throw ConfigError("synthetic image_size differs from the model's");
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  return TrainConfig::from_json(read_config_file(path));
}

std::set<std::string> config_diff(const TrainConfig& a, const TrainConfig& b) {
  const auto ja = a.to_json();
  const auto jb = b.to_json();
  std::set<std::string> out;
  for (auto it = ja.begin(); it != ja.end(); ++it) {
    if (!jb.contains(it.key()) || jb.at(it.key()) != it.value()) out.insert(it.key());
  }
  return out;
}

// ---- data --------------------------------------------------------------------

Dataset load_dataset(const TrainConfig& config) {
  Dataset d;
  if (!config.train_manifest.empty()) {
    d.train_manifest = dataio::load_manifest(config.train_manifest);
    if (!config.test_manifest.empty()) {
      d.test_manifest = dataio::load_manifest(config.test_manifest);
      dataio::check_disjoint(d.train_manifest, d.test_manifest);
    }
  } else {
    auto synth = dataio::generate_synthetic(config.synthetic);
    d.train_manifest = std::move(synth.train);
    d.test_manifest = std::move(synth.test);
    d.images = std::move(synth.images);
  }
  std::vector<std::string> questions, answers;
  for (const auto& r : d.train_manifest.records) {
    questions.push_back(r.question);
    answers.push_back(r.answer);
  }
  std::tie(d.question_vocab, d.answer_vocab) = dataio::build_vocabs(questions, answers);
  d.train = dataio::materialize(d.train_manifest, d.answer_vocab, &d.images);
  if (!d.test_manifest.records.empty()) d.test = dataio::materialize(d.test_manifest, d.answer_vocab, &d.images);
  return d;
}

// ---- training and evaluation ---------------------------------------------------

namespace {

void dump_nan(const TrainOptions& options, long step, const model::Batch& batch, const losses::LossBundle& b) {
  nlohmann::json j;
  j["step"] = step;
  j["losses"] = {{"qa", b.qa_loss}, {"box", b.box_loss}, {"clean", b.clean_loss}, {"perturbed", b.perturbed_loss},
                 {"contrastive", b.contrastive_loss}, {"total", b.total}, {"sigma1", b.sigma1}, {"sigma2", b.sigma2}};
  j["frame_ids"] = batch.frame_ids;
  j["labels"] = batch.labels;
  std::vector<std::vector<double>> boxes;
  for (ag::Index i = 0; i < batch.boxes.rows(); ++i) {
    boxes.push_back({batch.boxes(i, 0), batch.boxes(i, 1), batch.boxes(i, 2), batch.boxes(i, 3)});
  }
  j["boxes"] = boxes;
  j["token_ids"] = batch.token_ids;
  if (!options.dump_dir.empty()) {
    std::filesystem::create_directories(options.dump_dir);
    std::ofstream(options.dump_dir / "nan_dump.json") << j.dump(2) << "\n";
  } else {
    std::cerr << j.dump(2) << "\n";
  }
}

bool finite_bundle(const losses::LossBundle& b) {
  return std::isfinite(b.total) && std::isfinite(b.clean_loss) && std::isfinite(b.perturbed_loss) &&
         std::isfinite(b.contrastive_loss);
}

}  // namespace

TrainResult train(const TrainConfig& config, const std::vector<dataio::QASample>& train_set,
                  const dataio::QuestionVocab& questions, const dataio::AnswerVocab& answers,
                  const TrainOptions& options) {
  config.validate();
  if (train_set.size() < 2) throw ConfigError("training needs at least 2 samples");
  for (const auto& s : train_set) {
    if (s.answer_class < 0) throw IntegrityError("training sample " + s.frame_id + " has no answer class");
  }
  TrainResult result;
  result.model = std::make_unique<model::Model>(config.model, questions, answers);
  auto& m = *result.model;
  nn::Adam adam({config.learning_rate, 0.9, 0.999, 1e-8, config.grad_clip});
  std::mt19937_64 shuffle_rng(config.seed ^ 0x5eedf00dULL);
  std::mt19937_64 dropout_rng(config.seed ^ 0xd40b0a7ULL);

  std::vector<ag::Matrix> best_params;
  double best_acc = -1.0;
  std::vector<size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  const size_t bs = static_cast<size_t>(config.batch_size);
  bool done = false;
  for (int epoch = 0; epoch < config.epochs && !done; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (size_t start = 0; start < order.size(); start += bs) {
      const size_t end = std::min(order.size(), start + bs);
      if (end - start < 2) break;  // contrastive pairs need two samples
      const std::vector<size_t> idx(order.begin() + static_cast<long>(start), order.begin() + static_cast<long>(end));
      const auto batch = model::make_batch(train_set, idx, questions, config.model.encoder.text_len);
      const auto bundle = adversarial::adversarial_contrastive_step(m, batch, config.loss, config.adversarial, &dropout_rng);
      if (!finite_bundle(bundle)) {
        dump_nan(options, result.steps, batch, bundle);
        throw NumericalError("non-finite loss at step " + std::to_string(result.steps));
      }
      adam.step(m.params);
      result.curve.push_back(bundle);
      ++result.steps;
      if (options.on_step) options.on_step(result.steps, bundle);
      if (config.max_steps > 0 && result.steps >= config.max_steps) {
        done = true;
        break;
      }
    }
    const bool last = done || epoch + 1 == config.epochs;
    if (options.validation && !options.validation->empty() && ((epoch + 1) % config.eval_every == 0 || last)) {
      const auto report = evaluate(m, *options.validation);
      if (report.accuracy > best_acc) {
        best_acc = report.accuracy;
        result.best_epoch = epoch;
        result.best_validation = report;
        best_params.clear();
        for (const auto& item : m.params.items()) best_params.push_back(item.second.value());
      }
    }
  }
  if (!best_params.empty()) {
    size_t i = 0;
    for (const auto& item : m.params.items()) {
      ag::Var p = item.second;
      p.mutable_value() = best_params[i++];
    }
  }
  if (!options.checkpoint.empty()) model::save_checkpoint(options.checkpoint, m, config.to_json());
  return result;
}

MetricsReport evaluate(const model::Model& model, const std::vector<dataio::QASample>& samples, int batch_size) {
  if (samples.empty()) throw EvaluationError("evaluate: no samples");
  std::vector<int> predicted, reference;
  std::vector<BBox> pboxes, rboxes;
  std::vector<QuestionType> types;
  const size_t bs = static_cast<size_t>(std::max(1, batch_size));
  for (size_t start = 0; start < samples.size(); start += bs) {
    std::vector<size_t> idx;
    for (size_t i = start; i < std::min(samples.size(), start + bs); ++i) idx.push_back(i);
    const auto batch = model::make_batch(samples, idx, model.question_vocab(), model.config().encoder.text_len);
    const auto preds = model.predict(batch);
    for (size_t k = 0; k < idx.size(); ++k) {
      predicted.push_back(argmax(preds[k].logits));
      reference.push_back(samples[idx[k]].answer_class);
      pboxes.push_back(preds[k].bbox);
      rboxes.push_back(samples[idx[k]].bbox);
      types.push_back(batch.types[k]);
    }
  }
  return compute_report(predicted, reference, pboxes, rboxes, types);
}

MetricsReport evaluate(const std::filesystem::path& checkpoint, const std::filesystem::path& manifest) {
  const auto model = model::load_checkpoint(checkpoint);
  const auto m = dataio::load_manifest(manifest);
  return evaluate(*model, dataio::materialize(m, model->answer_vocab()));
}

// ---- robustness ---------------------------------------------------------------

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw EvaluationError("spearman: need two equal-length series");
  auto ranks = [](const std::vector<double>& v) {
    std::vector<size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (size_t i = 0; i < idx.size();) {
      size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
      for (size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(x);
  const auto ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0 || syy == 0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

RobustnessReport robustness_sweep(const model::Model& model, const std::vector<dataio::QASample>& samples,
                                  const std::vector<std::string>& kinds, const std::vector<int>& severities,
                                  std::uint64_t seed) {
  if (samples.empty()) throw EvaluationError("robustness_sweep: no samples");
  if (kinds.empty() || severities.empty()) throw ConfigError("robustness_sweep: empty grid");
  RobustnessReport report;
  report.severities = severities;
  report.clean = evaluate(model, samples);
  for (const auto& kind : kinds) {
    KindRow row;
    row.kind = kind;
    row.category = corruptions::category_name(corruptions::category_of(kind));
    for (int sev : severities) {
      auto corrupted = samples;
      for (auto& s : corrupted) s.image = corruptions::corrupt(s.image, {kind, sev, seed}, s.frame_id);
      const auto r = evaluate(model, corrupted);
      row.accuracy.push_back(r.accuracy);
      row.miou.push_back(r.miou);
    }
    row.mean_accuracy = std::accumulate(row.accuracy.begin(), row.accuracy.end(), 0.0) / severities.size();
    row.mean_miou = std::accumulate(row.miou.begin(), row.miou.end(), 0.0) / severities.size();
    report.per_kind.push_back(row);
  }
  std::vector<double> sev_values, acc_values;
  for (size_t i = 0; i < severities.size(); ++i) {
    SeverityRow s;
    s.severity = severities[i];
    for (const auto& row : report.per_kind) {
      s.accuracy += row.accuracy[i];
      s.miou += row.miou[i];
    }
    s.accuracy /= static_cast<double>(report.per_kind.size());
    s.miou /= static_cast<double>(report.per_kind.size());
    report.per_severity.push_back(s);
    sev_values.push_back(s.severity);
    acc_values.push_back(s.accuracy);
  }
  report.spearman_accuracy = severities.size() >= 2 ? spearman(sev_values, acc_values) : 0.0;
  return report;
}

nlohmann::json RobustnessReport::to_json() const {
  nlohmann::json j;
  j["severities"] = severities;
  j["clean"] = clean.to_json();
  j["spearman_accuracy"] = spearman_accuracy;
  nlohmann::json kinds = nlohmann::json::array();
  for (const auto& r : per_kind) {
    kinds.push_back({{"kind", r.kind}, {"category", r.category}, {"accuracy", r.accuracy}, {"miou", r.miou},
                     {"mean_accuracy", r.mean_accuracy}, {"mean_miou", r.mean_miou}});
  }
  j["per_kind"] = kinds;
  nlohmann::json sev = nlohmann::json::array();
  for (const auto& s : per_severity) sev.push_back({{"severity", s.severity}, {"accuracy", s.accuracy}, {"miou", s.miou}});
  j["per_severity"] = sev;
  return j;
}

std::string RobustnessReport::to_text() const {
  std::vector<std::vector<std::string>> rows;
  for (const auto& r : per_kind) rows.push_back({r.category + "/" + r.kind, fixed(r.mean_accuracy), fixed(r.mean_miou)});
  std::string out = "per corruption type\n" + render_table({"kind", "Acc", "mIoU"}, rows);
  rows.clear();
  rows.push_back({"clean", fixed(clean.accuracy), fixed(clean.miou)});
  for (const auto& s : per_severity) rows.push_back({std::to_string(s.severity), fixed(s.accuracy), fixed(s.miou)});
  out += "\nper severity\n" + render_table({"severity", "Acc", "mIoU"}, rows);
  out += "\nspearman(severity, Acc) = " + fixed(spearman_accuracy) + "\n";
  return out;
}

// ---- ablations ------------------------------------------------------------------

const std::vector<std::string>& ablation_names() {
  static const std::vector<std::string> names = {"loss_grid",   "iou_grid",        "attn_modes",
                                                 "coattn_depth", "alpha_beta_grid", "module_knockout"};
  return names;
}

AblationTable ablation_grid(const std::string& name, const TrainConfig& base) {
  AblationTable t;
  t.name = name;
  auto add = [&](const std::string& label, const TrainConfig& c) {
    AblationRow row;
    row.label = label;
    row.config = c;
    row.changed = config_diff(c, base);
    t.rows.push_back(std::move(row));
  };
  if (name == "loss_grid") {
    t.knob = {"box", "qa", "uncertainty"};
    for (bool unc : {false, true}) {
      for (auto qa : {losses::QALoss::kCE, losses::QALoss::kFocal}) {
        for (auto box : {losses::BoxLoss::kGIoU, losses::BoxLoss::kL1GIoU}) {
          TrainConfig c = base;
          c.loss.box = box;
          c.loss.qa = qa;
          c.loss.uncertainty = unc;
          add(std::string(losses::box_loss_name(box)) + " | " + losses::qa_loss_name(qa) + " | uncertainty " +
                  (unc ? "on" : "off"),
              c);
        }
      }
    }
  } else if (name == "iou_grid") {
    t.knob = {"box"};
    for (auto box : {losses::BoxLoss::kIoU, losses::BoxLoss::kCIoU, losses::BoxLoss::kDIoU, losses::BoxLoss::kGIoU}) {
      TrainConfig c = base;
      c.loss.box = box;
      add(losses::box_loss_name(box), c);
    }
  } else if (name == "attn_modes") {
    t.knob = {"attn_mode"};
    for (auto mode : {fusion::AttnMode::kSelf, fusion::AttnMode::kGuided, fusion::AttnMode::kCoT2V,
                      fusion::AttnMode::kCoV2T, fusion::AttnMode::kCoBi}) {
      TrainConfig c = base;
      c.model.fusion.attn_mode = mode;
      add(fusion::attn_mode_name(mode), c);
    }
  } else if (name == "coattn_depth") {
    t.knob = {"n_coattn_layers"};
    for (int depth : {2, 4, 6, 8, 10}) {
      TrainConfig c = base;
      c.model.fusion.n_coattn_layers = depth;
      add(std::to_string(depth) + " layers", c);
    }
  } else if (name == "alpha_beta_grid") {
    t.knob = {"alpha", "beta", "adversarial"};
    for (double a : {0.5, 1.0, 2.0}) {
      for (double b : {0.1, 0.5, 1.0}) {
        TrainConfig c = base;
        c.adversarial.enabled = true;
        c.adversarial.perturb.alpha = a;
        c.adversarial.perturb.beta = b;
        std::ostringstream label;
        label << "alpha=" << a << " beta=" << b;
        add(label.str(), c);
      }
    }
    TrainConfig c = base;
    c.adversarial.enabled = false;
    add("w/o CTAS", c);
  } else if (name == "module_knockout") {
    t.knob = {"use_ca", "use_mcc", "use_gcc", "use_gf"};
    const std::vector<std::pair<std::string, std::function<void(fusion::FusionConfig&)>>> rows = {
        {"w/o CA", [](fusion::FusionConfig& f) { f.use_coattention = false; }},
        {"w/o MCC", [](fusion::FusionConfig& f) { f.use_mcc = false; }},
        {"w/o GCC", [](fusion::FusionConfig& f) { f.use_gcc = false; }},
        {"w/o GF", [](fusion::FusionConfig& f) { f.use_gate = false; }},
        {"w/o C2G", [](fusion::FusionConfig& f) {
           f.use_coattention = false;
           f.use_mcc = false;
           f.use_gcc = false;
           f.use_gate = false;
         }},
    };
    for (const auto& [label, apply] : rows) {
      TrainConfig c = base;
      apply(c.model.fusion);
      add(label, c);
    }
  } else {
    throw ConfigError("unknown ablation: " + name);
  }
  return t;
}

AblationTable ablation_suite(const std::string& name, const TrainConfig& base, const Dataset& data) {
  auto table = ablation_grid(name, base);
  const auto& eval_set = data.test.empty() ? data.train : data.test;
  for (auto& row : table.rows) {
    TrainConfig c = row.config;
    c.epochs = base.ablation_epochs;
    TrainOptions options;
    options.validation = &eval_set;
    const auto result = train(c, data.train, data.question_vocab, data.answer_vocab, options);
    row.metrics = evaluate(*result.model, eval_set);
  }
  return table;
}

nlohmann::json AblationTable::to_json() const {
  nlohmann::json j;
  j["name"] = name;
  j["knob"] = knob;
  nlohmann::json rows_json = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json diff;
    const auto cj = r.config.to_json();
    for (const auto& k : r.changed) diff[k] = cj.at(k);
    rows_json.push_back({{"label", r.label}, {"changed", diff.is_null() ? nlohmann::json::object() : diff},
                         {"metrics", r.metrics.to_json()}});
  }
  j["rows"] = rows_json;
  return j;
}

std::string AblationTable::to_text() const {
  std::vector<std::vector<std::string>> lines;
  for (const auto& r : rows) lines.push_back({r.label, fixed(r.metrics.accuracy), fixed(r.metrics.f_score), fixed(r.metrics.miou)});
  return name + "\n" + render_table({"row", "Acc", "F-Score", "mIoU"}, lines);
}

// ---- throughput ------------------------------------------------------------------

std::string hardware_descriptor() {
  std::ifstream in("/proc/cpuinfo");
  std::string line, model_name;
  int cores = 0;
  while (std::getline(in, line)) {
    if (line.rfind("model name", 0) == 0) {
      ++cores;
      if (model_name.empty()) {
        const auto colon = line.find(':');
        if (colon != std::string::npos) model_name = line.substr(colon + 2);
      }
    }
  }
  if (model_name.empty()) model_name = "unknown CPU";
  return model_name + " (" + std::to_string(cores) + " logical cores, single-threaded inference)";
}

FpsReport measure_fps(const model::Model& model, const std::vector<dataio::QASample>& samples, int n_iters, int warmup) {
  if (n_iters <= 0) throw MeasurementError("measure_fps: n_iters must be > 0");
  if (samples.empty()) throw MeasurementError("measure_fps: no samples");
  const int text_len = model.config().encoder.text_len;
  std::vector<model::Batch> batches;
  for (size_t i = 0; i < samples.size(); ++i) batches.push_back(model::make_batch(samples, {i}, model.question_vocab(), text_len));
  for (int i = 0; i < warmup; ++i) model.predict(batches[static_cast<size_t>(i) % batches.size()]);
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < n_iters; ++i) model.predict(batches[static_cast<size_t>(i) % batches.size()]);
  const auto t1 = std::chrono::steady_clock::now();
  FpsReport r;
  r.iterations = n_iters;
  r.seconds = std::chrono::duration<double>(t1 - t0).count();
  r.fps = r.seconds > 0 ? n_iters / r.seconds : 0.0;
  r.hardware = hardware_descriptor();
  return r;
}

nlohmann::json FpsReport::to_json() const {
  return {{"fps", fps}, {"seconds", seconds}, {"iterations", iterations}, {"hardware", hardware}};
}

}  // namespace vqla::eval
