#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vqla/adversarial.hpp"
#include "vqla/dataio.hpp"
#include "vqla/losses.hpp"
#include "vqla/model.hpp"

namespace vqla::eval {

// ---- metrics ---------------------------------------------------------------

double accuracy(const std::vector<int>& predicted, const std::vector<int>& reference);
// Macro F1 over the classes that occur in `reference`.
double macro_f1(const std::vector<int>& predicted, const std::vector<int>& reference);
double miou(const std::vector<dataio::BBox>& predicted, const std::vector<dataio::BBox>& reference);

struct TypeMetrics {
  std::string type;
  long count = 0;
  double accuracy = 0.0;
  double f_score = 0.0;
  double miou = 0.0;
  bool operator==(const TypeMetrics&) const = default;
};

struct MetricsReport {
  long count = 0;
  double accuracy = 0.0;
  double f_score = 0.0;
  double miou = 0.0;
  std::vector<TypeMetrics> by_type;  // one entry per question type, fixed order

  nlohmann::json to_json() const;
  static MetricsReport from_json(const nlohmann::json& j);
  std::string to_text() const;
  bool operator==(const MetricsReport&) const = default;
};

MetricsReport compute_report(const std::vector<int>& predicted, const std::vector<int>& reference,
                             const std::vector<dataio::BBox>& predicted_boxes,
                             const std::vector<dataio::BBox>& reference_boxes,
                             const std::vector<dataio::QuestionType>& types);

// ---- configuration ---------------------------------------------------------

struct TrainConfig {
  model::ModelConfig model;
  losses::LossConfig loss;
  adversarial::AdversarialConfig adversarial;
  dataio::SyntheticConfig synthetic;

  int epochs = 80;
  int batch_size = 64;
  double learning_rate = 1e-5;
  double grad_clip = 0.0;
  std::uint64_t seed = 0;
  long max_steps = 0;  // 0: no limit
  int eval_every = 1;  // epochs between validation passes
  int ablation_epochs = 10;
  std::string train_manifest;  // empty: generate the synthetic dataset
  std::string test_manifest;

  // Flat key view. Unknown keys are rejected.
  // Keys absent from `flat` keep their value from `base`.
  static TrainConfig from_json(const nlohmann::json& flat);
  static TrainConfig from_json(const nlohmann::json& flat, const TrainConfig& base);
  nlohmann::json to_json() const;
  void validate() const;
};

TrainConfig load_train_config(const std::filesystem::path& path);

// Keys whose values differ between two configurations.
std::set<std::string> config_diff(const TrainConfig& a, const TrainConfig& b);

// ---- data --------------------------------------------------------------------

struct Dataset {
  dataio::DatasetManifest train_manifest;
  dataio::DatasetManifest test_manifest;
  std::map<std::string, Image> images;  // in-memory frames (synthetic runs)
  dataio::QuestionVocab question_vocab;
  dataio::AnswerVocab answer_vocab;
  std::vector<dataio::QASample> train;
  std::vector<dataio::QASample> test;
};

// Loads manifests when configured, otherwise generates the synthetic data.
// Vocabularies are built from the training split.
Dataset load_dataset(const TrainConfig& config);

// ---- training and evaluation ---------------------------------------------------

struct TrainResult {
  std::unique_ptr<model::Model> model;
  std::vector<losses::LossBundle> curve;  // one entry per optimizer step
  long steps = 0;
  int best_epoch = -1;
  MetricsReport best_validation;
};

struct TrainOptions {
  const std::vector<dataio::QASample>* validation = nullptr;  // model selection set
  std::filesystem::path checkpoint;   // written when non-empty
  std::filesystem::path dump_dir;     // NaN diagnostics; stderr when empty
  std::function<void(long step, const losses::LossBundle&)> on_step;
};

// Throws NumericalError (after writing a diagnostic dump) on a non-finite loss.
TrainResult train(const TrainConfig& config, const std::vector<dataio::QASample>& train_set,
                  const dataio::QuestionVocab& questions, const dataio::AnswerVocab& answers,
                  const TrainOptions& options = {});

MetricsReport evaluate(const model::Model& model, const std::vector<dataio::QASample>& samples,
                       int batch_size = 64);
MetricsReport evaluate(const std::filesystem::path& checkpoint, const std::filesystem::path& manifest);

// ---- robustness ---------------------------------------------------------------

struct KindRow {
  std::string kind;
  std::string category;
  std::vector<double> accuracy;  // per severity
  std::vector<double> miou;
  double mean_accuracy = 0.0;
  double mean_miou = 0.0;
};

struct SeverityRow {
  int severity = 0;
  double accuracy = 0.0;
  double miou = 0.0;
};

struct RobustnessReport {
  std::vector<int> severities;
  std::vector<KindRow> per_kind;
  std::vector<SeverityRow> per_severity;
  MetricsReport clean;
  double spearman_accuracy = 0.0;  // rho(severity, mean accuracy)

  nlohmann::json to_json() const;
  std::string to_text() const;
};

// Spearman rank correlation with average ranks for ties; 0 when either side
// has zero variance.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

RobustnessReport robustness_sweep(const model::Model& model, const std::vector<dataio::QASample>& samples,
                                  const std::vector<std::string>& kinds, const std::vector<int>& severities,
                                  std::uint64_t seed);

// ---- ablations ------------------------------------------------------------------

struct AblationRow {
  std::string label;
  TrainConfig config;
  std::set<std::string> changed;  // keys that differ from the base
  MetricsReport metrics;
};

struct AblationTable {
  std::string name;
  std::set<std::string> knob;  // keys this grid is allowed to vary
  std::vector<AblationRow> rows;

  nlohmann::json to_json() const;
  std::string to_text() const;
};

const std::vector<std::string>& ablation_names();
// Enumerates the grid without training.
AblationTable ablation_grid(const std::string& name, const TrainConfig& base);
// Trains each row for base.ablation_epochs epochs and evaluates on the test split.
AblationTable ablation_suite(const std::string& name, const TrainConfig& base, const Dataset& data);

// ---- throughput ------------------------------------------------------------------

struct FpsReport {
  double fps = 0.0;
  double seconds = 0.0;
  int iterations = 0;
  std::string hardware;

  nlohmann::json to_json() const;
};

std::string hardware_descriptor();
// Single-stream (batch 1) inference over `samples` in round robin.
FpsReport measure_fps(const model::Model& model, const std::vector<dataio::QASample>& samples, int n_iters,
                      int warmup = 3);

}  // namespace vqla::eval
