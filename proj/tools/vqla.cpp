// Command-line front end: train, eval, robust, ablate, fps, corrupt, dataio.

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>

#include "vqla/config_io.hpp"
#include "vqla/corruptions.hpp"
#include "vqla/dataio.hpp"
#include "vqla/error.hpp"
#include "vqla/evalharness.hpp"
#include "vqla/model.hpp"

namespace fs = std::filesystem;
using namespace vqla;

namespace {

// Relative output paths land under $VQLA_OUTPUT_ROOT when it is set.
fs::path output_path(const std::string& p) {
  fs::path path(p);
  const char* root = std::getenv("VQLA_OUTPUT_ROOT");
  if (root && *root && path.is_relative()) path = fs::path(root) / path;
  return path;
}

eval::TrainConfig build_config(const std::string& config_file, const std::vector<std::string>& overrides) {
  eval::TrainConfig cfg;
  if (!config_file.empty()) cfg = eval::load_train_config(config_file);
  for (const auto& kv : overrides) cfg = eval::TrainConfig::from_json(parse_config_text(kv), cfg);
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Surgical visual question localized-answering toolkit"};
  app.require_subcommand(1);

  std::string config_file, out_dir, checkpoint, manifest, kinds = "all", severities = "1..5";
  std::vector<std::string> overrides;
  std::uint64_t seed = 0;
  int iters = 100;

  auto* train = app.add_subcommand("train", "Train a model and write a checkpoint plus reports");
  train->add_option("--config", config_file, "Config file (JSON or key=value)");
  train->add_option("--set", overrides, "Override a config key, key=value");
  train->add_option("--out", out_dir, "Output directory")->default_val("train");

  auto* evaluate = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest");
  evaluate->add_option("--checkpoint", checkpoint)->required();
  evaluate->add_option("--manifest", manifest)->required();
  evaluate->add_option("--out", out_dir, "Write report.json and report.txt here");

  auto* robust = app.add_subcommand("robust", "Corruption sweep of a checkpoint");
  robust->add_option("--checkpoint", checkpoint)->required();
  robust->add_option("--manifest", manifest)->required();
  robust->add_option("--kinds", kinds)->default_val("all");
  robust->add_option("--severities", severities)->default_val("1..5");
  robust->add_option("--seed", seed);
  robust->add_option("--out", out_dir);

  std::string ablation, box, qa, uncertainty;
  auto* ablate = app.add_subcommand("ablate", "Train and evaluate one ablation grid");
  ablate->add_option("name", ablation, "Grid name")->required()->check(CLI::IsMember(eval::ablation_names()));
  ablate->add_option("--config", config_file);
  ablate->add_option("--set", overrides);
  ablate->add_option("--box", box)->check(CLI::IsMember({"giou", "l1+giou", "iou", "diou", "ciou"}));
  ablate->add_option("--qa", qa)->check(CLI::IsMember({"ce", "focal"}));
  ablate->add_option("--uncertainty", uncertainty)->check(CLI::IsMember({"on", "off"}));
  ablate->add_option("--out", out_dir);
  bool dry_run = false;
  ablate->add_flag("--dry-run", dry_run, "List the grid rows without training");

  auto* fps = app.add_subcommand("fps", "Single-stream inference throughput");
  fps->add_option("--checkpoint", checkpoint)->required();
  fps->add_option("--manifest", manifest)->required();
  fps->add_option("--iters", iters)->default_val(100);

  auto* corrupt = app.add_subcommand("corrupt", "Write a corrupted copy of a dataset");
  corrupt->add_option("--manifest", manifest)->required();
  corrupt->add_option("--kinds", kinds)->default_val("all");
  corrupt->add_option("--severities", severities)->default_val("1..5");
  corrupt->add_option("--seed", seed);
  corrupt->add_option("--out", out_dir)->required();

  auto* dataio_cmd = app.add_subcommand("dataio", "Synthetic data generation and manifest checks");
  dataio_cmd->require_subcommand(1);
  auto* synth = dataio_cmd->add_subcommand("synth", "Generate the synthetic dataset");
  synth->add_option("--config", config_file);
  synth->add_option("--set", overrides);
  synth->add_option("--out", out_dir)->required();
  std::string against;
  auto* validate = dataio_cmd->add_subcommand("validate", "Parse a manifest and check its images");
  validate->add_option("manifest", manifest)->required();
  validate->add_option("--against", against, "Second manifest that must share no frame ids");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      const auto cfg = build_config(config_file, overrides);
      const auto dir = output_path(out_dir);
      fs::create_directories(dir);
      const auto data = eval::load_dataset(cfg);
      eval::TrainOptions options;
      options.validation = data.test.empty() ? nullptr : &data.test;
      options.checkpoint = dir / "checkpoint.bin";
      options.dump_dir = dir;
      options.on_step = [](long step, const losses::LossBundle& b) {
        if (step % 50 == 0) std::cerr << "step " << step << " loss " << b.total << "\n";
      };
      const auto result = eval::train(cfg, data.train, data.question_vocab, data.answer_vocab, options);
      nlohmann::json curve = nlohmann::json::array();
      for (const auto& b : result.curve) {
        curve.push_back({{"total", b.total}, {"clean", b.clean_loss}, {"perturbed", b.perturbed_loss},
                         {"contrastive", b.contrastive_loss}, {"qa", b.qa_loss}, {"box", b.box_loss}});
      }
      write_text(dir / "curve.json", curve.dump() + "\n");
      write_text(dir / "config.json", cfg.to_json().dump(2) + "\n");
      const auto train_report = eval::evaluate(*result.model, data.train);
      nlohmann::json reports = {{"train", train_report.to_json()}};
      std::string text = "train\n" + train_report.to_text();
      if (!data.test.empty()) {
        const auto test_report = eval::evaluate(*result.model, data.test);
        reports["test"] = test_report.to_json();
        text += "\ntest\n" + test_report.to_text();
      }
      if (cfg.train_manifest.empty()) dataio::write_synthetic(
          dataio::SyntheticDataset{data.train_manifest, data.test_manifest, data.images, {}}, dir / "data");
      write_text(dir / "report.json", reports.dump(2) + "\n");
      write_text(dir / "report.txt", text);
      std::cout << text << "checkpoint: " << options.checkpoint.string() << "\n";
    } else if (*evaluate) {
      const auto report = eval::evaluate(checkpoint, manifest);
      std::cout << report.to_text();
      if (!out_dir.empty()) {
        const auto dir = output_path(out_dir);
        write_text(dir / "report.json", report.to_json().dump(2) + "\n");
        write_text(dir / "report.txt", report.to_text());
      }
    } else if (*robust) {
      const auto model = model::load_checkpoint(checkpoint);
      const auto m = dataio::load_manifest(manifest);
      const auto samples = dataio::materialize(m, model->answer_vocab());
      const auto report = eval::robustness_sweep(*model, samples, corruptions::parse_kinds(kinds),
                                                 corruptions::parse_severities(severities), seed);
      std::cout << report.to_text();
      if (!out_dir.empty()) {
        const auto dir = output_path(out_dir);
        write_text(dir / "robustness.json", report.to_json().dump(2) + "\n");
        write_text(dir / "robustness.txt", report.to_text());
      }
    } else if (*ablate) {
      auto cfg = build_config(config_file, overrides);
      nlohmann::json sel = nlohmann::json::object();
      if (!box.empty()) sel["box"] = box;
      if (!qa.empty()) sel["qa"] = qa;
      if (!uncertainty.empty()) sel["uncertainty"] = uncertainty;
      cfg = eval::TrainConfig::from_json(sel, cfg);
      eval::AblationTable table;
      if (dry_run) {
        table = eval::ablation_grid(ablation, cfg);
        for (const auto& row : table.rows) {
          std::cout << row.label << ":";
          for (const auto& k : row.changed) std::cout << " " << k;
          std::cout << "\n";
        }
        return 0;
      }
      table = eval::ablation_suite(ablation, cfg, eval::load_dataset(cfg));
      std::cout << table.to_text();
      const auto dir = output_path(out_dir.empty() ? "ablate/" + ablation : out_dir);
      write_text(dir / "table.json", table.to_json().dump(2) + "\n");
      write_text(dir / "table.txt", table.to_text());
    } else if (*fps) {
      const auto model = model::load_checkpoint(checkpoint);
      const auto samples = dataio::materialize(dataio::load_manifest(manifest), model->answer_vocab());
      const auto report = eval::measure_fps(*model, samples, iters);
      std::cout << report.to_json().dump(2) << "\n";
    } else if (*corrupt) {
      const auto m = dataio::load_manifest(manifest);
      const auto report = corruptions::corrupt_dataset(m, corruptions::parse_kinds(kinds),
                                                       corruptions::parse_severities(severities), seed,
                                                       output_path(out_dir));
      std::cout << "wrote " << report.written << " images; manifest " << report.manifest.string() << "\n";
      for (const auto& f : report.failures) std::cerr << "failed: " << f << "\n";
      if (!report.failures.empty()) return 1;
    } else if (*synth) {
      const auto cfg = build_config(config_file, overrides);
      const auto data = dataio::generate_synthetic(cfg.synthetic);
      const auto dir = output_path(out_dir);
      dataio::write_synthetic(data, dir);
      std::cout << "train " << data.train.records.size() << " / test " << data.test.records.size() << " records in "
                << dir.string() << "\n";
    } else if (*validate) {
      const auto m = dataio::load_manifest(manifest);
      for (const auto& id : m.frame_ids()) {
        const auto path = m.image_path(*std::find_if(m.records.begin(), m.records.end(),
                                                     [&](const auto& r) { return r.frame_id == id; }));
        if (!fs::exists(path)) throw IntegrityError("missing image " + path.string());
      }
      if (!against.empty()) dataio::check_disjoint(m, dataio::load_manifest(against));
      std::cout << m.records.size() << " records, " << m.frame_ids().size() << " frames: ok\n";
    }
  } catch (const IntegrityError& e) {
    std::cerr << "integrity error: " << e.what() << "\n";
    return 3;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
