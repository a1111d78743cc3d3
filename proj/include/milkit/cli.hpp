#pragma once

// Command-line surface. Flags are deliberately thin — a subcommand, a JSON
// config, an output directory and an optional seed override; everything
// substantive lives in the config document. Every run echoes its fully
// resolved config next to its outputs so results can be reproduced exactly.
//
// Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "milkit/common.hpp"
#include "milkit/eval.hpp"
#include "milkit/synth.hpp"
#include "milkit/training.hpp"

namespace milkit::cli {

namespace detail {

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot open config: " + path);
  nlohmann::json doc;
  try {
    is >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("config parse error in " + path + ": " + e.what());
  }
  return doc;
}

inline void write_json_file(const nlohmann::json& doc, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw RuntimeFailure("cannot write " + path.string());
  os << doc.dump(2) << "\n";
}

inline TrainConfig load_train_config(const std::string& path, std::optional<std::uint64_t> seed) {
  TrainConfig cfg = train_config_from_json(read_json_file(path));
  if (seed) cfg.seed = *seed;
  return cfg;
}

inline DatasetManifest manifest_for(const TrainConfig& cfg) {
  if (cfg.manifest.empty()) throw ValidationError("config: 'manifest' is required for this command");
  return load_manifest(cfg.manifest);
}

inline void print_warnings(const WarningLog& log, std::ostream& err) {
  for (const auto& w : log.entries) err << "warning: " << w << "\n";
}

inline int run_synth(const std::string& config_path, const std::string& out_dir,
                     std::optional<std::uint64_t> seed, std::ostream& out, std::ostream& err) {
  SynthConfig cfg = synth_config_from_json(read_json_file(config_path));
  if (seed) cfg.seed = *seed;
  std::filesystem::create_directories(out_dir);
  write_json_file(synth_config_to_json(cfg), std::filesystem::path(out_dir) / "resolved_config.json");
  WarningLog log;
  SynthSummary s = generate_dataset(cfg, out_dir, &log);
  print_warnings(log, err);
  out << "wrote " << s.num_train_slides << " train / " << s.num_test_slides
      << " test slides, bayes accuracy " << s.bayes_accuracy << "\n";
  return 0;
}

inline int run_train(const std::string& config_path, const std::string& out_dir,
                     std::optional<std::uint64_t> seed, std::ostream& out, std::ostream& err) {
  TrainConfig cfg = load_train_config(config_path, seed);
  DatasetManifest m = manifest_for(cfg);
  std::filesystem::create_directories(out_dir);
  write_json_file(train_config_to_json(cfg), std::filesystem::path(out_dir) / "resolved_config.json");
  WarningLog log;
  FoldAssignment fa = stratified_kfold(m, cfg.folds, cfg.seed, &log);
  FoldResult fr = train_fold(m, fa, cfg.fold, cfg, out_dir, &log, cfg.resume);
  print_warnings(log, err);
  out << "fold " << cfg.fold << " trained for " << fr.state.epochs_done << " epochs; checkpoint at "
      << fr.checkpoint_path.string() << "\n";
  return 0;
}

inline int run_cv(const std::string& config_path, const std::string& out_dir,
                  std::optional<std::uint64_t> seed, std::ostream& out, std::ostream& err) {
  TrainConfig cfg = load_train_config(config_path, seed);
  DatasetManifest m = manifest_for(cfg);
  std::filesystem::create_directories(out_dir);
  write_json_file(train_config_to_json(cfg), std::filesystem::path(out_dir) / "resolved_config.json");
  WarningLog log;
  CvSummary summary = run_cross_validation(m, cfg, out_dir, &log);
  print_warnings(log, err);
  for (const auto& [name, v] : summary.mean)
    out << name << ": " << v << " +/- " << summary.stddev.at(name) << "\n";
  return 0;
}

inline TrainState load_checkpoint_for_eval(const TrainConfig& cfg, const DatasetManifest& m) {
  if (cfg.checkpoint.empty()) throw ValidationError("config: 'checkpoint' is required for this command");
  return load_checkpoint(cfg.checkpoint, cfg, m, {});
}

inline int run_eval(const std::string& config_path, const std::string& out_dir,
                    std::optional<std::uint64_t> seed, std::ostream& out, std::ostream& err) {
  TrainConfig cfg = load_train_config(config_path, seed);
  DatasetManifest m = manifest_for(cfg);
  std::filesystem::create_directories(out_dir);
  write_json_file(train_config_to_json(cfg), std::filesystem::path(out_dir) / "resolved_config.json");
  WarningLog log;
  TrainState st = load_checkpoint_for_eval(cfg, m);
  EvalReport report = evaluate_model(st.model, m, cfg.split, &log);
  write_json_file(report.to_json(), std::filesystem::path(out_dir) / "eval.json");
  print_warnings(log, err);
  out << report.to_json().dump(2) << "\n";
  return 0;
}

inline int run_heatmap(const std::string& config_path, const std::string& out_dir,
                       std::optional<std::uint64_t> seed, std::ostream& out, std::ostream& err) {
  TrainConfig cfg = load_train_config(config_path, seed);
  DatasetManifest m = manifest_for(cfg);
  if (cfg.slide.empty()) throw ValidationError("config: 'slide' is required for heatmap");
  const ManifestEntry* entry = nullptr;
  for (const auto& e : m.entries)
    if (e.slide_id == cfg.slide) entry = &e;
  if (!entry) throw ValidationError("heatmap: unknown slide '" + cfg.slide + "'");

  FeatureBag bag = load_bag(m, *entry);
  if (!bag.coords) throw ValidationError("heatmap: slide '" + cfg.slide + "' has no coordinates");

  TrainState st = load_checkpoint_for_eval(cfg, m);
  BagOutput bo = evaluate_bag(st.model, bag.features);

  Vector scores;
  if (cfg.heatmap_score == "attention") {
    scores = bo.attention.row(entry->slide_label).transpose();
  } else if (cfg.heatmap_score == "instance") {
    scores = bo.instance_scores.col(entry->slide_label);
  } else {  // gt_vs_normal
    const Matrix& basis = bo.inst_logits.size() > 0 ? bo.inst_logits : bo.instance_scores;
    GtVsNormal g = gt_vs_normal(basis, entry->slide_label, m.label_space.normal_index);
    scores = Eigen::Map<const Vector>(g.scores.data(), static_cast<Eigen::Index>(g.scores.size()));
  }

  std::filesystem::create_directories(out_dir);
  write_json_file(train_config_to_json(cfg), std::filesystem::path(out_dir) / "resolved_config.json");
  WarningLog log;
  auto path = std::filesystem::path(out_dir) /
              (cfg.slide + (cfg.heatmap_mode == "csv" ? ".csv" : ".pgm"));
  if (cfg.heatmap_mode == "csv")
    export_heatmap_csv(*bag.coords, scores, path);
  else
    export_heatmap_pgm(*bag.coords, scores, path, &log);
  print_warnings(log, err);
  out << "wrote " << path.string() << "\n";
  return 0;
}

inline int run_gradcheck(const std::string& config_path, const std::string& out_dir,
                         std::optional<std::uint64_t> seed, std::ostream& out, std::ostream& err) {
  TrainConfig cfg = load_train_config(config_path, seed);
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    write_json_file(train_config_to_json(cfg), std::filesystem::path(out_dir) / "resolved_config.json");
  }
  double worst = run_gradient_check(cfg.kind(), cfg.seed);
  out << "max relative gradient error for " << cfg.model << ": " << worst << "\n";
  if (!(worst <= 1e-5)) {
    err << "gradient check failed (threshold 1e-5)\n";
    return 2;
  }
  return 0;
}

}  // namespace detail

/// Entry point shared by the binary and the tests. argv[0] is not expected.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  CLI::App app{"milkit: weakly supervised multiple-instance learning toolkit"};
  app.require_subcommand(1);

  struct SubArgs {
    std::string config;
    std::string out_dir;
    std::optional<std::uint64_t> seed;
  };
  std::map<std::string, SubArgs> sub_args;
  const std::vector<std::pair<std::string, std::string>> subs = {
      {"synth", "generate a synthetic benchmark dataset"},
      {"train", "train a single fold"},
      {"cv", "run full cross-validation"},
      {"eval", "evaluate a checkpoint on a split"},
      {"heatmap", "export per-instance score maps for one slide"},
      {"gradcheck", "finite-difference gradient verification"}};
  for (const auto& [name, desc] : subs) {
    CLI::App* s = app.add_subcommand(name, desc);
    SubArgs& a = sub_args[name];
    s->add_option("--config", a.config, "JSON config file")->required();
    auto* out_opt = s->add_option("--out", a.out_dir, "output directory");
    if (name != "gradcheck") out_opt->required();
    s->add_option("--seed", [&a](const CLI::results_t& res) {
      a.seed = std::stoull(res[0]);
      return true;
    }, "override the config seed");
  }

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());  // CLI11 consumes back-to-front
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {  // --help
      out << app.help();
      return 0;
    }
    err << "error: " << e.what() << "\n" << app.help();
    return 1;
  }

  try {
    const std::string name = app.get_subcommands().front()->get_name();
    const SubArgs& a = sub_args[name];
    if (name == "synth") return detail::run_synth(a.config, a.out_dir, a.seed, out, err);
    if (name == "train") return detail::run_train(a.config, a.out_dir, a.seed, out, err);
    if (name == "cv") return detail::run_cv(a.config, a.out_dir, a.seed, out, err);
    if (name == "eval") return detail::run_eval(a.config, a.out_dir, a.seed, out, err);
    if (name == "heatmap") return detail::run_heatmap(a.config, a.out_dir, a.seed, out, err);
    if (name == "gradcheck") return detail::run_gradcheck(a.config, a.out_dir, a.seed, out, err);
    err << "error: unknown subcommand\n";
    return 1;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "failure: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace milkit::cli
