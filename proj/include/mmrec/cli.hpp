#pragma once

// The `mmrec` command line: gen-data, train, eval, grad-check, ablate.
// Exit status 0 on success, 1 for bad usage or invalid input (config, data
// files, checkpoints), 2 when a run fails.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mmrec/config.hpp"
#include "mmrec/data/dataset.hpp"
#include "mmrec/model/desk.hpp"
#include "mmrec/training/ablation.hpp"
#include "mmrec/training/checkpoint.hpp"

namespace mmrec::cli {

inline constexpr int kOk = 0;
inline constexpr int kInvalid = 1;
inline constexpr int kFailed = 2;

namespace detail {

namespace fs = std::filesystem;

inline std::vector<Variant> parse_variants(const std::string& list) {
  std::vector<Variant> out;
  for (const std::string& name : mmrec::detail::split(list, ',')) out.push_back(parse_variant(name));
  return out;
}

inline void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << text;
}

// --data wins over the config's data_dir; without either the synthetic
// generator runs in memory from the config.
inline Dataset dataset_for(const ExperimentConfig& cfg, const std::string& data_flag) {
  const std::string dir = data_flag.empty() ? cfg.data_dir : data_flag;
  if (dir.empty()) return to_dataset(generate_synthetic(cfg.synthetic_config()), cfg.news_limits());
  if (!fs::is_directory(dir)) throw ValidationError("data directory " + dir + " does not exist");
  return load_dataset(dir, cfg.news_limits(), cfg.vocab_min_count);
}

inline void print_epoch(std::ostream& out, const EpochLog& e) {
  char line[160];
  if (e.has_dev) {
    std::snprintf(line, sizeof line, "epoch %3zu  loss %.4f  dev AUC %.4f  MRR %.4f", e.epoch, e.loss, e.dev.auc(),
                  e.dev.values[1]);
  } else {
    std::snprintf(line, sizeof line, "epoch %3zu  loss %.4f", e.epoch, e.loss);
  }
  out << line << std::endl;
}

struct Args {
  std::string config, out, data, checkpoint, report, variants, split = "test";
  std::optional<std::uint64_t> seed;
  double tol = 1e-4;
};

inline ExperimentConfig load_config(const Args& a) { return ExperimentConfig::load(a.config); }

inline int gen_data(const Args& a, std::ostream& out) {
  ExperimentConfig cfg = load_config(a);
  if (a.seed) cfg.synthetic.seed = *a.seed;
  cfg.validate();
  const SyntheticDataset ds = generate_synthetic(cfg.synthetic_config());
  write_dataset(a.out, ds);
  cfg.save(fs::path(a.out) / "config.json");
  out << "wrote " << ds.news.size() << " news, " << ds.train.size() << "/" << ds.dev.size() << "/" << ds.test.size()
      << " train/dev/test impressions to " << a.out << "\n";
  return kOk;
}

inline int train_cmd(const Args& a, std::ostream& out) {
  ExperimentConfig cfg = load_config(a);
  if (a.seed) cfg.train.seed = *a.seed;
  cfg.validate();
  const Dataset ds = dataset_for(cfg, a.data);
  if (!a.data.empty()) cfg.data_dir = a.data;
  fs::create_directories(a.out);
  cfg.save(fs::path(a.out) / "config.json");

  const NewsInputs inputs = NewsInputs::prepare(ds.news, cfg.model.encoder);
  MmRecModel model(cfg.model, ds.vocab.size(), cfg.train.seed);
  out << "training " << variant_name(cfg.model.variant) << " (" << model.parameters().num_scalars()
      << " parameters) on " << ds.train.size() << " impressions\n";
  const TrainResult r = train(model, {&ds.news, &inputs, &ds.train, &ds.dev}, cfg.train,
                              [&out](const EpochLog& e) { print_epoch(out, e); });
  if (!r.best_parameters.empty()) restore(model.parameters(), r.best_parameters);
  write_log((fs::path(a.out) / "train_log.jsonl").string(), r.log);
  nlohmann::json metrics{{"initial_loss", r.initial_loss}, {"best_epoch", r.best_epoch}};
  if (r.best_epoch) metrics["best_dev_auc"] = r.best_dev_auc;
  save_checkpoint(a.out, model, cfg, ds.vocab, r.steps, metrics);
  out << "checkpoint written to " << a.out;
  if (r.best_epoch) out << " (epoch " << r.best_epoch << ", dev AUC " << r.best_dev_auc << ")";
  out << "\n";
  return kOk;
}

inline int eval_cmd(const Args& a, std::ostream& out) {
  LoadedCheckpoint ck = load_checkpoint(a.checkpoint);
  ExperimentConfig cfg = ck.config;
  Dataset ds = dataset_for(cfg, a.data);
  assign_token_ids(ds.news, ck.vocab);  // ids as the model was trained
  const std::vector<ImpressionSample>* split = nullptr;
  if (a.split == "train") split = &ds.train;
  else if (a.split == "dev") split = &ds.dev;
  else if (a.split == "test") split = &ds.test;
  else throw ValidationError("--split must be train, dev or test");
  if (split->empty()) throw ValidationError("the " + a.split + " split is empty");

  const NewsInputs inputs = NewsInputs::prepare(ds.news, cfg.model.encoder);
  MetricReport rep;
  rep.seeds.push_back(cfg.train.seed);
  rep.runs.push_back(evaluate_model(*ck.model, inputs, ds.news, *split, worker_threads()));
  out << rep.table(variant_name(cfg.model.variant));

  const fs::path report(a.report);
  if (report.has_parent_path()) fs::create_directories(report.parent_path());
  nlohmann::json j = rep.to_json();
  j["split"] = a.split;
  j["checkpoint"] = a.checkpoint;
  write_json(report, j);
  if (!a.data.empty()) cfg.data_dir = a.data;
  cfg.save(report.parent_path() / "config.json");
  return kOk;
}

inline int grad_check_cmd(const Args& a, std::ostream& out) {
  const ExperimentConfig cfg = load_config(a);
  const auto start = std::chrono::steady_clock::now();
  const GradCheckReport r = grad_check(model_grad_check_problem(cfg.model, a.seed.value_or(cfg.train.seed)),
                                       cfg.grad_check_step, a.tol);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  char line[256];
  std::snprintf(line, sizeof line, "%s max_rel_err=%.3e scalars=%zu step=%g tol=%g time=%.1fs", r.passed ? "PASS" : "FAIL",
                r.max_rel_error, r.scalars_checked, r.step, r.tolerance, secs);
  out << line << "\n";
  if (!r.passed) {
    out << "worst: " << r.worst_parameter << "[" << r.worst_index << "] autodiff=" << r.worst_autodiff
        << " numeric=" << r.worst_numeric << "\n";
  }
  return r.passed ? kOk : kFailed;
}

inline int ablate_cmd(const Args& a, std::ostream& out) {
  ExperimentConfig cfg = load_config(a);
  const std::vector<Variant> variants = parse_variants(a.variants);
  if (variants.size() < 2) throw ValidationError("--variants needs at least two names");
  const Dataset ds = dataset_for(cfg, a.data);
  if (!a.data.empty()) cfg.data_dir = a.data;
  fs::create_directories(a.report);
  cfg.save(fs::path(a.report) / "config.json");

  const AblationReport rep = ablate(cfg, ds, variants, [&out](Variant v, const SeedRun& run) {
    char line[160];
    std::snprintf(line, sizeof line, "%-13s seed %llu  best epoch %zu  dev AUC %.4f  test AUC %.4f",
                  variant_name(v).c_str(), static_cast<unsigned long long>(run.seed), run.train.best_epoch,
                  run.dev.auc(), run.test.auc());
    out << line << std::endl;
  });
  const std::string md = rep.markdown();
  write_text(fs::path(a.report) / "ablation.md", md);
  write_json(fs::path(a.report) / "ablation.json", rep.to_json());
  out << "\n" << md;
  return kOk;
}

}  // namespace detail

inline int run_command(int argc, const char* const* argv, std::ostream& out = std::cout,
                       std::ostream& err = std::cerr) {
  CLI::App app{"mmrec: multimodal news recommendation"};
  app.require_subcommand(1);
  detail::Args a;

  auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset");
  gen->add_option("--config", a.config, "JSON config")->required();
  gen->add_option("--out", a.out, "output directory")->required();
  gen->add_option("--seed", a.seed, "generator seed (overrides synthetic_seed)");

  auto* tr = app.add_subcommand("train", "train a model and write a checkpoint");
  tr->add_option("--config", a.config, "JSON config")->required();
  tr->add_option("--data", a.data, "dataset directory (default: config data_dir, else synthetic)");
  tr->add_option("--out", a.out, "checkpoint directory")->required();
  tr->add_option("--seed", a.seed, "training seed (overrides seed)");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  ev->add_option("--checkpoint", a.checkpoint, "checkpoint directory")->required();
  ev->add_option("--data", a.data, "dataset directory (default: the checkpoint's data_dir)");
  ev->add_option("--report", a.report, "report JSON path")->required();
  ev->add_option("--split", a.split, "train, dev or test");

  auto* gc = app.add_subcommand("grad-check", "compare autodiff gradients with finite differences");
  gc->add_option("--config", a.config, "JSON config")->required();
  gc->add_option("--seed", a.seed, "model seed");
  gc->add_option("--tol", a.tol, "maximum relative error");

  auto* ab = app.add_subcommand("ablate", "train and compare model variants");
  ab->add_option("--config", a.config, "JSON config")->required();
  ab->add_option("--variants", a.variants, "comma-separated variants, e.g. full,text-only")->required();
  ab->add_option("--data", a.data, "dataset directory (default: config data_dir, else synthetic)");
  ab->add_option("--report", a.report, "report directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, err, err);
    err << app.help();
    return kInvalid;
  }

  try {
    if (gen->parsed()) return detail::gen_data(a, out);
    if (tr->parsed()) return detail::train_cmd(a, out);
    if (ev->parsed()) return detail::eval_cmd(a, out);
    if (gc->parsed()) return detail::grad_check_cmd(a, out);
    return detail::ablate_cmd(a, out);
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return kInvalid;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << "\n";
    return kInvalid;
  } catch (const CheckpointError& e) {
    err << "error: " << e.what() << "\n";
    return kInvalid;
  } catch (const std::exception& e) {
    err << "failed: " << e.what() << "\n";
    return kFailed;
  }
}

}  // namespace mmrec::cli
