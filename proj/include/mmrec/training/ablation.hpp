#pragma once

#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmrec/config.hpp"
#include "mmrec/data/dataset.hpp"
#include "mmrec/eval/evaluate.hpp"
#include "mmrec/training/trainer.hpp"

namespace mmrec {

struct SeedRun {
  std::uint64_t seed = 0;
  TrainResult train;
  RunMetrics dev, test;
};

// Trains one model with `seed` and evaluates the best-dev snapshot (the
// last epoch when there is no dev split) on dev and test.
inline SeedRun run_seed(const ExperimentConfig& cfg, const Dataset& ds, const NewsInputs& inputs, std::uint64_t seed,
                        const std::function<void(const EpochLog&)>& on_epoch = {}) {
  SeedRun run;
  run.seed = seed;
  MmRecModel model(cfg.model, ds.vocab.size(), seed);
  TrainConfig tc = cfg.train;
  tc.seed = seed;
  run.train = train(model, {&ds.news, &inputs, &ds.train, &ds.dev}, tc, on_epoch);
  if (!run.train.best_parameters.empty()) restore(model.parameters(), run.train.best_parameters);
  const std::size_t threads = worker_threads();
  if (!ds.dev.empty()) run.dev = evaluate_model(model, inputs, ds.news, ds.dev, threads);
  if (!ds.test.empty()) run.test = evaluate_model(model, inputs, ds.news, ds.test, threads);
  return run;
}

struct VariantReport {
  Variant variant = Variant::kFull;
  MetricReport dev, test;
  std::vector<std::size_t> best_epochs;
  std::vector<double> initial_losses;
};

struct AblationReport {
  std::vector<VariantReport> variants;

  const VariantReport& at(Variant v) const {
    for (const auto& r : variants) {
      if (r.variant == v) return r;
    }
    throw ValidationError("variant " + variant_name(v) + " is not part of the report");
  }

  // Mean dev-metric difference a - b.
  double delta(Variant a, Variant b, std::size_t metric = 0) const {
    return at(a).dev.mean(metric) - at(b).dev.mean(metric);
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    for (const auto& r : variants) {
      nlohmann::json v;
      v["dev"] = r.dev.to_json();
      v["test"] = r.test.to_json();
      v["best_epochs"] = r.best_epochs;
      v["initial_losses"] = r.initial_losses;
      j["variants"][variant_name(r.variant)] = v;
    }
    for (std::size_t a = 0; a < variants.size(); ++a) {
      for (std::size_t b = a + 1; b < variants.size(); ++b) {
        const std::string key = variant_name(variants[a].variant) + " - " + variant_name(variants[b].variant);
        for (std::size_t k = 0; k < kMetricNames.size(); ++k) {
          j["deltas"][key][kMetricNames[k]] = delta(variants[a].variant, variants[b].variant, k);
        }
      }
    }
    return j;
  }

  // Dev and test tables (mean ± std over seeds, in percent), then the
  // pairwise dev deltas.
  std::string markdown() const {
    std::string out;
    for (const char* split : {"dev", "test"}) {
      out += std::string("### ") + split + "\n\n| variant |";
      for (const char* m : kMetricNames) out += std::string(" ") + m + " |";
      out += "\n|---|";
      for (std::size_t k = 0; k < kMetricNames.size(); ++k) out += "---|";
      out += "\n";
      for (const auto& r : variants) {
        const MetricReport& rep = std::string(split) == "dev" ? r.dev : r.test;
        out += "| " + variant_name(r.variant) + " |";
        for (std::size_t k = 0; k < kMetricNames.size(); ++k) {
          char cell[64];
          std::snprintf(cell, sizeof cell, " %.2f ± %.2f |", 100.0 * rep.mean(k), 100.0 * rep.std(k));
          out += cell;
        }
        out += "\n";
      }
      out += "\n";
    }
    out += "### dev deltas\n\n| pair |";
    for (const char* m : kMetricNames) out += std::string(" Δ") + m + " |";
    out += "\n|---|";
    for (std::size_t k = 0; k < kMetricNames.size(); ++k) out += "---|";
    out += "\n";
    for (std::size_t a = 0; a < variants.size(); ++a) {
      for (std::size_t b = a + 1; b < variants.size(); ++b) {
        out += "| " + variant_name(variants[a].variant) + " − " + variant_name(variants[b].variant) + " |";
        for (std::size_t k = 0; k < kMetricNames.size(); ++k) {
          char cell[32];
          std::snprintf(cell, sizeof cell, " %+.2f |", 100.0 * delta(variants[a].variant, variants[b].variant, k));
          out += cell;
        }
        out += "\n";
      }
    }
    return out;
  }
};

// Every variant sees the same dataset, the same seeds and the same
// hyperparameters; only cfg.model.variant changes.
inline AblationReport ablate(const ExperimentConfig& cfg, const Dataset& ds, const std::vector<Variant>& variants,
                             const std::function<void(Variant, const SeedRun&)>& on_run = {}) {
  if (variants.size() < 2) throw ValidationError("ablate needs at least two variants");
  cfg.validate();
  const NewsInputs inputs = NewsInputs::prepare(ds.news, cfg.model.encoder);
  AblationReport report;
  for (Variant v : variants) {
    ExperimentConfig vc = cfg;
    vc.model.variant = v;
    VariantReport r;
    r.variant = v;
    for (std::uint64_t seed : cfg.seeds) {
      SeedRun run = run_seed(vc, ds, inputs, seed);
      r.dev.seeds.push_back(seed);
      r.dev.runs.push_back(run.dev);
      r.test.seeds.push_back(seed);
      r.test.runs.push_back(run.test);
      r.best_epochs.push_back(run.train.best_epoch);
      r.initial_losses.push_back(run.train.initial_loss);
      if (on_run) on_run(v, run);
    }
    report.variants.push_back(std::move(r));
  }
  return report;
}

}  // namespace mmrec
