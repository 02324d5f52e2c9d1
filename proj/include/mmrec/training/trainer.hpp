#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmrec/eval/evaluate.hpp"
#include "mmrec/model/mmrec_model.hpp"
#include "mmrec/training/adam.hpp"
#include "mmrec/training/samples.hpp"

namespace mmrec {

struct TrainConfig {
  AdamConfig adam;
  std::size_t batch_size = 32;
  std::size_t epochs = 10;
  std::size_t neg_ratio = 4;  // K_neg
  std::uint64_t seed = 1;
  bool eval_dev = true;  // dev metrics after every epoch
  double stop_dev_auc = 0.0;  // stop once dev AUC exceeds this; 0 never stops

  void validate() const {
    adam.validate();
    if (batch_size == 0) throw ValidationError("batch_size must be at least 1");
    if (neg_ratio == 0) throw ValidationError("neg_ratio must be at least 1");
    if (!(stop_dev_auc >= 0.0 && stop_dev_auc <= 1.0)) throw ValidationError("stop_dev_auc must lie in [0, 1]");
  }
};

// -log softmax(scores)[0]: the positive sits in front of its negatives.
inline double nce_loss(std::span<const double> scores) {
  if (scores.empty()) throw ValidationError("nce_loss needs at least one score");
  const double mx = *std::max_element(scores.begin(), scores.end());
  double z = 0.0;
  for (double s : scores) z += std::exp(s - mx);
  return mx + std::log(z) - scores[0];
}

struct EpochLog {
  std::size_t epoch = 0;
  double loss = 0.0;  // mean over the epoch's batches, each weighted by its size
  std::size_t samples = 0;
  std::size_t skipped_impressions = 0;
  bool has_dev = false;
  RunMetrics dev;

  nlohmann::json to_json() const {
    nlohmann::json j{{"epoch", epoch}, {"loss", loss}, {"samples", samples}, {"skipped_impressions", skipped_impressions}};
    if (has_dev) {
      for (std::size_t k = 0; k < kMetricNames.size(); ++k) j["dev"][kMetricNames[k]] = dev.values[k];
    }
    return j;
  }
};

struct TrainResult {
  double initial_loss = 0.0;  // mean loss of the epoch-1 samples before any update
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;  // 0 when dev evaluation is off or never improved
  double best_dev_auc = 0.0;
  std::vector<Tensor> best_parameters;  // snapshot at best_epoch, store order
  long long steps = 0;
};

// Everything a training run reads besides the model and the config.
struct TrainingData {
  const NewsTable* news = nullptr;
  const NewsInputs* inputs = nullptr;
  const std::vector<ImpressionSample>* train = nullptr;
  const std::vector<ImpressionSample>* dev = nullptr;  // may be null or empty
};

inline std::vector<Tensor> snapshot(const ParameterStore& store) {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < store.size(); ++i) out.push_back(store[i].value());
  return out;
}

inline void restore(ParameterStore& store, const std::vector<Tensor>& values) {
  if (values.size() != store.size()) throw ValidationError("snapshot does not match the parameter store");
  for (std::size_t i = 0; i < store.size(); ++i) store[i].value() = values[i];
}

// Mean NCE loss over the requests, without gradients.
inline double mean_loss(const MmRecModel& model, const NewsInputs& inputs, std::span<const ScoringRequest> requests,
                        std::size_t batch_size = 32) {
  double total = 0.0;
  for (std::size_t b = 0; b < requests.size(); b += batch_size) {
    const auto batch = requests.subspan(b, std::min(batch_size, requests.size() - b));
    Tape t(GradMode::kInference);
    total += softmax_cross_entropy_first(model.batch_scores(t, inputs, batch)).item() * static_cast<double>(batch.size());
  }
  return requests.empty() ? 0.0 : total / static_cast<double>(requests.size());
}

// Samples are rebuilt every epoch (fresh negatives) from seed + epoch, then
// shuffled with the same stream. `on_epoch` sees each log entry as soon as
// it is complete.
inline TrainResult train(MmRecModel& model, const TrainingData& data, const TrainConfig& cfg,
                         const std::function<void(const EpochLog&)>& on_epoch = {}) {
  cfg.validate();
  if (!data.news || !data.inputs || !data.train) throw ValidationError("training data is incomplete");
  const std::size_t max_history = model.config().max_history;
  const bool with_dev = cfg.eval_dev && data.dev && !data.dev->empty();
  Adam adam(cfg.adam);
  ParameterStore& store = model.parameters();
  const std::vector<Parameter*> params = store.all();
  TrainResult result;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::mt19937_64 rng(cfg.seed * 1000003ull + epoch);
    const SampleSet set = build_samples(*data.train, cfg.neg_ratio, rng());
    if (set.samples.empty()) throw ValidationError("no training samples: the training split has no usable clicks");
    std::vector<ScoringRequest> requests;
    requests.reserve(set.samples.size());
    for (const TrainingSample& s : set.samples) requests.push_back(to_request(s, *data.news, max_history));
    std::shuffle(requests.begin(), requests.end(), rng);
    if (epoch == 1) result.initial_loss = mean_loss(model, *data.inputs, requests, cfg.batch_size);

    EpochLog entry;
    entry.epoch = epoch;
    entry.samples = requests.size();
    entry.skipped_impressions = set.skipped_impressions;
    double total = 0.0;
    for (std::size_t b = 0; b < requests.size(); b += cfg.batch_size) {
      const auto batch = std::span<const ScoringRequest>(requests).subspan(b, std::min(cfg.batch_size, requests.size() - b));
      store.zero_grad();
      Tape t;
      Var loss = softmax_cross_entropy_first(model.batch_scores(t, *data.inputs, batch));
      if (!std::isfinite(loss.item())) throw NonFiniteError("non-finite loss at epoch " + std::to_string(epoch));
      t.backward(loss);
      adam.step(params);
      total += loss.item() * static_cast<double>(batch.size());
    }
    entry.loss = total / static_cast<double>(requests.size());
    if (with_dev) {
      entry.has_dev = true;
      entry.dev = evaluate_model(model, *data.inputs, *data.news, *data.dev, worker_threads());
      if (result.best_epoch == 0 || entry.dev.auc() > result.best_dev_auc) {
        result.best_epoch = epoch;
        result.best_dev_auc = entry.dev.auc();
        result.best_parameters = snapshot(store);
      }
    }
    result.log.push_back(entry);
    if (on_epoch) on_epoch(entry);
    if (with_dev && cfg.stop_dev_auc > 0.0 && entry.dev.auc() > cfg.stop_dev_auc) break;
  }
  result.steps = adam.step_count();
  return result;
}

inline void write_log(const std::string& path, const std::vector<EpochLog>& log) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open " + path + " for writing");
  for (const EpochLog& e : log) out << e.to_json().dump() << '\n';
}

}  // namespace mmrec
