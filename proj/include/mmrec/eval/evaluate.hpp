#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmrec/data/behaviors.hpp"
#include "mmrec/eval/metrics.hpp"
#include "mmrec/model/mmrec_model.hpp"
#include "mmrec/training/samples.hpp"

namespace mmrec {

inline constexpr std::array<const char*, 4> kMetricNames{"AUC", "MRR", "nDCG@5", "nDCG@10"};

// Metrics of one run, each the mean over the impressions where it is defined.
struct RunMetrics {
  std::array<double, 4> values{};  // ordered like kMetricNames
  std::size_t n_impressions = 0;
  std::size_t skipped_auc = 0;   // single-class impressions
  std::size_t skipped_rank = 0;  // impressions without a click

  double auc() const { return values[0]; }
};

inline RunMetrics metrics_from_scores(const std::vector<std::vector<double>>& scores,
                                      const std::vector<ImpressionSample>& impressions) {
  if (scores.size() != impressions.size()) throw DimensionError("one score list per impression expected");
  RunMetrics m;
  m.n_impressions = impressions.size();
  std::array<double, 4> sum{};
  std::size_t n_auc = 0, n_rank = 0;
  for (std::size_t i = 0; i < impressions.size(); ++i) {
    std::vector<int> labels;
    for (const Candidate& c : impressions[i].candidates) labels.push_back(c.label);
    if (auto a = auc(scores[i], labels)) {
      sum[0] += *a;
      ++n_auc;
    } else {
      ++m.skipped_auc;
    }
    auto r = mrr(scores[i], labels);
    if (!r) {
      ++m.skipped_rank;
      continue;
    }
    sum[1] += *r;
    sum[2] += *ndcg_at_k(scores[i], labels, 5);
    sum[3] += *ndcg_at_k(scores[i], labels, 10);
    ++n_rank;
  }
  m.values[0] = n_auc ? sum[0] / static_cast<double>(n_auc) : 0.0;
  for (std::size_t k = 1; k < 4; ++k) m.values[k] = n_rank ? sum[k] / static_cast<double>(n_rank) : 0.0;
  return m;
}

// MMREC_THREADS, defaulting to the machine's core count.
inline std::size_t worker_threads() {
  const char* env = std::getenv("MMREC_THREADS");
  if (!env || !*env) return std::max(1u, std::thread::hardware_concurrency());
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n < 1) throw ValidationError(std::string("MMREC_THREADS must be a positive integer, got '") + env + "'");
  return static_cast<std::size_t>(n);
}

// Scores every candidate of every impression. News are encoded once; the
// impressions are then split across `threads` workers, each writing only
// its own slots, so the result does not depend on the thread count.
inline std::vector<std::vector<double>> score_impressions(const MmRecModel& model, const NewsInputs& inputs,
                                                          const NewsTable& news,
                                                          const std::vector<ImpressionSample>& impressions,
                                                          std::size_t threads = 1) {
  const EncodedNewsTable table = model.encode_all(inputs);
  std::vector<ScoringRequest> requests;
  requests.reserve(impressions.size());
  for (const ImpressionSample& s : impressions) requests.push_back(to_request(s, news, model.config().max_history));
  std::vector<std::vector<double>> out(impressions.size());
  const std::function<void(std::size_t, std::size_t)> work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) out[i] = model.score_request(table, requests[i]);
  };
  threads = std::max<std::size_t>(1, std::min(threads, impressions.size()));
  if (threads == 1) {
    work(0, impressions.size());
    return out;
  }
  std::vector<std::thread> pool;
  const std::size_t chunk = (impressions.size() + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t begin = t * chunk, end = std::min(impressions.size(), begin + chunk);
    if (begin < end) pool.emplace_back([&work, begin, end] { work(begin, end); });
  }
  for (auto& th : pool) th.join();
  return out;
}

inline RunMetrics evaluate_model(const MmRecModel& model, const NewsInputs& inputs, const NewsTable& news,
                                 const std::vector<ImpressionSample>& impressions, std::size_t threads = 1) {
  return metrics_from_scores(score_impressions(model, inputs, news, impressions, threads), impressions);
}

// Metrics over repeated runs. std is the sample standard deviation across
// runs (n - 1 in the denominator; 0 for a single run).
struct MetricReport {
  std::vector<std::uint64_t> seeds;
  std::vector<RunMetrics> runs;

  std::size_t n_impressions() const { return runs.empty() ? 0 : runs.front().n_impressions; }

  double mean(std::size_t metric) const {
    if (runs.empty()) return 0.0;
    double s = 0.0;
    for (const RunMetrics& r : runs) s += r.values[metric];
    return s / static_cast<double>(runs.size());
  }
  double std(std::size_t metric) const {
    if (runs.size() < 2) return 0.0;
    const double mu = mean(metric);
    double s = 0.0;
    for (const RunMetrics& r : runs) s += (r.values[metric] - mu) * (r.values[metric] - mu);
    return std::sqrt(s / static_cast<double>(runs.size() - 1));
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["seeds"] = seeds;
    j["n_impressions"] = n_impressions();
    j["skipped_single_class"] = runs.empty() ? 0 : runs.front().skipped_auc;
    j["skipped_no_click"] = runs.empty() ? 0 : runs.front().skipped_rank;
    for (std::size_t k = 0; k < kMetricNames.size(); ++k) {
      nlohmann::json m;
      m["mean"] = mean(k);
      m["std"] = std(k);
      std::vector<double> per_run;
      for (const RunMetrics& r : runs) per_run.push_back(r.values[k]);
      m["runs"] = per_run;
      j["metrics"][kMetricNames[k]] = m;
    }
    return j;
  }

  // One row, columns AUC, MRR, nDCG@5, nDCG@10, each "mean ± std" in percent.
  std::string table(const std::string& label = "model") const {
    std::string out = pad(label, 14);
    std::string header = pad("", 14);
    for (std::size_t k = 0; k < kMetricNames.size(); ++k) {
      header += pad(kMetricNames[k], 16);
      char cell[64];
      std::snprintf(cell, sizeof cell, "%.2f ± %.2f", 100.0 * mean(k), 100.0 * std(k));
      out += pad(cell, 16);
    }
    return header + "\n" + out + "\n";
  }

 private:
  static std::string pad(std::string s, std::size_t width) {
    // "±" is two bytes but one column
    std::size_t cols = 0;
    for (unsigned char c : s) cols += (c & 0xC0) != 0x80;
    if (cols < width) s.append(width - cols, ' ');
    return s;
  }
};

}  // namespace mmrec
