#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "mmrec/data/behaviors.hpp"
#include "mmrec/data/news.hpp"
#include "mmrec/data/synthetic.hpp"
#include "mmrec/errors.hpp"
#include "mmrec/model/mmrec_model.hpp"

namespace mmrec {

struct TrainingSample {
  std::vector<std::string> history;
  std::string positive;
  std::vector<std::string> negatives;
  bool operator==(const TrainingSample&) const = default;
};

struct SampleSet {
  std::vector<TrainingSample> samples;
  std::size_t skipped_impressions = 0;  // had a click but no negative to pair it with
};

// One sample per clicked candidate, paired with k_neg negatives from the same
// impression: drawn without replacement when the impression has at least
// k_neg of them, uniformly with replacement otherwise.
inline SampleSet build_samples(const std::vector<ImpressionSample>& impressions, std::size_t k_neg,
                               std::uint64_t seed) {
  if (k_neg == 0) throw ValidationError("neg_ratio must be at least 1");
  std::mt19937_64 rng(seed);
  SampleSet out;
  for (const ImpressionSample& imp : impressions) {
    std::vector<std::string> pos, neg;
    for (const Candidate& c : imp.candidates) (c.label ? pos : neg).push_back(c.news_id);
    if (pos.empty()) continue;
    if (neg.empty()) {
      ++out.skipped_impressions;
      continue;
    }
    for (const std::string& p : pos) {
      TrainingSample s;
      s.history = imp.history;
      s.positive = p;
      if (neg.size() >= k_neg) {
        for (std::size_t i : detail::sample_without_replacement(neg.size(), k_neg, rng)) s.negatives.push_back(neg[i]);
      } else {
        std::uniform_int_distribution<std::size_t> pick(0, neg.size() - 1);
        for (std::size_t i = 0; i < k_neg; ++i) s.negatives.push_back(neg[pick(rng)]);
      }
      out.samples.push_back(std::move(s));
    }
  }
  return out;
}

// Candidate 0 is the positive.
inline ScoringRequest to_request(const TrainingSample& s, const NewsTable& news, std::size_t max_history) {
  ScoringRequest r;
  const std::size_t keep = std::min(s.history.size(), max_history);
  for (std::size_t i = s.history.size() - keep; i < s.history.size(); ++i) r.history.push_back(news.index_of(s.history[i]));
  r.candidates.push_back(news.index_of(s.positive));
  for (const std::string& n : s.negatives) r.candidates.push_back(news.index_of(n));
  return r;
}

inline ScoringRequest to_request(const ImpressionSample& s, const NewsTable& news, std::size_t max_history) {
  ScoringRequest r;
  const std::size_t keep = std::min(s.history.size(), max_history);
  for (std::size_t i = s.history.size() - keep; i < s.history.size(); ++i) r.history.push_back(news.index_of(s.history[i]));
  for (const Candidate& c : s.candidates) r.candidates.push_back(news.index_of(c.news_id));
  return r;
}

}  // namespace mmrec
