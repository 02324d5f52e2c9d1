#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "mmrec/errors.hpp"

namespace mmrec {

namespace detail {

inline void require_same_length(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw DimensionError("scores and labels differ in length");
}

// rank[i] = 1-based position of item i after a stable sort by descending
// score, so equal scores keep input order.
inline std::vector<std::size_t> ranks_desc(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<std::size_t> rank(scores.size());
  for (std::size_t pos = 0; pos < order.size(); ++pos) rank[order[pos]] = pos + 1;
  return rank;
}

}  // namespace detail

// Probability that a random positive outscores a random negative, ties
// counted as one half. Computed from average ranks. nullopt when the
// impression holds a single class.
inline std::optional<double> auc(std::span<const double> scores, std::span<const int> labels) {
  detail::require_same_length(scores, labels);
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1 .. j
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]]) {
        pos_rank_sum += avg_rank;
        ++pos;
      }
    }
    i = j;
  }
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) return std::nullopt;
  const double p = static_cast<double>(pos);
  return (pos_rank_sum - p * (p + 1.0) / 2.0) / (p * static_cast<double>(neg));
}

// Mean of 1/rank over all positives.
inline std::optional<double> mrr(std::span<const double> scores, std::span<const int> labels) {
  detail::require_same_length(scores, labels);
  const auto rank = detail::ranks_desc(scores);
  double sum = 0.0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!labels[i]) continue;
    sum += 1.0 / static_cast<double>(rank[i]);
    ++pos;
  }
  if (pos == 0) return std::nullopt;
  return sum / static_cast<double>(pos);
}

inline std::optional<double> ndcg_at_k(std::span<const double> scores, std::span<const int> labels, std::size_t k) {
  detail::require_same_length(scores, labels);
  const auto rank = detail::ranks_desc(scores);
  std::vector<int> ranked(scores.size(), 0);
  std::size_t pos = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    ranked[rank[i] - 1] = labels[i] ? 1 : 0;
    pos += labels[i] != 0;
  }
  if (pos == 0) return std::nullopt;
  double dcg = 0.0, ideal = 0.0;
  for (std::size_t i = 0; i < std::min(k, ranked.size()); ++i) {
    const double discount = std::log2(static_cast<double>(i) + 2.0);
    if (ranked[i]) dcg += 1.0 / discount;
    if (i < pos) ideal += 1.0 / discount;
  }
  return dcg / ideal;
}

}  // namespace mmrec
