#pragma once

// Scalar-loop reference implementations used by the unit tests and the
// acceptance binary. Nothing here shares code with the tensorized paths.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

namespace mmrec::oracle {

using Rows = std::vector<std::vector<double>>;

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// exp-normalize over the valid entries; invalid entries get 0.
inline std::vector<double> softmax(const std::vector<double>& logits, const std::vector<std::uint8_t>& valid) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (valid[i]) mx = std::max(mx, logits[i]);
  }
  std::vector<double> out(logits.size(), 0.0);
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (valid[i]) z += out[i] = std::exp(logits[i] - mx);
  }
  for (double& v : out) v /= z;
  return out;
}

struct CandidateScore {
  std::vector<double> a_tt, a_tp, a_pt, a_pp, u;
  double score = 0.0;
};

// One candidate (ct, cp) against clicked rows rt, rp.
inline CandidateScore score(const Rows& rt, const Rows& rp, const std::vector<std::uint8_t>& valid,
                            const std::vector<double>& ct, const std::vector<double>& cp) {
  const std::size_t p = rt.size(), d = ct.size();
  auto attend = [&](const std::vector<double>& c, const Rows& r) {
    std::vector<double> logits(p);
    for (std::size_t i = 0; i < p; ++i) logits[i] = dot(r[i], c);
    return softmax(logits, valid);
  };
  CandidateScore s;
  s.a_tt = attend(ct, rt);
  s.a_tp = attend(ct, rp);
  s.a_pt = attend(cp, rt);
  s.a_pp = attend(cp, rp);
  s.u.assign(d, 0.0);
  for (std::size_t i = 0; i < p; ++i) {
    for (std::size_t k = 0; k < d; ++k) {
      s.u[k] += rp[i][k] * (s.a_tp[i] + s.a_pp[i]) + rt[i][k] * (s.a_tt[i] + s.a_pt[i]);
    }
  }
  for (std::size_t k = 0; k < d; ++k) s.score += ct[k] * s.u[k] + cp[k] * s.u[k];
  return s;
}

// Ranking metrics by enumeration: every positive/negative pair for AUC,
// pairwise counting for ranks, every permutation for the ideal DCG.
inline double auc_pairs(const std::vector<double>& s, const std::vector<int>& labels) {
  double hits = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (!labels[i] || labels[j]) continue;
      ++pairs;
      if (s[i] > s[j]) hits += 1.0;
      else if (s[i] == s[j]) hits += 0.5;
    }
  }
  return hits / static_cast<double>(pairs);
}

// 1-based rank of item i: higher scores first, equal scores by input index.
inline std::size_t rank_of(const std::vector<double>& s, std::size_t i) {
  std::size_t r = 1;
  for (std::size_t j = 0; j < s.size(); ++j) r += s[j] > s[i] || (s[j] == s[i] && j < i);
  return r;
}

inline double mrr_enum(const std::vector<double>& s, const std::vector<int>& labels) {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!labels[i]) continue;
    sum += 1.0 / static_cast<double>(rank_of(s, i));
    ++n;
  }
  return sum / static_cast<double>(n);
}

inline double dcg_of_order(const std::vector<std::size_t>& order, const std::vector<int>& labels, std::size_t k) {
  double dcg = 0.0;
  for (std::size_t pos = 1; pos <= std::min(k, order.size()); ++pos) {
    if (labels[order[pos - 1]]) dcg += 1.0 / std::log2(static_cast<double>(pos) + 1.0);
  }
  return dcg;
}

inline double ndcg_enum(const std::vector<double>& s, const std::vector<int>& labels, std::size_t k) {
  std::vector<std::size_t> order(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) order[rank_of(s, i) - 1] = i;
  const double dcg = dcg_of_order(order, labels, k);
  std::vector<std::size_t> perm(s.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  double ideal = 0.0;
  do {
    ideal = std::max(ideal, dcg_of_order(perm, labels, k));
  } while (std::next_permutation(perm.begin(), perm.end()));
  return dcg / ideal;
}

}  // namespace mmrec::oracle
