#pragma once

#include <algorithm>
#include <vector>

#include "mmrec/autodiff/ops.hpp"

namespace mmrec {

// Candidate-aware attention over the clicked news. Rows of C_t / C_p are
// candidates, rows of R_t / R_p are clicked news; `mask` flags the valid
// clicked rows. Every candidate gets its own weight rows, so the user
// embedding below is candidate-specific.
template <class T>
struct BasicCrossmodalWeights {
  BasicVar<T> tt, tp, pt, pp;  // each [C x P]
};

using CrossmodalWeights = BasicCrossmodalWeights<double>;

inline bool any_valid(const Mask& mask, std::size_t n) {
  if (n == 0) return false;
  return mask.empty() || std::any_of(mask.begin(), mask.end(), [](auto m) { return m != 0; });
}

// Masked softmax along each row of a [C x P] matrix.
template <class T>
inline BasicVar<T> row_softmax(BasicVar<T> logits, const Mask& mask) {
  const std::size_t c = logits.shape()[0], p = logits.shape()[1];
  std::vector<Segment> rows;
  Mask tiled;
  for (std::size_t i = 0; i < c; ++i) {
    rows.push_back({i * p, (i + 1) * p});
    if (!mask.empty()) tiled.insert(tiled.end(), mask.begin(), mask.end());
  }
  return reshape(segment_softmax(reshape(logits, {c * p}), std::move(rows), tiled), {c, p});
}

// Row i of the result is a_i . b_i.
template <class T>
inline BasicVar<T> row_dot(BasicVar<T> a, BasicVar<T> b) {
  const std::size_t d = a.shape()[1];
  return matmul(mul(a, b), a.tape().constant(Tensor::filled({d}, 1.0)));
}

// a^{t,t} = softmax(R^t r^t_c), a^{t,p} = softmax(R^p r^t_c),
// a^{p,t} = softmax(R^t r^p_c), a^{p,p} = softmax(R^p r^p_c), raw inner
// products; `scale` multiplies the logits and is 1 unless asked otherwise.
template <class T>
inline BasicCrossmodalWeights<T> crossmodal_weights(BasicVar<T> r_t, BasicVar<T> r_p, const Mask& mask, BasicVar<T> c_t, BasicVar<T> c_p,
                                            double scale = 1.0) {
  auto attend = [&](BasicVar<T> cand, BasicVar<T> clicked) {
    BasicVar<T> logits = matmul_nt(cand, clicked);
    return row_softmax(scale == 1.0 ? logits : mmrec::scale(logits, scale), mask);
  };
  return {attend(c_t, r_t), attend(c_t, r_p), attend(c_p, r_t), attend(c_p, r_p)};
}

// u = R^p (a^{t,p} + a^{p,p}) + R^t (a^{t,t} + a^{p,t}), one row per candidate.
template <class T>
inline BasicVar<T> user_embedding(BasicVar<T> r_t, BasicVar<T> r_p, const BasicCrossmodalWeights<T>& w) {
  return add(matmul(add(w.tp, w.pp), r_p), matmul(add(w.tt, w.pt), r_t));
}

// y = r^t_c . u + r^p_c . u for each candidate row.
template <class T>
inline BasicVar<T> click_scores(BasicVar<T> c_t, BasicVar<T> c_p, BasicVar<T> u) { return row_dot(add(c_t, c_p), u); }

struct UserState {
  Tensor r_t;  // [P x d]
  Tensor r_p;  // [P x d]
  Mask mask;   // empty = all valid
  std::size_t size() const { return r_t.shape().empty() ? 0 : r_t.shape()[0]; }
};

struct NewsEncoding {
  Tensor r_t;  // [d]
  Tensor r_p;  // [d]
};

struct RankedCandidate {
  std::size_t index;
  double score;
};

// Descending score; equal scores keep input order.
inline std::vector<RankedCandidate> rank_by_score(const std::vector<double>& scores) {
  std::vector<RankedCandidate> out;
  for (std::size_t i = 0; i < scores.size(); ++i) out.push_back({i, scores[i]});
  std::stable_sort(out.begin(), out.end(),
                   [](const RankedCandidate& a, const RankedCandidate& b) { return a.score > b.score; });
  return out;
}

// Scores of every candidate against one user state. An empty history gives
// u = 0 and therefore a score of 0 for every candidate.
inline std::vector<double> score_candidates(const UserState& state, const std::vector<NewsEncoding>& candidates,
                                            double scale = 1.0) {
  if (candidates.empty()) return {};
  if (!any_valid(state.mask, state.size())) return std::vector<double>(candidates.size(), 0.0);
  const std::size_t d = candidates.front().r_t.size();
  std::vector<double> ct, cp;
  for (const NewsEncoding& c : candidates) {
    if (c.r_t.size() != d || c.r_p.size() != d) throw DimensionError("candidate encodings differ in width");
    ct.insert(ct.end(), c.r_t.data().begin(), c.r_t.data().end());
    cp.insert(cp.end(), c.r_p.data().begin(), c.r_p.data().end());
  }
  Tape t(GradMode::kInference);
  const std::size_t n = candidates.size();
  Var c_t = t.constant(Tensor({n, d}, std::move(ct)));
  Var c_p = t.constant(Tensor({n, d}, std::move(cp)));
  Var r_t = t.constant(state.r_t), r_p = t.constant(state.r_p);
  Var y = click_scores(c_t, c_p, user_embedding(r_t, r_p, crossmodal_weights(r_t, r_p, state.mask, c_t, c_p, scale)));
  return {y.value().begin(), y.value().end()};
}

inline std::vector<RankedCandidate> rank_candidates(const UserState& state,
                                                    const std::vector<NewsEncoding>& candidates, double scale = 1.0) {
  return rank_by_score(score_candidates(state, candidates, scale));
}

}  // namespace mmrec
