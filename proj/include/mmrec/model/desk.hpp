#pragma once

#include <memory>
#include <random>

#include "mmrec/autodiff/grad_check.hpp"
#include "mmrec/data/vocabulary.hpp"
#include "mmrec/model/mmrec_model.hpp"

namespace mmrec {

// The smallest input that exercises every trainable path of the model: two
// news items (one with two ROIs, one without an image so the placeholder is
// used), both clicked, and scored as positive/negative candidates. Multi-row
// titles and ROI sets keep every attention softmax non-degenerate.
struct GradCheckFixture {
  NewsTable news;
  NewsInputs inputs;
  ScoringRequest request;
  std::unique_ptr<MmRecModel> model;
};

inline std::shared_ptr<GradCheckFixture> make_grad_check_fixture(const ModelConfig& cfg, std::uint64_t seed) {
  auto f = std::make_shared<GradCheckFixture>();
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t d_img = cfg.encoder.d_img;

  NewsRecord a;
  a.news_id = "A";
  a.tokens = {"alpha", "beta", "gamma"};
  a.feat_dim = d_img;
  a.has_image = true;
  for (std::size_t i = 0; i < 2 * d_img; ++i) a.roi_features.push_back(static_cast<float>(normal(rng)));
  a.roi_boxes = {Box{0.1, 0.2, 0.6, 0.7}, Box{0.3, 0.1, 0.9, 0.5}};
  NewsRecord b;
  b.news_id = "B";
  b.tokens = {"beta", "delta"};
  b.feat_dim = d_img;
  f->news.add(a);
  f->news.add(b);
  const Vocabulary vocab = build_vocab(f->news, 1);
  assign_token_ids(f->news, vocab);
  f->inputs = NewsInputs::prepare(f->news, cfg.encoder);
  f->request = {{0, 1}, {0, 1}};
  f->model = std::make_unique<MmRecModel>(cfg, vocab.size(), seed);
  // Put the lower-scoring item first (the positive) so the loss gradient
  // is not already saturated.
  Tape probe(GradMode::kInference);
  Var y = f->model->batch_scores(probe, f->inputs, std::span(&f->request, 1));
  if (y.value()[0] > y.value()[1]) std::swap(f->request.candidates[0], f->request.candidates[1]);
  return f;
}

inline GradCheckProblem model_grad_check_problem(const ModelConfig& cfg, std::uint64_t seed) {
  auto f = make_grad_check_fixture(cfg, seed);
  GradCheckProblem p;
  p.parameters = f->model->parameters().all();
  GradCheckFixture* raw = f.get();
  auto loss = [raw](auto& t) {
    const ScoringRequest r = raw->request;
    return softmax_cross_entropy_first(raw->model->batch_scores(t, raw->inputs, std::span(&r, 1)));
  };
  p.loss = loss;
  p.loss_extended = loss;
  p.owner = f;
  return p;
}

}  // namespace mmrec
