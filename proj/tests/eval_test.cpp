#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "mmrec/data/dataset.hpp"
#include "mmrec/eval/evaluate.hpp"
#include "mmrec/eval/metrics.hpp"
#include "support/oracles.hpp"

using namespace mmrec;

namespace {

std::vector<int> labels_of(unsigned bits, std::size_t n) {
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = (bits >> i) & 1u;
  return out;
}

}  // namespace

TEST(Auc, Fixtures) {
  EXPECT_EQ(*auc(std::vector<double>{0.9, 0.8, 0.1, 0.2}, std::vector<int>{1, 1, 0, 0}), 1.0);
  EXPECT_EQ(*auc(std::vector<double>{0.3, 0.3, 0.3, 0.3}, std::vector<int>{1, 0, 1, 0}), 0.5);
  EXPECT_EQ(*auc(std::vector<double>{0.9, 0.8, 0.7, 0.6}, std::vector<int>{1, 0, 1, 0}), 0.75);
  EXPECT_EQ(*auc(std::vector<double>{0.1, 0.9}, std::vector<int>{1, 0}), 0.0);
}

TEST(Auc, SingleClassIsUndefined) {
  EXPECT_FALSE(auc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}));
  EXPECT_FALSE(auc(std::vector<double>{0.1, 0.2}, std::vector<int>{0, 0}));
  EXPECT_THROW(auc(std::vector<double>{0.1}, std::vector<int>{1, 0}), DimensionError);
}

TEST(Mrr, Fixtures) {
  EXPECT_EQ(*mrr(std::vector<double>{0.9, 0.5, 0.1}, std::vector<int>{1, 0, 0}), 1.0);
  EXPECT_DOUBLE_EQ(*mrr(std::vector<double>{0.9, 0.5, 0.1}, std::vector<int>{0, 0, 1}), 1.0 / 3.0);
  EXPECT_EQ(*mrr(std::vector<double>{0.9, 0.8, 0.7, 0.6}, std::vector<int>{1, 0, 0, 1}), 0.625);
  EXPECT_FALSE(mrr(std::vector<double>{0.9, 0.8}, std::vector<int>{0, 0}));
}

TEST(Mrr, TiesBreakByInputIndex) {
  EXPECT_EQ(*mrr(std::vector<double>{0.5, 0.5}, std::vector<int>{1, 0}), 1.0);
  EXPECT_EQ(*mrr(std::vector<double>{0.5, 0.5}, std::vector<int>{0, 1}), 0.5);
}

TEST(Ndcg, Fixtures) {
  const std::vector<double> s{0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3};
  EXPECT_EQ(*ndcg_at_k(s, std::vector<int>{1, 0, 0, 0, 0, 0, 0}, 5), 1.0);
  EXPECT_NEAR(*ndcg_at_k(s, std::vector<int>{0, 1, 0, 0, 0, 0, 0}, 5), 1.0 / std::log2(3.0), 1e-12);
  EXPECT_NEAR(*ndcg_at_k(s, std::vector<int>{0, 1, 0, 0, 0, 0, 0}, 5), 0.6309297535714574, 1e-12);
  EXPECT_EQ(*ndcg_at_k(s, std::vector<int>{0, 0, 0, 0, 0, 1, 0}, 5), 0.0);
  EXPECT_GT(*ndcg_at_k(s, std::vector<int>{0, 0, 0, 0, 0, 1, 0}, 10), 0.0);
  EXPECT_FALSE(ndcg_at_k(s, std::vector<int>(7, 0), 5));
}

// Every label pattern with both classes, scores from a small integer set so
// ties are frequent. Exact equality is required.
TEST(MetricOracle, ExhaustiveEnumerationMatchesExactly) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> value(0, 3);
  std::size_t checked = 0;
  for (std::size_t n = 1; n <= 6; ++n) {
    for (unsigned bits = 1; bits < (1u << n); ++bits) {
      const auto labels = labels_of(bits, n);
      for (int rep = 0; rep < 20; ++rep) {
        std::vector<double> s(n);
        for (double& v : s) v = 0.25 * value(rng) + (rep % 2 ? 0.1 * static_cast<double>(value(rng)) : 0.0);
        const bool both = bits != (1u << n) - 1;
        if (both) {
          EXPECT_EQ(*auc(s, labels), oracle::auc_pairs(s, labels));
        }
        EXPECT_EQ(*mrr(s, labels), oracle::mrr_enum(s, labels));
        EXPECT_EQ(*ndcg_at_k(s, labels, 5), oracle::ndcg_enum(s, labels, 5));
        EXPECT_EQ(*ndcg_at_k(s, labels, 10), oracle::ndcg_enum(s, labels, 10));
        ++checked;
      }
    }
  }
  EXPECT_EQ(checked, 20u * (1 + 3 + 7 + 15 + 31 + 63));
}

TEST(MetricProperties, InvariantUnderIncreasingTransforms) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t n = 2 + rep % 20;
    std::vector<double> s(n), t(n), neg(n);
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = normal(rng);
      t[i] = std::exp(2.0 * s[i]) + 3.0;
      neg[i] = -s[i];
      labels[i] = i % 3 == 0;
    }
    EXPECT_EQ(*auc(s, labels), *auc(t, labels));
    EXPECT_EQ(*mrr(s, labels), *mrr(t, labels));
    EXPECT_EQ(*ndcg_at_k(s, labels, 5), *ndcg_at_k(t, labels, 5));
    EXPECT_NEAR(*auc(s, labels), 1.0 - *auc(neg, labels), 1e-15);
    EXPECT_GE(*auc(s, labels), 0.0);
    EXPECT_LE(*ndcg_at_k(s, labels, 10), 1.0);
  }
}

TEST(RunMetrics, MeansAndSkipCounts) {
  std::vector<ImpressionSample> imps(3);
  imps[0].candidates = {{"a", 1}, {"b", 0}};
  imps[1].candidates = {{"a", 0}, {"b", 0}};
  imps[2].candidates = {{"a", 1}, {"b", 1}};
  const RunMetrics m = metrics_from_scores({{0.1, 0.9}, {0.5, 0.2}, {0.3, 0.4}}, imps);
  EXPECT_EQ(m.n_impressions, 3u);
  EXPECT_EQ(m.skipped_auc, 2u);
  EXPECT_EQ(m.skipped_rank, 1u);
  EXPECT_EQ(m.values[0], 0.0);
  EXPECT_EQ(m.values[1], (0.5 + 0.75) / 2.0);
}

TEST(MetricReport, SampleStdAcrossRuns) {
  MetricReport r;
  r.seeds = {1, 2, 3};
  for (double a : {0.6, 0.7, 0.8}) {
    RunMetrics m;
    m.values = {a, a / 2, a / 3, a / 4};
    m.n_impressions = 10;
    r.runs.push_back(m);
  }
  EXPECT_NEAR(r.mean(0), 0.7, 1e-15);
  EXPECT_NEAR(r.std(0), 0.1, 1e-15);
  const auto j = r.to_json();
  EXPECT_EQ(j["metrics"]["AUC"]["runs"].size(), 3u);
  EXPECT_EQ(j["seeds"].size(), 3u);
  EXPECT_EQ(j["n_impressions"], 10);
  const std::string table = r.table("full");
  EXPECT_LT(table.find("AUC"), table.find("MRR"));
  EXPECT_LT(table.find("MRR"), table.find("nDCG@5"));
  EXPECT_LT(table.find("nDCG@5"), table.find("nDCG@10"));
  EXPECT_NE(table.find("70.00 ± 10.00"), std::string::npos);
}

TEST(MetricReport, IdenticalRunsHaveZeroStd) {
  MetricReport r;
  RunMetrics m;
  m.values = {0.61, 0.3, 0.35, 0.4};
  r.runs.assign(5, m);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(r.std(k), 0.0);
}

TEST(MetricReport, RandomScorerSitsAtOneHalf) {
  const SyntheticDataset syn = generate_synthetic(SyntheticConfig{});
  MetricReport r;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<std::vector<double>> scores;
    for (const auto& imp : syn.test) {
      scores.emplace_back();
      for (std::size_t i = 0; i < imp.candidates.size(); ++i) scores.back().push_back(u(rng));
    }
    r.seeds.push_back(seed);
    r.runs.push_back(metrics_from_scores(scores, syn.test));
  }
  EXPECT_NEAR(r.mean(0), 0.5, 0.02);
}

TEST(Evaluate, ThreadCountDoesNotChangeScores) {
  SyntheticConfig sc;
  sc.num_news = 60;
  sc.num_users = 20;
  sc.num_impressions = 40;
  sc.d_img = 8;
  const SyntheticDataset syn = generate_synthetic(sc);
  ModelConfig mc;
  mc.encoder.d = 8;
  mc.encoder.d_img = 8;
  mc.encoder.d_a = 4;
  mc.encoder.heads = 2;
  mc.encoder.n_text_layers = 1;
  const Dataset ds = to_dataset(syn, {mc.encoder.max_title_len, mc.encoder.max_rois});
  const NewsInputs inputs = NewsInputs::prepare(ds.news, mc.encoder);
  const MmRecModel model(mc, ds.vocab.size(), 3);
  const auto one = score_impressions(model, inputs, ds.news, ds.train, 1);
  const auto three = score_impressions(model, inputs, ds.news, ds.train, 3);
  EXPECT_EQ(one, three);
  ASSERT_EQ(one.size(), ds.train.size());
  EXPECT_EQ(one[0].size(), ds.train[0].candidates.size());
}
