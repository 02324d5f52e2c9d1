#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "mmrec/config.hpp"
#include "mmrec/data/dataset.hpp"
#include "mmrec/training/adam.hpp"
#include "mmrec/training/checkpoint.hpp"
#include "mmrec/training/samples.hpp"
#include "mmrec/training/trainer.hpp"

namespace fs = std::filesystem;
using namespace mmrec;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("mmrec_training_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

template <typename Fn>
std::string error_of(Fn fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

ImpressionSample impression(std::size_t pos, std::size_t neg) {
  ImpressionSample s;
  s.impression_id = "I1";
  s.user_id = "U1";
  s.history = {"h1", "h2"};
  for (std::size_t i = 0; i < pos; ++i) s.candidates.push_back({"p" + std::to_string(i), 1});
  for (std::size_t i = 0; i < neg; ++i) s.candidates.push_back({"n" + std::to_string(i), 0});
  return s;
}

ExperimentConfig small_experiment() {
  ExperimentConfig c;
  auto& e = c.model.encoder;
  e.d = 16;
  e.d_img = 8;
  e.d_a = 8;
  e.heads = 2;
  e.n_text_layers = 1;
  e.ffn_mult = 2;
  c.synthetic.num_news = 80;
  c.synthetic.num_users = 30;
  c.synthetic.num_impressions = 120;
  c.train.epochs = 2;
  c.train.batch_size = 16;
  return c;
}

struct SmallRun {
  ExperimentConfig cfg = small_experiment();
  Dataset ds;
  NewsInputs inputs;
  SmallRun() {
    ds = to_dataset(generate_synthetic(cfg.synthetic_config()), cfg.news_limits());
    inputs = NewsInputs::prepare(ds.news, cfg.model.encoder);
  }
  TrainingData data() const { return {&ds.news, &inputs, &ds.train, &ds.dev}; }
};

}  // namespace

TEST(BuildSamples, ExactFillUsesEveryNegative) {
  const SampleSet set = build_samples({impression(1, 4)}, 4, 1);
  ASSERT_EQ(set.samples.size(), 1u);
  const auto& negs = set.samples[0].negatives;
  EXPECT_EQ(std::set<std::string>(negs.begin(), negs.end()), (std::set<std::string>{"n0", "n1", "n2", "n3"}));
  EXPECT_EQ(set.samples[0].positive, "p0");
  EXPECT_EQ(set.samples[0].history, (std::vector<std::string>{"h1", "h2"}));
}

TEST(BuildSamples, ShortImpressionsSampleWithReplacement) {
  const SampleSet set = build_samples({impression(1, 2)}, 4, 1);
  ASSERT_EQ(set.samples.size(), 1u);
  ASSERT_EQ(set.samples[0].negatives.size(), 4u);
  for (const auto& n : set.samples[0].negatives) EXPECT_TRUE(n == "n0" || n == "n1");
}

TEST(BuildSamples, OneSamplePerClick) {
  const SampleSet set = build_samples({impression(2, 6)}, 4, 1);
  ASSERT_EQ(set.samples.size(), 2u);
  EXPECT_EQ(set.samples[0].positive, "p0");
  EXPECT_EQ(set.samples[1].positive, "p1");
}

TEST(BuildSamples, ClicksWithoutNegativesAreSkippedAndCounted) {
  const SampleSet set = build_samples({impression(2, 0), impression(0, 3), impression(1, 1)}, 4, 1);
  EXPECT_EQ(set.samples.size(), 1u);
  EXPECT_EQ(set.skipped_impressions, 1u);
  EXPECT_THROW(build_samples({impression(1, 1)}, 0, 1), ValidationError);
}

TEST(BuildSamples, NegativesDistinctWhenEnoughAndDeterministic) {
  std::mt19937_64 rng(2);
  std::vector<ImpressionSample> imps;
  for (int i = 0; i < 100; ++i) imps.push_back(impression(1 + rng() % 3, 4 + rng() % 10));
  const SampleSet a = build_samples(imps, 4, 9), b = build_samples(imps, 4, 9), c = build_samples(imps, 4, 10);
  EXPECT_EQ(a.samples, b.samples);
  EXPECT_NE(a.samples, c.samples);
  for (const auto& s : a.samples) {
    EXPECT_EQ(std::set<std::string>(s.negatives.begin(), s.negatives.end()).size(), 4u);
  }
}

TEST(NceLoss, Fixtures) {
  EXPECT_NEAR(nce_loss(std::vector<double>(5, 0.7)), std::log(5.0), 1e-15);
  EXPECT_NEAR(nce_loss(std::vector<double>{2.0, 0.0}), std::log1p(std::exp(-2.0)), 1e-15);
  EXPECT_NEAR(nce_loss(std::vector<double>{2.0, 0.0}), 0.12692801104297263, 1e-15);
  EXPECT_LT(nce_loss(std::vector<double>{60.0, 0.0, 0.0, 0.0, 0.0}), 1e-25);
  EXPECT_NEAR(nce_loss(std::vector<double>{1000.0, 1000.0}), std::log(2.0), 1e-12);
}

TEST(NceLoss, MonotoneInEachScore) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> normal(0.0, 2.0);
  for (int rep = 0; rep < 200; ++rep) {
    std::vector<double> s(5);
    for (double& v : s) v = normal(rng);
    const double base = nce_loss(s);
    for (std::size_t i = 0; i < s.size(); ++i) {
      auto bumped = s;
      bumped[i] += 0.1;
      if (i == 0) EXPECT_LE(nce_loss(bumped), base);
      else EXPECT_GE(nce_loss(bumped), base);
    }
  }
}

TEST(NceLoss, TapeAgreesAndPositiveGradientIsPMinusOne) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> normal(0.0, 1.5);
  for (int rep = 0; rep < 50; ++rep) {
    Tensor s = Tensor::zeros({5});
    for (double& v : s.data()) v = normal(rng);
    Parameter p("scores", s);
    Tape t;
    Var loss = softmax_cross_entropy_first(t.parameter(p));
    t.backward(loss);
    EXPECT_NEAR(loss.item(), nce_loss(s.data()), 1e-14);
    double z = 0.0;
    for (double v : s.data()) z += std::exp(v);
    const double p_pos = std::exp(s.data()[0]) / z;
    EXPECT_NEAR(p.grad().data()[0], p_pos - 1.0, 1e-14);
    EXPECT_LE(p.grad().data()[0], 0.0);
  }
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Parameter w("w", Tensor::filled({3}, 2.0));
  w.grad() = Tensor::filled({3}, 1.0);
  AdamConfig cfg;
  cfg.lr = 0.1;
  Adam adam(cfg);
  adam.step({&w});
  for (double v : w.value().data()) EXPECT_NEAR(v - 2.0, -0.1 / (1.0 + 1e-8), 1e-15);
}

TEST(Adam, SecondStepBiasCorrection) {
  // g = +1 then -1: m2 = -0.01, v2 = 0.001999, so m^ = -0.01 / 0.19 and v^ = 1.
  Parameter w("w", Tensor::filled({1}, 0.0));
  AdamConfig cfg;
  cfg.lr = 0.1;
  Adam adam(cfg);
  w.grad() = Tensor::filled({1}, 1.0);
  adam.step({&w});
  const double after_one = w.value().data()[0];
  w.grad() = Tensor::filled({1}, -1.0);
  adam.step({&w});
  const double m_hat = -0.01 / (1.0 - 0.81), v_hat = 0.001999 / (1.0 - 0.999 * 0.999);
  EXPECT_NEAR(w.value().data()[0] - after_one, -0.1 * m_hat / (std::sqrt(v_hat) + 1e-8), 1e-12);
  EXPECT_EQ(adam.step_count(), 2);
}

TEST(Adam, ZeroGradientAndFrozenParametersStayPut) {
  Parameter a("a", Tensor::filled({4}, 1.5)), b("b", Tensor::filled({4}, -0.5), true);
  a.zero_grad();
  b.grad() = Tensor::filled({4}, 3.0);
  Adam adam(AdamConfig{});
  for (int i = 0; i < 3; ++i) adam.step({&a, &b});
  for (double v : a.value().data()) EXPECT_EQ(v, 1.5);
  for (double v : b.value().data()) EXPECT_EQ(v, -0.5);
}

TEST(Adam, NanGradientNamesTheParameter) {
  Parameter a("encoder.text.0.attn.wq", Tensor::filled({2}, 1.0));
  a.grad() = Tensor::filled({2}, 0.0);
  a.grad().data()[1] = std::nan("");
  Adam adam(AdamConfig{});
  const std::string msg = error_of([&] { adam.step({&a}); });
  EXPECT_NE(msg.find("encoder.text.0.attn.wq"), std::string::npos) << msg;
  EXPECT_EQ(a.value().data()[0], 1.0);
}

TEST(Adam, ClipsGlobalNormBeforeTheMoments) {
  // Reference: clip the concatenated gradient to norm 5, then plain Adam.
  Parameter a("a", Tensor::filled({2}, 0.0)), b("b", Tensor::filled({1}, 0.0));
  AdamConfig cfg;
  cfg.lr = 0.01;
  cfg.clip_norm = 5.0;
  Adam adam(cfg);
  std::vector<double> w(3, 0.0), m(3, 0.0), v(3, 0.0);
  const std::vector<std::vector<double>> grads{{6.0, 8.0, 0.0}, {1.0, -2.0, 2.0}, {30.0, 0.0, 40.0}};
  for (std::size_t t = 1; t <= grads.size(); ++t) {
    const auto& g = grads[t - 1];
    a.grad() = Tensor({2}, {g[0], g[1]});
    b.grad() = Tensor({1}, {g[2]});
    const double norm = adam.step({&a, &b});
    EXPECT_NEAR(norm, std::sqrt(g[0] * g[0] + g[1] * g[1] + g[2] * g[2]), 1e-12);
    const double scale = norm > 5.0 ? 5.0 / norm : 1.0;
    for (std::size_t i = 0; i < 3; ++i) {
      const double gi = g[i] * scale;
      m[i] = 0.9 * m[i] + 0.1 * gi;
      v[i] = 0.999 * v[i] + 0.001 * gi * gi;
      w[i] -= 0.01 * (m[i] / (1 - std::pow(0.9, t))) / (std::sqrt(v[i] / (1 - std::pow(0.999, t))) + 1e-8);
    }
  }
  EXPECT_NEAR(a.value().data()[0], w[0], 1e-14);
  EXPECT_NEAR(a.value().data()[1], w[1], 1e-14);
  EXPECT_NEAR(b.value().data()[0], w[2], 1e-14);
}

TEST(Adam, RejectsBadConfig) {
  AdamConfig cfg;
  cfg.lr = 0.0;
  EXPECT_THROW(Adam{cfg}, ValidationError);
  cfg.lr = 1e-3;
  cfg.beta1 = 1.0;
  EXPECT_THROW(Adam{cfg}, ValidationError);
}

TEST(Train, InitialLossNearUniformAndDecreasing) {
  SmallRun run;
  run.cfg.train.epochs = 4;
  run.cfg.train.adam.lr = 3e-3;
  MmRecModel model(run.cfg.model, run.ds.vocab.size(), 1);
  const TrainResult r = train(model, run.data(), run.cfg.train);
  EXPECT_NEAR(r.initial_loss, std::log(5.0), 0.1);
  ASSERT_EQ(r.log.size(), 4u);
  EXPECT_LT(r.log.back().loss, r.log.front().loss);
  EXPECT_GT(r.steps, 0);
  EXPECT_GE(r.best_epoch, 1u);
  EXPECT_EQ(r.best_parameters.size(), model.parameters().size());
}

TEST(Train, SameSeedIsBitIdentical) {
  SmallRun run;
  auto once = [&](std::uint64_t seed) {
    MmRecModel model(run.cfg.model, run.ds.vocab.size(), seed);
    TrainConfig tc = run.cfg.train;
    tc.seed = seed;
    const TrainResult r = train(model, run.data(), tc);
    std::string log;
    for (const auto& e : r.log) log += e.to_json().dump() + "\n";
    return std::make_pair(log, snapshot(model.parameters()));
  };
  const auto a = once(3), b = once(3), c = once(4);
  EXPECT_EQ(a.first, b.first);
  ASSERT_EQ(a.second.size(), b.second.size());
  for (std::size_t i = 0; i < a.second.size(); ++i) EXPECT_EQ(values(a.second[i]), values(b.second[i]));
  EXPECT_NE(a.first, c.first);
}

TEST(Train, FrozenLayersDoNotMove) {
  SmallRun run;
  run.cfg.model.encoder.freeze_below = 1;
  run.cfg.train.epochs = 1;
  MmRecModel model(run.cfg.model, run.ds.vocab.size(), 1);
  const auto before = snapshot(model.parameters());
  train(model, run.data(), run.cfg.train);
  std::size_t frozen = 0, moved = 0;
  for (std::size_t i = 0; i < model.parameters().size(); ++i) {
    const Parameter& p = model.parameters()[i];
    if (p.frozen()) {
      ++frozen;
      EXPECT_EQ(values(p.value()), values(before[i])) << p.name();
    } else {
      moved += values(p.value()) != values(before[i]);
    }
  }
  EXPECT_GT(frozen, 0u);
  EXPECT_GT(moved, 0u);
}

TEST(Train, LogIsJsonLines) {
  SmallRun run;
  MmRecModel model(run.cfg.model, run.ds.vocab.size(), 1);
  std::vector<std::size_t> seen;
  const TrainResult r = train(model, run.data(), run.cfg.train, [&](const EpochLog& e) { seen.push_back(e.epoch); });
  EXPECT_EQ(seen, (std::vector<std::size_t>{1, 2}));
  const fs::path dir = scratch("log");
  write_log((dir / "train_log.jsonl").string(), r.log);
  std::ifstream in(dir / "train_log.jsonl");
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["epoch"], ++n);
    EXPECT_TRUE(j.contains("loss"));
    EXPECT_TRUE(j["dev"].contains("AUC"));
  }
  EXPECT_EQ(n, 2u);
}

TEST(Config, RoundTripsAndEchoesDefaults) {
  ExperimentConfig c = small_experiment();
  c.model.variant = Variant::kVanillaAttn;
  c.seeds = {7, 8};
  const auto j = c.to_json();
  const ExperimentConfig back = ExperimentConfig::from_json(j);
  EXPECT_EQ(back.to_json(), j);
  EXPECT_EQ(j["variant"], "vanilla-attn");
  const auto defaults = ExperimentConfig::from_json(nlohmann::json::object()).to_json();
  EXPECT_EQ(defaults["d"], 64);
  EXPECT_EQ(defaults["lr"], 1e-3);
  EXPECT_EQ(defaults["neg_ratio"], 4);
  EXPECT_EQ(defaults["synthetic_image_only_fraction"], 0.5);
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  EXPECT_NE(error_of([] { ExperimentConfig::from_json({{"dd", 3}}); }).find("unknown config key 'dd'"),
            std::string::npos);
  EXPECT_NE(error_of([] { ExperimentConfig::from_json({{"d", -4}}); }).find("'d'"), std::string::npos);
  EXPECT_THROW(ExperimentConfig::from_json({{"lr", "fast"}}), ValidationError);
  EXPECT_THROW(ExperimentConfig::from_json({{"variant", "both"}}), ValidationError);
  EXPECT_THROW(ExperimentConfig::from_json({{"d", 30}, {"heads", 4}}), ValidationError);
  EXPECT_THROW(ExperimentConfig::from_json({{"seeds", nlohmann::json::array()}}), ValidationError);
  EXPECT_THROW(ExperimentConfig::from_json(nlohmann::json::array()), ValidationError);
}

TEST(Checkpoint, RoundTripReproducesScores) {
  SmallRun run;
  MmRecModel model(run.cfg.model, run.ds.vocab.size(), 5);
  run.cfg.train.epochs = 1;
  train(model, run.data(), run.cfg.train);
  const fs::path dir = scratch("roundtrip");
  save_checkpoint(dir, model, run.cfg, run.ds.vocab, 42, {{"AUC", 0.61}});
  const LoadedCheckpoint loaded = load_checkpoint(dir);
  EXPECT_EQ(loaded.step, 42);
  EXPECT_EQ(loaded.metrics["AUC"], 0.61);
  EXPECT_EQ(loaded.vocab, run.ds.vocab);
  EXPECT_EQ(loaded.config.to_json(), run.cfg.to_json());
  const auto before = score_impressions(model, run.inputs, run.ds.news, run.ds.test);
  const auto after = score_impressions(*loaded.model, run.inputs, run.ds.news, run.ds.test);
  double worst = 0.0;
  for (std::size_t i = 0; i < before.size(); ++i) {
    for (std::size_t k = 0; k < before[i].size(); ++k) worst = std::max(worst, std::abs(before[i][k] - after[i][k]));
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(Checkpoint, NamedLoadErrors) {
  SmallRun run;
  MmRecModel model(run.cfg.model, run.ds.vocab.size(), 5);
  const fs::path dir = scratch("errors");
  save_checkpoint(dir, model, run.cfg, run.ds.vocab);
  const CheckpointFiles files{dir};
  std::ifstream in(files.manifest());
  const nlohmann::json manifest = nlohmann::json::parse(in);
  auto write_manifest = [&](const nlohmann::json& m) { std::ofstream(files.manifest(), std::ios::trunc) << m.dump(); };

  nlohmann::json missing = manifest;
  const std::string dropped = missing["parameters"][3]["name"];
  missing["parameters"].erase(3);
  write_manifest(missing);
  EXPECT_NE(error_of([&] { load_checkpoint(dir); }).find("lacks parameter '" + dropped + "'"), std::string::npos);

  nlohmann::json extra = manifest;
  extra["parameters"].push_back({{"name", "ghost"}, {"shape", {1}}, {"offset", 0}});
  write_manifest(extra);
  EXPECT_NE(error_of([&] { load_checkpoint(dir); }).find("'ghost'"), std::string::npos);

  nlohmann::json dup = manifest;
  dup["parameters"].push_back(dup["parameters"][0]);
  write_manifest(dup);
  EXPECT_NE(error_of([&] { load_checkpoint(dir); }).find("appears twice"), std::string::npos);

  nlohmann::json hash = manifest;
  hash["vocab_hash"] = "0000000000000000";
  write_manifest(hash);
  EXPECT_NE(error_of([&] { load_checkpoint(dir); }).find("vocabulary hash"), std::string::npos);

  write_manifest(manifest);
  EXPECT_NO_THROW(load_checkpoint(dir));

  ExperimentConfig wider = run.cfg;
  wider.model.encoder.d = 32;
  MmRecModel other(wider.model, run.ds.vocab.size(), 1);
  const std::string shape_err = error_of([&] { load_parameters(dir, other); });
  EXPECT_NE(shape_err.find("has shape"), std::string::npos) << shape_err;
  EXPECT_NE(shape_err.find("parameter '"), std::string::npos) << shape_err;

  std::fstream blob(files.params(), std::ios::in | std::ios::out | std::ios::binary);
  blob.seekp(0);
  blob.write("XXXX", 4);
  blob.close();
  const std::string magic = error_of([&] { load_checkpoint(dir); });
  EXPECT_NE(magic.find("bad magic"), std::string::npos) << magic;

  fs::resize_file(files.params(), 10);
  EXPECT_NE(error_of([&] { load_checkpoint(dir); }).find("truncated header"), std::string::npos);

  std::ofstream(files.manifest(), std::ios::trunc) << "{not json";
  EXPECT_THROW(load_checkpoint(dir), CheckpointError);
  fs::remove(files.manifest());
  EXPECT_THROW(load_checkpoint(dir), CheckpointError);
}

TEST(Checkpoint, RandomManifestCorruptionNeverCrashes) {
  SmallRun run;
  MmRecModel model(run.cfg.model, run.ds.vocab.size(), 5);
  const fs::path dir = scratch("fuzz");
  save_checkpoint(dir, model, run.cfg, run.ds.vocab);
  const CheckpointFiles files{dir};
  std::ifstream in(files.manifest());
  const std::string original((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::ifstream pin(files.params(), std::ios::binary);
  const std::string params((std::istreambuf_iterator<char>(pin)), std::istreambuf_iterator<char>());
  std::mt19937_64 rng(8);
  for (int rep = 0; rep < 200; ++rep) {
    std::string m = original, p = params;
    std::string& target = rep % 2 ? m : p;
    const std::size_t limit = rep % 2 ? target.size() : 16;  // params: header bytes only
    for (int k = 0; k < 3; ++k) target[rng() % limit] = static_cast<char>(rng());
    std::ofstream(files.manifest(), std::ios::trunc) << m;
    std::ofstream(files.params(), std::ios::trunc | std::ios::binary) << p;
    try {
      load_checkpoint(dir);
    } catch (const Error&) {
    }
  }
}
