#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "mmrec/data/behaviors.hpp"
#include "mmrec/data/news.hpp"
#include "mmrec/data/vocabulary.hpp"
#include "mmrec/errors.hpp"

namespace mmrec {

// Planted-signal click log. Each topic owns a random unit image centroid and
// a set of title words; users like two topics and click on-topic candidates
// with probability `pos_rate_on_topic`, others with `pos_rate_off_topic`.
// A fraction `image_only_fraction` of news with images gets a title made
// only of common words, so their topic is visible solely in the ROIs.
struct SyntheticConfig {
  std::size_t num_topics = 8;
  std::size_t topic_words_per_topic = 12;
  std::size_t common_words = 60;
  std::size_t num_news = 400;
  std::size_t num_users = 300;
  std::size_t num_impressions = 2000;
  std::size_t d_img = 64;
  std::size_t max_rois = 4;
  double roi_noise_sigma = 0.1;
  double image_only_fraction = 0.5;
  double no_image_fraction = 0.2;
  double pos_rate_on_topic = 0.12;
  double pos_rate_off_topic = 0.01;
  double topic_word_prob = 0.5;
  std::size_t title_min_len = 4;
  std::size_t title_max_len = 8;
  std::size_t history_min = 3;
  std::size_t history_max = 10;
  std::size_t candidates_min = 15;
  std::size_t candidates_max = 25;
  double train_fraction = 0.8;
  double dev_fraction = 0.1;
  std::uint64_t seed = 1;

  void validate() const {
    auto fraction = [](double v, const char* name) {
      if (!(v >= 0.0 && v <= 1.0)) throw ValidationError(std::string(name) + " must lie in [0, 1]");
    };
    fraction(image_only_fraction, "image_only_fraction");
    fraction(no_image_fraction, "no_image_fraction");
    fraction(pos_rate_on_topic, "pos_rate_on_topic");
    fraction(pos_rate_off_topic, "pos_rate_off_topic");
    fraction(topic_word_prob, "topic_word_prob");
    fraction(train_fraction, "train_fraction");
    fraction(dev_fraction, "dev_fraction");
    if (train_fraction + dev_fraction > 1.0) throw ValidationError("train_fraction + dev_fraction exceeds 1");
    if (!(pos_rate_on_topic > pos_rate_off_topic)) {
      throw ValidationError("pos_rate_on_topic must exceed pos_rate_off_topic");
    }
    if (num_topics < 2) throw ValidationError("num_topics must be at least 2");
    if (!topic_words_per_topic || !common_words || !num_news || !num_users || !num_impressions || !d_img ||
        !max_rois || !title_min_len || !history_min || !candidates_min) {
      throw ValidationError("synthetic counts must be positive");
    }
    if (title_min_len > title_max_len || history_min > history_max || candidates_min > candidates_max) {
      throw ValidationError("synthetic length ranges must satisfy min <= max");
    }
    if (candidates_max > num_news) throw ValidationError("candidates_max exceeds num_news");
    if (!(roi_noise_sigma >= 0.0)) throw ValidationError("roi_noise_sigma must be non-negative");
  }
};

struct SyntheticDataset {
  NewsTable news;
  std::vector<ImpressionSample> train, dev, test;
  std::vector<std::size_t> news_topic;  // indexed like `news`
  std::vector<std::array<std::size_t, 2>> user_topics;
};

// CTR implied by the configuration: a uniformly drawn candidate matches one
// of the user's two topics with probability 2 / num_topics.
inline double expected_ctr(const SyntheticConfig& cfg) {
  const double match = 2.0 / static_cast<double>(cfg.num_topics);
  return match * cfg.pos_rate_on_topic + (1.0 - match) * cfg.pos_rate_off_topic;
}

namespace detail {

inline std::string padded_id(char prefix, std::size_t i, std::size_t width = 5) {
  std::string digits = std::to_string(i);
  if (digits.size() < width) digits.insert(0, width - digits.size(), '0');
  return prefix + digits;
}

// k distinct indices from [0, n), in draw order.
inline std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  std::vector<std::size_t> pool(n);
  for (std::size_t i = 0; i < n; ++i) pool[i] = i;
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(k);
  return pool;
}

}  // namespace detail

inline SyntheticDataset generate_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto uniform_size = [&rng](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  auto uniform_real = [&rng](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  auto bernoulli = [&rng](double p) { return std::bernoulli_distribution(p)(rng); };

  std::vector<std::vector<double>> centroids(cfg.num_topics, std::vector<double>(cfg.d_img));
  for (auto& c : centroids) {
    double norm = 0.0;
    for (double& v : c) {
      v = normal(rng);
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (double& v : c) v /= norm;
  }

  SyntheticDataset ds;
  std::vector<std::vector<std::size_t>> by_topic(cfg.num_topics);
  for (std::size_t i = 0; i < cfg.num_news; ++i) {
    NewsRecord r;
    r.news_id = detail::padded_id('N', i + 1);
    const std::size_t topic = uniform_size(0, cfg.num_topics - 1);
    r.has_image = !bernoulli(cfg.no_image_fraction);
    const bool common_only = r.has_image && bernoulli(cfg.image_only_fraction);
    const std::size_t len = uniform_size(cfg.title_min_len, cfg.title_max_len);
    bool any_topic_word = false;
    for (std::size_t k = 0; k < len; ++k) {
      if (!common_only && bernoulli(cfg.topic_word_prob)) {
        r.tokens.push_back("t" + std::to_string(topic) + "w" +
                           std::to_string(uniform_size(0, cfg.topic_words_per_topic - 1)));
        any_topic_word = true;
      } else {
        r.tokens.push_back("c" + std::to_string(uniform_size(0, cfg.common_words - 1)));
      }
    }
    if (!common_only && !any_topic_word) {
      r.tokens[uniform_size(0, len - 1)] =
          "t" + std::to_string(topic) + "w" + std::to_string(uniform_size(0, cfg.topic_words_per_topic - 1));
    }
    for (std::size_t k = 0; k < r.tokens.size(); ++k) r.title += (k ? " " : "") + r.tokens[k];
    if (r.has_image) {
      r.feat_dim = cfg.d_img;
      const std::size_t rois = uniform_size(1, cfg.max_rois);
      for (std::size_t k = 0; k < rois; ++k) {
        for (std::size_t c = 0; c < cfg.d_img; ++c) {
          r.roi_features.push_back(static_cast<float>(centroids[topic][c] + cfg.roi_noise_sigma * normal(rng)));
        }
        const double x1 = uniform_real(0.0, 0.7), y1 = uniform_real(0.0, 0.7);
        const double w = uniform_real(0.1, 0.3), h = uniform_real(0.1, 0.3);
        r.roi_boxes.push_back({static_cast<float>(x1), static_cast<float>(y1), static_cast<float>(x1 + w),
                               static_cast<float>(y1 + h)});
      }
    } else {
      r.feat_dim = cfg.d_img;
    }
    by_topic[topic].push_back(i);
    ds.news_topic.push_back(topic);
    ds.news.add(std::move(r));
  }

  struct User {
    std::array<std::size_t, 2> topics;
    std::vector<std::string> history;
  };
  std::vector<User> users(cfg.num_users);
  for (User& u : users) {
    u.topics[0] = uniform_size(0, cfg.num_topics - 1);
    do {
      u.topics[1] = uniform_size(0, cfg.num_topics - 1);
    } while (u.topics[1] == u.topics[0]);
    std::vector<std::size_t> liked = by_topic[u.topics[0]];
    liked.insert(liked.end(), by_topic[u.topics[1]].begin(), by_topic[u.topics[1]].end());
    const std::size_t len = std::min(uniform_size(cfg.history_min, cfg.history_max), liked.size());
    for (std::size_t k : detail::sample_without_replacement(liked.size(), len, rng)) {
      u.history.push_back(ds.news[liked[k]].news_id);
    }
    ds.user_topics.push_back(u.topics);
  }

  std::vector<ImpressionSample> all;
  all.reserve(cfg.num_impressions);
  for (std::size_t i = 0; i < cfg.num_impressions; ++i) {
    ImpressionSample s;
    s.impression_id = detail::padded_id('I', i + 1, 6);
    const std::size_t user = uniform_size(0, cfg.num_users - 1);
    s.user_id = detail::padded_id('U', user + 1);
    s.history = users[user].history;
    const std::size_t count = uniform_size(cfg.candidates_min, cfg.candidates_max);
    for (std::size_t n : detail::sample_without_replacement(cfg.num_news, count, rng)) {
      const std::size_t topic = ds.news_topic[n];
      const bool liked = topic == users[user].topics[0] || topic == users[user].topics[1];
      const bool click = bernoulli(liked ? cfg.pos_rate_on_topic : cfg.pos_rate_off_topic);
      s.candidates.push_back({ds.news[n].news_id, click ? 1 : 0});
    }
    all.push_back(std::move(s));
  }
  const auto n_train = static_cast<std::size_t>(std::floor(cfg.train_fraction * static_cast<double>(all.size())));
  const auto n_dev = static_cast<std::size_t>(std::floor(cfg.dev_fraction * static_cast<double>(all.size())));
  ds.train.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_train));
  ds.dev.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train),
                all.begin() + static_cast<std::ptrdiff_t>(n_train + n_dev));
  ds.test.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train + n_dev), all.end());
  return ds;
}

struct DatasetFiles {
  std::filesystem::path dir;
  std::filesystem::path news() const { return dir / "news.jsonl"; }
  std::filesystem::path roi() const { return dir / "roi.mmrf"; }
  std::filesystem::path behaviors(const std::string& split) const { return dir / ("behaviors_" + split + ".tsv"); }
  std::filesystem::path vocab() const { return dir / "vocab.txt"; }
};

inline void write_dataset(const std::filesystem::path& dir, const SyntheticDataset& ds) {
  std::filesystem::create_directories(dir);
  const DatasetFiles files{dir};
  write_news(files.news(), files.roi(), ds.news);
  write_behaviors(files.behaviors("train"), ds.train);
  write_behaviors(files.behaviors("dev"), ds.dev);
  write_behaviors(files.behaviors("test"), ds.test);
  build_vocab(ds.news, 1).save(files.vocab());
}

}  // namespace mmrec
