#pragma once

#include <filesystem>
#include <vector>

#include "mmrec/data/behaviors.hpp"
#include "mmrec/data/news.hpp"
#include "mmrec/data/synthetic.hpp"
#include "mmrec/data/vocabulary.hpp"

namespace mmrec {

// Everything a training or evaluation run reads from a data directory.
struct Dataset {
  NewsTable news;
  Vocabulary vocab;
  std::vector<ImpressionSample> train, dev, test;
};

// Loads news.jsonl + roi.mmrf + behaviors_{train,dev,test}.tsv. The
// vocabulary comes from vocab.txt when present, otherwise it is built with
// `min_count`. Missing behavior splits load as empty.
inline Dataset load_dataset(const std::filesystem::path& dir, const NewsLimits& limits, int min_count = 1) {
  const DatasetFiles files{dir};
  Dataset ds;
  ds.news = load_news(files.news(), files.roi(), limits);
  ds.vocab = std::filesystem::exists(files.vocab()) ? Vocabulary::load(files.vocab()) : build_vocab(ds.news, min_count);
  assign_token_ids(ds.news, ds.vocab);
  auto split = [&](const char* name) {
    const auto path = files.behaviors(name);
    if (!std::filesystem::exists(path)) return std::vector<ImpressionSample>{};
    auto samples = load_behaviors(path);
    validate_impressions(samples, ds.news);
    return samples;
  };
  ds.train = split("train");
  ds.dev = split("dev");
  ds.test = split("test");
  return ds;
}

// In-memory equivalent of write_dataset followed by load_dataset.
inline Dataset to_dataset(const SyntheticDataset& synthetic, const NewsLimits& limits) {
  Dataset ds;
  ds.news = synthetic.news;
  for (NewsRecord& r : ds.news) {
    if (r.tokens.size() > limits.max_title_len) r.tokens.resize(limits.max_title_len);
    if (r.num_rois() > limits.max_rois) {
      r.roi_boxes.resize(limits.max_rois);
      r.roi_features.resize(limits.max_rois * r.feat_dim);
    }
  }
  ds.vocab = build_vocab(ds.news, 1);
  assign_token_ids(ds.news, ds.vocab);
  ds.train = synthetic.train;
  ds.dev = synthetic.dev;
  ds.test = synthetic.test;
  return ds;
}

}  // namespace mmrec
