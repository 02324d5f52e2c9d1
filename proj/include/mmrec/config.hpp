#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmrec/data/synthetic.hpp"
#include "mmrec/errors.hpp"
#include "mmrec/model/mmrec_model.hpp"
#include "mmrec/training/trainer.hpp"

namespace mmrec {

// Everything one run needs, stored as a single flat JSON object. Keys
// missing from a file keep their defaults; unknown keys are an error.
struct ExperimentConfig {
  ModelConfig model;
  TrainConfig train;
  SyntheticConfig synthetic;
  std::string data_dir;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  int vocab_min_count = 1;
  double grad_check_step = 1e-5;

  template <class Self, class Fn>
  static void fields(Self& c, Fn&& f) {
    auto& e = c.model.encoder;
    f("d", e.d);
    f("d_img", e.d_img);
    f("d_a", e.d_a);
    f("heads", e.heads);
    f("n_text_layers", e.n_text_layers);
    f("n_co_layers", e.n_co_layers);
    f("max_title_len", e.max_title_len);
    f("max_rois", e.max_rois);
    f("ffn_mult", e.ffn_mult);
    f("freeze_below", e.freeze_below);
    f("residual_init", e.residual_init);
    f("input_init", e.input_init);
    f("variant", c.model.variant);
    f("max_history", c.model.max_history);
    f("scale_user_attention", c.model.scale_user_attention);

    auto& t = c.train;
    f("lr", t.adam.lr);
    f("beta1", t.adam.beta1);
    f("beta2", t.adam.beta2);
    f("adam_eps", t.adam.eps);
    f("grad_clip_norm", t.adam.clip_norm);
    f("batch_size", t.batch_size);
    f("epochs", t.epochs);
    f("neg_ratio", t.neg_ratio);
    f("seed", t.seed);
    f("eval_dev", t.eval_dev);
    f("stop_dev_auc", t.stop_dev_auc);

    f("data_dir", c.data_dir);
    f("seeds", c.seeds);
    f("vocab_min_count", c.vocab_min_count);
    f("grad_check_step", c.grad_check_step);

    auto& s = c.synthetic;
    f("synthetic_num_topics", s.num_topics);
    f("synthetic_topic_words_per_topic", s.topic_words_per_topic);
    f("synthetic_common_words", s.common_words);
    f("synthetic_num_news", s.num_news);
    f("synthetic_num_users", s.num_users);
    f("synthetic_num_impressions", s.num_impressions);
    f("synthetic_max_rois", s.max_rois);
    f("synthetic_roi_noise_sigma", s.roi_noise_sigma);
    f("synthetic_image_only_fraction", s.image_only_fraction);
    f("synthetic_no_image_fraction", s.no_image_fraction);
    f("synthetic_pos_rate_on_topic", s.pos_rate_on_topic);
    f("synthetic_pos_rate_off_topic", s.pos_rate_off_topic);
    f("synthetic_topic_word_prob", s.topic_word_prob);
    f("synthetic_title_min_len", s.title_min_len);
    f("synthetic_title_max_len", s.title_max_len);
    f("synthetic_history_min", s.history_min);
    f("synthetic_history_max", s.history_max);
    f("synthetic_candidates_min", s.candidates_min);
    f("synthetic_candidates_max", s.candidates_max);
    f("synthetic_train_fraction", s.train_fraction);
    f("synthetic_dev_fraction", s.dev_fraction);
    f("synthetic_seed", s.seed);
  }

  // The generator writes ROI rows as wide as the model reads them.
  SyntheticConfig synthetic_config() const {
    SyntheticConfig s = synthetic;
    s.d_img = model.encoder.d_img;
    return s;
  }

  NewsLimits news_limits() const { return {model.encoder.max_title_len, model.encoder.max_rois}; }

  void validate() const {
    model.validate();
    train.validate();
    synthetic_config().validate();
    if (seeds.empty()) throw ValidationError("seeds must not be empty");
    if (vocab_min_count < 1) throw ValidationError("vocab_min_count must be at least 1");
    if (!(grad_check_step > 0.0)) throw ValidationError("grad_check_step must be positive");
  }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    fields(*this, [&j](const char* key, const auto& v) {
      if constexpr (std::is_same_v<std::decay_t<decltype(v)>, Variant>) {
        j[key] = variant_name(v);
      } else {
        j[key] = v;
      }
    });
    return j;
  }

  static ExperimentConfig from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ValidationError("config must be a JSON object");
    ExperimentConfig c;
    std::vector<std::string> known;
    fields(c, [&](const char* key, auto& v) {
      known.emplace_back(key);
      auto it = j.find(key);
      if (it != j.end()) read_value(key, *it, v);
    });
    for (const auto& [key, value] : j.items()) {
      if (std::find(known.begin(), known.end(), key) == known.end()) {
        throw ValidationError("unknown config key '" + key + "'");
      }
    }
    c.validate();
    return c;
  }

  static ExperimentConfig load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open config " + path.string());
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    return from_json(j);
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    out << to_json().dump(2) << '\n';
  }

 private:
  template <class V>
  static void read_value(const std::string& key, const nlohmann::json& j, V& v) {
    auto wrong = [&](const char* expected) {
      return ValidationError("config key '" + key + "' must be " + expected + ", got " + j.dump());
    };
    if constexpr (std::is_same_v<V, Variant>) {
      if (!j.is_string()) throw wrong("a variant name");
      v = parse_variant(j.get<std::string>());
    } else if constexpr (std::is_same_v<V, bool>) {
      if (!j.is_boolean()) throw wrong("true or false");
      v = j.get<bool>();
    } else if constexpr (std::is_same_v<V, std::string>) {
      if (!j.is_string()) throw wrong("a string");
      v = j.get<std::string>();
    } else if constexpr (std::is_same_v<V, std::vector<std::uint64_t>>) {
      if (!j.is_array()) throw wrong("an array of non-negative integers");
      v.clear();
      for (const auto& e : j) {
        if (!e.is_number_unsigned()) throw wrong("an array of non-negative integers");
        v.push_back(e.get<std::uint64_t>());
      }
    } else if constexpr (std::is_floating_point_v<V>) {
      if (!j.is_number()) throw wrong("a number");
      v = j.get<V>();
    } else if constexpr (std::is_unsigned_v<V>) {
      if (!j.is_number_unsigned()) throw wrong("a non-negative integer");
      v = j.get<V>();
    } else {
      if (!j.is_number_integer()) throw wrong("an integer");
      v = j.get<V>();
    }
  }
};

}  // namespace mmrec
