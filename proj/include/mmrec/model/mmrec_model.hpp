#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmrec/data/batching.hpp"
#include "mmrec/data/news.hpp"
#include "mmrec/model/encoder.hpp"
#include "mmrec/model/parameters.hpp"
#include "mmrec/model/user_scorer.hpp"

namespace mmrec {

enum class Variant { kFull, kTextOnly, kImageOnly, kNoCoattn, kVanillaAttn };

inline const std::vector<std::pair<Variant, std::string>>& variant_names() {
  static const std::vector<std::pair<Variant, std::string>> names{{Variant::kFull, "full"},
                                                                  {Variant::kTextOnly, "text-only"},
                                                                  {Variant::kImageOnly, "image-only"},
                                                                  {Variant::kNoCoattn, "no-coattn"},
                                                                  {Variant::kVanillaAttn, "vanilla-attn"}};
  return names;
}

inline std::string variant_name(Variant v) {
  for (const auto& [value, name] : variant_names()) {
    if (value == v) return name;
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  for (const auto& [value, name] : variant_names()) {
    if (name == s) return value;
  }
  throw ValidationError("unknown variant '" + s + "' (expected full, text-only, image-only, no-coattn, vanilla-attn)");
}

struct ModelConfig {
  EncoderConfig encoder;
  Variant variant = Variant::kFull;
  std::size_t max_history = 50;  // P_max
  bool scale_user_attention = false;  // 1/sqrt(d) inside the clicked-news softmaxes

  void validate() const {
    encoder.validate();
    if (max_history == 0) throw ValidationError("max_history must be positive");
  }
};

// Trimmed, padded views of every news item, indexed like the news table.
struct NewsInputs {
  std::vector<PaddedNews> items;
  std::size_t feat_dim = 0;

  static NewsInputs prepare(const NewsTable& news, const EncoderConfig& cfg, bool fixed_shape = false) {
    NewsInputs in;
    in.feat_dim = cfg.d_img;
    if (news.feat_dim() != 0 && news.feat_dim() != cfg.d_img) {
      throw DimensionError("ROI features have width " + std::to_string(news.feat_dim()) + ", model expects d_img=" +
                           std::to_string(cfg.d_img));
    }
    for (const NewsRecord& r : news) in.items.push_back(pad_and_mask(r, cfg.max_title_len, cfg.max_rois, fixed_shape));
    return in;
  }
};

// One user/candidate-list pair, as row indices into NewsInputs.
struct ScoringRequest {
  std::vector<std::size_t> history;  // oldest first, already truncated
  std::vector<std::size_t> candidates;
};

// Encodings of every news item, computed once for inference.
struct EncodedNewsTable {
  Tensor text;   // [N x d] or empty
  Tensor image;  // [N x d] or empty
};

class MmRecModel {
 public:
  MmRecModel(const ModelConfig& cfg, std::size_t vocab_size, std::uint64_t seed)
      : cfg_(cfg), store_(seed), encoder_(checked(cfg), vocab_size, streams_for(cfg.variant), store_) {
    if (cfg.variant == Variant::kVanillaAttn) {
      const std::size_t d = cfg.encoder.d, da = cfg.encoder.d_a;
      vanilla_w_ = &store_.uniform("user.vanilla.w", {da, d}, 1.0 / std::sqrt(static_cast<double>(d)));
      vanilla_q_ = &store_.uniform("user.vanilla.q", {da}, 1.0 / std::sqrt(static_cast<double>(da)));
    }
  }

  const ModelConfig& config() const { return cfg_; }
  Variant variant() const { return cfg_.variant; }
  ParameterStore& parameters() { return store_; }
  const ParameterStore& parameters() const { return store_; }
  const NewsEncoder& encoder() const { return encoder_; }

  static EncoderStreams streams_for(Variant v) {
    switch (v) {
      case Variant::kTextOnly: return {true, false, false};
      case Variant::kImageOnly: return {false, true, false};
      case Variant::kNoCoattn: return {true, true, false};
      default: return {true, true, true};
    }
  }

  static NewsBatch pack(const NewsInputs& inputs, std::span<const std::size_t> rows) {
    std::vector<PaddedNews> items;
    items.reserve(rows.size());
    for (std::size_t r : rows) items.push_back(inputs.items.at(r));
    return pack_news(items, inputs.feat_dim);
  }

  template <class T>
  BasicEncodedBatch<T> encode(BasicTape<T>& t, const NewsBatch& b) const { return encoder_.encode(t, b); }

  // Scores [C] of candidates against clicked news, all given as rows of
  // already encoded [N x d] matrices. An empty history scores 0 throughout.
  template <class T>
  BasicVar<T> score(BasicTape<T>& t, const BasicEncodedBatch<T>& enc, const std::vector<std::size_t>& history,
            const std::vector<std::size_t>& candidates) const {
    if (history.empty()) return t.constant(Tensor::zeros({candidates.size()}));
    auto rows = [](BasicVar<T> m, const std::vector<std::size_t>& ids) { return m.valid() ? gather_rows(m, ids) : BasicVar<T>(); };
    return score(t, rows(enc.text, history), rows(enc.image, history), Mask{}, rows(enc.text, candidates),
                 rows(enc.image, candidates));
  }

  // Variant-specific scoring of candidate rows against clicked rows.
  template <class T>
  BasicVar<T> score(BasicTape<T>& t, BasicVar<T> r_t, BasicVar<T> r_p, const Mask& mask, BasicVar<T> c_t, BasicVar<T> c_p) const {
    const double scale = cfg_.scale_user_attention ? 1.0 / std::sqrt(static_cast<double>(cfg_.encoder.d)) : 1.0;
    switch (cfg_.variant) {
      case Variant::kTextOnly: {
        BasicVar<T> a = row_softmax(scaled(matmul_nt(c_t, r_t), scale), mask);
        return row_dot(c_t, matmul(a, r_t));
      }
      case Variant::kImageOnly: {
        BasicVar<T> a = row_softmax(scaled(matmul_nt(c_p, r_p), scale), mask);
        return row_dot(c_p, matmul(a, r_p));
      }
      case Variant::kVanillaAttn: {
        BasicVar<T> w = t.parameter(*vanilla_w_), q = t.parameter(*vanilla_q_);
        auto pool = [&](BasicVar<T> r) { return matmul(softmax_masked(matmul(tanh(matmul_nt(r, w)), q), mask), r); };
        BasicVar<T> u = add(pool(r_t), pool(r_p));
        return matmul(add(c_t, c_p), u);
      }
      default:
        return click_scores(c_t, c_p, user_embedding(r_t, r_p, crossmodal_weights(r_t, r_p, mask, c_t, c_p, scale)));
    }
  }

  // Encodes every distinct news item of the requests once, then scores
  // each request. All requests must have the same number of candidates;
  // the result is [B x C].
  template <class T>
  BasicVar<T> batch_scores(BasicTape<T>& t, const NewsInputs& inputs, std::span<const ScoringRequest> requests) const {
    if (requests.empty()) throw ValidationError("empty batch");
    std::vector<std::size_t> unique;
    std::unordered_map<std::size_t, std::size_t> row_of;
    auto local = [&](const std::vector<std::size_t>& ids) {
      std::vector<std::size_t> out;
      for (std::size_t id : ids) {
        auto [it, inserted] = row_of.emplace(id, unique.size());
        if (inserted) unique.push_back(id);
        out.push_back(it->second);
      }
      return out;
    };
    std::vector<std::pair<std::vector<std::size_t>, std::vector<std::size_t>>> local_requests;
    const std::size_t c = requests.front().candidates.size();
    for (const ScoringRequest& r : requests) {
      if (r.candidates.size() != c) throw DimensionError("batch requests differ in candidate count");
      auto h = local(r.history);
      local_requests.emplace_back(std::move(h), local(r.candidates));
    }
    const BasicEncodedBatch<T> enc = encode(t, pack(inputs, unique));
    std::vector<BasicVar<T>> parts;
    for (const auto& [h, cand] : local_requests) parts.push_back(score(t, enc, h, cand));
    return reshape(concat_rows(parts), {requests.size(), c});
  }

  EncodedNewsTable encode_all(const NewsInputs& inputs, std::size_t chunk = 64) const {
    const std::size_t n = inputs.items.size(), d = cfg_.encoder.d;
    const EncoderStreams s = encoder_.streams();
    EncodedNewsTable out;
    std::vector<double> text(s.text ? n * d : 0), image(s.image ? n * d : 0);
    for (std::size_t start = 0; start < n; start += chunk) {
      const std::size_t end = std::min(n, start + chunk);
      std::vector<std::size_t> rows;
      for (std::size_t i = start; i < end; ++i) rows.push_back(i);
      Tape t(GradMode::kInference);
      const EncodedBatch enc = encode(t, pack(inputs, rows));
      if (s.text) std::copy(enc.text.value().begin(), enc.text.value().end(), text.begin() + static_cast<long>(start * d));
      if (s.image) {
        std::copy(enc.image.value().begin(), enc.image.value().end(), image.begin() + static_cast<long>(start * d));
      }
    }
    if (s.text) out.text = Tensor({n, d}, std::move(text));
    if (s.image) out.image = Tensor({n, d}, std::move(image));
    return out;
  }

  // Inference scores for one request from cached encodings.
  std::vector<double> score_request(const EncodedNewsTable& table, const ScoringRequest& r) const {
    if (r.history.empty()) return std::vector<double>(r.candidates.size(), 0.0);
    Tape t(GradMode::kInference);
    auto rows = [&](const Tensor& m, const std::vector<std::size_t>& ids) {
      if (m.size() == 0) return Var();
      const std::size_t d = m.cols();
      std::vector<double> out;
      out.reserve(ids.size() * d);
      for (std::size_t id : ids) out.insert(out.end(), m.data().begin() + static_cast<long>(id * d),
                                            m.data().begin() + static_cast<long>((id + 1) * d));
      return t.constant(Tensor({ids.size(), d}, std::move(out)));
    };
    Var y = score(t, rows(table.text, r.history), rows(table.image, r.history), Mask{}, rows(table.text, r.candidates),
                  rows(table.image, r.candidates));
    return {y.value().begin(), y.value().end()};
  }

 private:
  static const EncoderConfig& checked(const ModelConfig& cfg) {
    cfg.validate();
    return cfg.encoder;
  }
  template <class T>
  static BasicVar<T> scaled(BasicVar<T> x, double s) { return s == 1.0 ? x : scale(x, s); }

  ModelConfig cfg_;
  ParameterStore store_;
  NewsEncoder encoder_;
  Parameter *vanilla_w_ = nullptr, *vanilla_q_ = nullptr;
};

}  // namespace mmrec
