#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mmrec/autodiff/ops.hpp"
#include "mmrec/data/batching.hpp"
#include "mmrec/model/parameters.hpp"

namespace mmrec {

struct EncoderConfig {
  std::size_t d = 64;
  std::size_t d_img = 64;
  std::size_t d_a = 32;
  std::size_t heads = 4;
  std::size_t n_text_layers = 2;
  std::size_t n_co_layers = 1;
  std::size_t max_title_len = 30;  // M_max
  std::size_t max_rois = 8;        // K_max
  std::size_t ffn_mult = 4;
  std::size_t freeze_below = 0;
  // Multipliers on the usual +-1/sqrt(fan_in) init bound: `residual_init`
  // for the layers writing into the residual stream (attn.wo, ffn.w2),
  // `input_init` for the word/position/placeholder embeddings and the ROI
  // and box projections. At 1.0 the pooled vectors start with norm ~4 and
  // the first loss far above ln(1 + K).
  double residual_init = 0.05;
  double input_init = 0.3;

  void validate() const {
    if (!d || !d_img || !d_a || !heads || !max_title_len || !max_rois || !ffn_mult) {
      throw ValidationError("encoder dimensions must be positive");
    }
    if (d % heads != 0) {
      throw ValidationError("d=" + std::to_string(d) + " is not divisible by heads=" + std::to_string(heads));
    }
    if (!(residual_init > 0.0) || !(input_init > 0.0)) throw ValidationError("init scales must be positive");
    if (freeze_below > n_text_layers + n_co_layers) {
      throw ValidationError("freeze_below exceeds the number of transformer layers");
    }
  }
};

// Which parts of the encoder exist. Text-only and image-only models drop the
// other stream (and with it the co-attention layers).
struct EncoderStreams {
  bool text = true;
  bool image = true;
  bool co_attention = true;
};

struct NormParams {
  Parameter* gain = nullptr;
  Parameter* bias = nullptr;
};

// Keys carry no bias: a shared offset on every key shifts all logits of a
// query equally and cancels in the softmax.
struct AttentionParams {
  Parameter *wq = nullptr, *bq = nullptr, *wk = nullptr, *wv = nullptr, *bv = nullptr, *wo = nullptr,
            *bo = nullptr;
};

struct FfnParams {
  Parameter *w1 = nullptr, *b1 = nullptr, *w2 = nullptr, *b2 = nullptr;
};

struct TransformerBlock {
  NormParams norm_attn;
  AttentionParams attn;
  NormParams norm_ffn;
  FfnParams ffn;
  std::vector<Parameter*> params() const {
    return {norm_attn.gain, norm_attn.bias, attn.wq, attn.bq, attn.wk, attn.wv, attn.bv,
            attn.wo, attn.bo, norm_ffn.gain, norm_ffn.bias, ffn.w1, ffn.b1, ffn.w2, ffn.b2};
  }
};

struct CoLayer {
  TransformerBlock text;   // text queries over image keys
  TransformerBlock image;  // image queries over text keys
};

struct PoolParams {
  Parameter* w = nullptr;  // [d_a x d]
  Parameter* q = nullptr;  // [d_a]
};

// Per-item outputs of the encoder for a packed batch.
template <class T>
struct BasicEncodedBatch {
  BasicVar<T> text;          // [N x d] r^t rows (invalid when the text stream is off)
  BasicVar<T> image;         // [N x d] r^p rows
  BasicVar<T> text_hidden;   // final token states
  BasicVar<T> image_hidden;  // final ROI states
  BasicVar<T> text_weights;  // pooling weights over token rows
  BasicVar<T> image_weights;
};

using EncodedBatch = BasicEncodedBatch<double>;

class NewsEncoder {
 public:
  NewsEncoder(const EncoderConfig& cfg, std::size_t vocab_size, EncoderStreams streams, ParameterStore& store)
      : cfg_(cfg), streams_(streams) {
    cfg.validate();
    if (!streams.text && !streams.image) throw ValidationError("encoder needs at least one stream");
    if (!streams.text || !streams.image) streams_.co_attention = false;
    const std::size_t d = cfg.d;
    const double emb = cfg.input_init / std::sqrt(static_cast<double>(d));
    if (streams_.text) {
      word_ = &store.uniform("text.word_embedding", {vocab_size, d}, emb);
      position_ = &store.uniform("text.position_embedding", {cfg.max_title_len, d}, emb);
      for (std::size_t l = 0; l < cfg.n_text_layers; ++l) {
        text_layers_.push_back(block(store, "text.layer" + std::to_string(l)));
      }
    }
    if (streams_.image) {
      roi_w_ = &store.uniform("image.roi_proj.w", {cfg.d_img, d}, cfg.input_init / std::sqrt(double(cfg.d_img)));
      roi_b_ = &store.constant("image.roi_proj.b", {d}, 0.0);
      box_w_ = &store.uniform("image.box_proj.w", {5, d}, cfg.input_init / std::sqrt(5.0));
      box_b_ = &store.constant("image.box_proj.b", {d}, 0.0);
      placeholder_ = &store.uniform("image.placeholder", {d}, emb);
    }
    if (streams_.co_attention) {
      for (std::size_t l = 0; l < cfg.n_co_layers; ++l) {
        const std::string name = "co.layer" + std::to_string(l);
        co_layers_.push_back({block(store, name + ".text"), block(store, name + ".image")});
      }
    }
    if (streams_.text) text_pool_ = pool(store, "pool.text");
    if (streams_.image) image_pool_ = pool(store, "pool.image");
    apply_freeze(cfg.freeze_below);
  }

  const EncoderConfig& config() const { return cfg_; }
  const EncoderStreams& streams() const { return streams_; }

  // Freezes the input embeddings/projections and every layer with index
  // below `f`; text layers come first, then co-attention layers.
  void apply_freeze(std::size_t f) {
    auto set = [](const std::vector<Parameter*>& ps, bool frozen) {
      for (Parameter* p : ps) {
        if (p) p->set_frozen(frozen);
      }
    };
    set({word_, position_, roi_w_, roi_b_, box_w_, box_b_, placeholder_}, f > 0);
    std::size_t index = 0;
    for (const auto& l : text_layers_) set(l.params(), index++ < f);
    for (const auto& l : co_layers_) {
      set(l.text.params(), index < f);
      set(l.image.params(), index++ < f);
    }
  }

  // Word plus position embeddings; PAD rows are zeroed.
  template <class T>
  BasicVar<T> embed_title(BasicTape<T>& t, const NewsBatch& b) const {
    BasicVar<T> words = embedding_lookup(t.parameter(*word_), b.token_ids);
    std::vector<std::size_t> pos(b.positions.begin(), b.positions.end());
    BasicVar<T> e = add(words, gather_rows(t.parameter(*position_), std::move(pos)));
    return mask_rows(e, b.token_mask);
  }

  // Linear map of the ROI features plus a linear map of the box geometry
  // [x1, y1, x2, y2, area]; placeholder rows are replaced by the learned
  // no-image embedding.
  template <class T>
  BasicVar<T> project_rois(BasicTape<T>& t, const NewsBatch& b) const {
    const std::size_t rows = b.image_rows();
    BasicVar<T> feats = t.constant(Tensor({rows, cfg_.d_img}, b.roi_features));
    BasicVar<T> geo = t.constant(Tensor({rows, 5}, b.roi_geometry));
    BasicVar<T> v = add(linear(feats, t.parameter(*roi_w_), t.parameter(*roi_b_)),
                linear(geo, t.parameter(*box_w_), t.parameter(*box_b_)));
    return override_rows(v, t.parameter(*placeholder_), b.placeholder);
  }

  template <class T>
  BasicVar<T> text_layer(BasicTape<T>& t, std::size_t l, BasicVar<T> h, const NewsBatch& b) const {
    std::vector<AttentionBlock> blocks;
    for (const Segment& s : b.text_segments) blocks.push_back({s, s});
    const TransformerBlock& p = text_layers_.at(l);
    BasicVar<T> n = norm(t, p.norm_attn, h);
    h = add(h, attention(t, p.attn, n, n, blocks, b.token_mask));
    return add(h, ffn(t, p.ffn, norm(t, p.norm_ffn, h)));
  }

  // Both directions read the layer inputs, so neither stream sees the
  // other's update from the same layer.
  template <class T>
  std::pair<BasicVar<T>, BasicVar<T>> co_layer(BasicTape<T>& t, std::size_t l, BasicVar<T> h, BasicVar<T> v, const NewsBatch& b) const {
    std::vector<AttentionBlock> text_blocks, image_blocks;
    for (std::size_t i = 0; i < b.size(); ++i) {
      text_blocks.push_back({b.text_segments[i], b.image_segments[i]});
      image_blocks.push_back({b.image_segments[i], b.text_segments[i]});
    }
    const CoLayer& p = co_layers_.at(l);
    BasicVar<T> hn = norm(t, p.text.norm_attn, h);
    BasicVar<T> vn = norm(t, p.image.norm_attn, v);
    BasicVar<T> h2 = add(h, attention(t, p.text.attn, hn, vn, text_blocks, b.roi_mask));
    BasicVar<T> v2 = add(v, attention(t, p.image.attn, vn, hn, image_blocks, b.token_mask));
    h2 = add(h2, ffn(t, p.text.ffn, norm(t, p.text.norm_ffn, h2)));
    v2 = add(v2, ffn(t, p.image.ffn, norm(t, p.image.norm_ffn, v2)));
    return {h2, v2};
  }

  // a = softmax over each segment of (W h_i)^T q; r = sum_i a_i h_i.
  template <class T>
  static std::pair<BasicVar<T>, BasicVar<T>> attention_pool(BasicVar<T> h, const std::vector<Segment>& segments, const Mask& mask, BasicVar<T> w,
                                            BasicVar<T> q) {
    BasicVar<T> scores = matmul(matmul_nt(h, w), q);
    BasicVar<T> a = segment_softmax(scores, segments, mask);
    return {segment_weighted_sum(h, a, segments), a};
  }

  template <class T>
  BasicEncodedBatch<T> encode(BasicTape<T>& t, const NewsBatch& b) const {
    BasicEncodedBatch<T> out;
    BasicVar<T> h, v;
    if (streams_.text) {
      h = embed_title(t, b);
      for (std::size_t l = 0; l < text_layers_.size(); ++l) h = text_layer(t, l, h, b);
    }
    if (streams_.image) v = project_rois(t, b);
    for (std::size_t l = 0; l < co_layers_.size(); ++l) std::tie(h, v) = co_layer(t, l, h, v, b);
    if (streams_.text) {
      out.text_hidden = h;
      std::tie(out.text, out.text_weights) =
          attention_pool(h, b.text_segments, b.token_mask, t.parameter(*text_pool_.w), t.parameter(*text_pool_.q));
    }
    if (streams_.image) {
      out.image_hidden = v;
      std::tie(out.image, out.image_weights) =
          attention_pool(v, b.image_segments, b.roi_mask, t.parameter(*image_pool_.w), t.parameter(*image_pool_.q));
    }
    return out;
  }

  const PoolParams& text_pool() const { return text_pool_; }
  const PoolParams& image_pool() const { return image_pool_; }
  Parameter* placeholder() const { return placeholder_; }
  std::size_t num_co_layers() const { return co_layers_.size(); }

 private:
  // W is stored [d_a x d], so W h is a plain row-times-transpose.
  PoolParams pool(ParameterStore& s, const std::string& name) const {
    return {&s.uniform(name + ".w", {cfg_.d_a, cfg_.d}, 1.0 / std::sqrt(static_cast<double>(cfg_.d))),
            &s.uniform(name + ".q", {cfg_.d_a}, 1.0 / std::sqrt(static_cast<double>(cfg_.d_a)))};
  }

  TransformerBlock block(ParameterStore& s, const std::string& name) const {
    const std::size_t d = cfg_.d, hidden = cfg_.d * cfg_.ffn_mult;
    TransformerBlock b;
    b.norm_attn = {&s.constant(name + ".norm1.gain", {d}, 1.0), &s.constant(name + ".norm1.bias", {d}, 0.0)};
    b.attn.wq = &s.weight(name + ".attn.wq", d, d);
    b.attn.bq = &s.constant(name + ".attn.bq", {d}, 0.0);
    b.attn.wk = &s.weight(name + ".attn.wk", d, d);
    b.attn.wv = &s.weight(name + ".attn.wv", d, d);
    b.attn.bv = &s.constant(name + ".attn.bv", {d}, 0.0);
    b.attn.wo = &s.uniform(name + ".attn.wo", {d, d}, cfg_.residual_init / std::sqrt(double(d)));
    b.attn.bo = &s.constant(name + ".attn.bo", {d}, 0.0);
    b.norm_ffn = {&s.constant(name + ".norm2.gain", {d}, 1.0), &s.constant(name + ".norm2.bias", {d}, 0.0)};
    b.ffn.w1 = &s.weight(name + ".ffn.w1", d, hidden);
    b.ffn.b1 = &s.constant(name + ".ffn.b1", {hidden}, 0.0);
    b.ffn.w2 = &s.uniform(name + ".ffn.w2", {hidden, d}, cfg_.residual_init / std::sqrt(double(hidden)));
    b.ffn.b2 = &s.constant(name + ".ffn.b2", {d}, 0.0);
    return b;
  }

  template <class T>
  static BasicVar<T> norm(BasicTape<T>& t, const NormParams& p, BasicVar<T> x) {
    return layer_norm(x, t.parameter(*p.gain), t.parameter(*p.bias));
  }

  template <class T>
  BasicVar<T> attention(BasicTape<T>& t, const AttentionParams& p, BasicVar<T> queries, BasicVar<T> keys, std::vector<AttentionBlock> blocks,
                const Mask& key_mask) const {
    BasicVar<T> q = linear(queries, t.parameter(*p.wq), t.parameter(*p.bq));
    BasicVar<T> k = linear(keys, t.parameter(*p.wk));
    BasicVar<T> v = linear(keys, t.parameter(*p.wv), t.parameter(*p.bv));
    const double scale = 1.0 / std::sqrt(static_cast<double>(cfg_.d / cfg_.heads));
    BasicVar<T> o = multihead_attention(q, k, v, cfg_.heads, std::move(blocks), key_mask, scale);
    return linear(o, t.parameter(*p.wo), t.parameter(*p.bo));
  }

  template <class T>
  static BasicVar<T> ffn(BasicTape<T>& t, const FfnParams& p, BasicVar<T> x) {
    BasicVar<T> hidden = gelu(linear(x, t.parameter(*p.w1), t.parameter(*p.b1)));
    return linear(hidden, t.parameter(*p.w2), t.parameter(*p.b2));
  }

  EncoderConfig cfg_;
  EncoderStreams streams_;
  Parameter *word_ = nullptr, *position_ = nullptr;
  Parameter *roi_w_ = nullptr, *roi_b_ = nullptr, *box_w_ = nullptr, *box_b_ = nullptr, *placeholder_ = nullptr;
  std::vector<TransformerBlock> text_layers_;
  std::vector<CoLayer> co_layers_;
  PoolParams text_pool_, image_pool_;
};

}  // namespace mmrec
