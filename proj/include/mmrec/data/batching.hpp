#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mmrec/autodiff/ops.hpp"
#include "mmrec/data/news.hpp"
#include "mmrec/data/vocabulary.hpp"
#include "mmrec/errors.hpp"

namespace mmrec {

// Fixed-shape view of one news item. With `fixed_shape` the title has
// exactly M_max rows and the image exactly K_max rows; otherwise only the
// real rows are kept (never fewer than one per modality).
struct PaddedNews {
  std::vector<long long> title_ids;
  Mask title_mask;
  std::size_t feat_dim = 0;
  std::vector<double> roi_features;  // rows x feat_dim
  std::vector<Box> roi_boxes;
  Mask roi_mask;
  Mask placeholder;  // 1 on the slot standing in for a missing image
};

// A title without any token is encoded as a single UNK so the text stream
// always has one valid position. News without an image get one valid slot
// flagged for the learned placeholder embedding.
inline PaddedNews pad_and_mask(const NewsRecord& r, std::size_t max_title_len, std::size_t max_rois,
                               bool fixed_shape = true) {
  if (max_title_len == 0 || max_rois == 0) throw ValidationError("M_max and K_max must be positive");
  if (r.title_ids.size() != r.tokens.size()) {
    throw ValidationError("news '" + r.news_id + "' has no token ids; call assign_token_ids first");
  }
  PaddedNews p;
  p.feat_dim = r.feat_dim;
  std::vector<long long> ids = r.title_ids;
  if (ids.empty()) ids.push_back(Vocabulary::kUnk);
  if (ids.size() > max_title_len) ids.resize(max_title_len);
  const std::size_t text_rows = fixed_shape ? max_title_len : ids.size();
  p.title_ids.assign(text_rows, Vocabulary::kPad);
  p.title_mask.assign(text_rows, 0);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    p.title_ids[i] = ids[i];
    p.title_mask[i] = 1;
  }

  const std::size_t k = std::min(r.num_rois(), max_rois);
  const std::size_t image_rows = fixed_shape ? max_rois : std::max<std::size_t>(k, 1);
  p.roi_features.assign(image_rows * r.feat_dim, 0.0);
  p.roi_boxes.assign(image_rows, Box{0, 0, 0, 0});
  p.roi_mask.assign(image_rows, 0);
  p.placeholder.assign(image_rows, 0);
  if (r.has_image && k > 0) {
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t c = 0; c < r.feat_dim; ++c) p.roi_features[i * r.feat_dim + c] = r.roi_features[i * r.feat_dim + c];
      p.roi_boxes[i] = r.roi_boxes[i];
      p.roi_mask[i] = 1;
    }
  } else {
    p.roi_mask[0] = 1;
    p.placeholder[0] = 1;
  }
  return p;
}

// The most recent `max_history` clicks, oldest first. `ids` holds empty
// strings at padded positions.
struct PaddedHistory {
  std::vector<std::string> ids;
  Mask mask;
};

inline PaddedHistory pad_history(const std::vector<std::string>& history, std::size_t max_history,
                                 bool fixed_shape = true) {
  PaddedHistory h;
  const std::size_t keep = std::min(history.size(), max_history);
  h.ids.assign(history.end() - static_cast<std::ptrdiff_t>(keep), history.end());
  h.mask.assign(keep, 1);
  if (fixed_shape) {
    h.ids.resize(max_history);
    h.mask.resize(max_history, 0);
  }
  return h;
}

// Several padded news items stacked row-wise for the encoder; segment i
// covers the rows of item i in each modality.
struct NewsBatch {
  std::size_t feat_dim = 0;
  std::vector<long long> token_ids;
  std::vector<std::size_t> positions;
  Mask token_mask;
  std::vector<Segment> text_segments;
  std::vector<double> roi_features;  // rows x feat_dim
  std::vector<double> roi_geometry;  // rows x 5: x1, y1, x2, y2, area
  Mask roi_mask;
  Mask placeholder;
  std::vector<Segment> image_segments;

  std::size_t size() const { return text_segments.size(); }
  std::size_t text_rows() const { return token_ids.size(); }
  std::size_t image_rows() const { return roi_mask.size(); }
};

inline NewsBatch pack_news(std::span<const PaddedNews> items, std::size_t feat_dim) {
  NewsBatch b;
  b.feat_dim = feat_dim;
  for (const PaddedNews& p : items) {
    if (p.feat_dim != feat_dim && !p.roi_features.empty()) {
      throw DimensionError("ROI feature width " + std::to_string(p.feat_dim) + " does not match " +
                           std::to_string(feat_dim));
    }
    const std::size_t t0 = b.token_ids.size();
    for (std::size_t i = 0; i < p.title_ids.size(); ++i) {
      b.token_ids.push_back(p.title_ids[i]);
      b.positions.push_back(i);
      b.token_mask.push_back(p.title_mask[i]);
    }
    b.text_segments.push_back({t0, b.token_ids.size()});
    const std::size_t i0 = b.roi_mask.size();
    for (std::size_t i = 0; i < p.roi_mask.size(); ++i) {
      const Box& box = p.roi_boxes[i];
      if (p.roi_mask[i] && !p.placeholder[i] && !valid_box(box)) {
        throw ValidationError("ROI box violates 0 <= x1 < x2 <= 1, 0 <= y1 < y2 <= 1");
      }
      for (std::size_t c = 0; c < feat_dim; ++c) {
        b.roi_features.push_back(p.roi_features.empty() ? 0.0 : p.roi_features[i * feat_dim + c]);
      }
      b.roi_geometry.insert(b.roi_geometry.end(),
                            {box[0], box[1], box[2], box[3], (box[2] - box[0]) * (box[3] - box[1])});
      b.roi_mask.push_back(p.roi_mask[i]);
      b.placeholder.push_back(p.placeholder[i]);
    }
    b.image_segments.push_back({i0, b.roi_mask.size()});
  }
  return b;
}

}  // namespace mmrec
