#pragma once

#include <array>
#include <cctype>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmrec/data/roi_file.hpp"
#include "mmrec/errors.hpp"

namespace mmrec {

using Box = std::array<double, 4>;  // normalized [x1, y1, x2, y2]

struct NewsRecord {
  std::string news_id;
  std::string title;
  std::vector<std::string> tokens;   // tokenized title, at most M_max entries
  std::vector<long long> title_ids;  // filled by assign_token_ids
  std::size_t feat_dim = 0;
  std::vector<float> roi_features;   // K x feat_dim, row-major
  std::vector<Box> roi_boxes;        // K entries
  bool has_image = false;

  std::size_t num_rois() const { return roi_boxes.size(); }
  bool operator==(const NewsRecord&) const = default;
};

struct NewsLimits {
  std::size_t max_title_len = 30;  // M_max
  std::size_t max_rois = 8;        // K_max
};

// Lowercases and splits on runs of non-alphanumeric characters.
inline std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> tokens;
  std::string current;
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      current.push_back(static_cast<char>(std::tolower(c)));
    } else if (!current.empty()) {
      tokens.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

inline bool valid_box(const Box& b) {
  for (double v : b) {
    if (!(v >= 0.0 && v <= 1.0)) return false;
  }
  return b[0] < b[2] && b[1] < b[3];
}

class NewsTable {
 public:
  NewsTable() = default;

  void add(NewsRecord record) {
    if (index_.contains(record.news_id)) throw ValidationError("duplicate news id '" + record.news_id + "'");
    index_.emplace(record.news_id, records_.size());
    records_.push_back(std::move(record));
  }

  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  bool contains(const std::string& id) const { return index_.contains(id); }

  std::size_t index_of(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw ValidationError("unknown news id '" + id + "'");
    return it->second;
  }
  const NewsRecord& at(const std::string& id) const { return records_[index_of(id)]; }
  const NewsRecord& operator[](std::size_t i) const { return records_[i]; }
  NewsRecord& operator[](std::size_t i) { return records_[i]; }

  auto begin() const { return records_.begin(); }
  auto end() const { return records_.end(); }
  auto begin() { return records_.begin(); }
  auto end() { return records_.end(); }

  std::size_t feat_dim() const {
    for (const auto& r : records_) {
      if (r.feat_dim) return r.feat_dim;
    }
    return 0;
  }

  bool operator==(const NewsTable& other) const { return records_ == other.records_; }

 private:
  std::vector<NewsRecord> records_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Reads news.jsonl (one object per line: id, title, roi_row_offset,
// roi_count, roi_boxes) together with the MMRF file holding the ROI rows.
inline NewsTable load_news(const std::filesystem::path& jsonl_path, const std::filesystem::path& feature_path,
                           const NewsLimits& limits = {}) {
  const FeatureMatrix features = read_roi_features(feature_path);
  std::ifstream in(jsonl_path);
  if (!in) throw Error("cannot open " + jsonl_path.string());
  NewsTable table;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError::at_line(jsonl_path.filename().string() + ": malformed JSON line: " + e.what(), line_no);
    }
    NewsRecord r;
    std::size_t offset = 0, count = 0;
    try {
      r.news_id = j.at("id").get<std::string>();
      r.title = j.at("title").get<std::string>();
      offset = j.at("roi_row_offset").get<std::size_t>();
      count = j.at("roi_count").get<std::size_t>();
      const auto& boxes = j.at("roi_boxes");
      if (!boxes.is_array() || boxes.size() != count) {
        throw FormatError::at_line("roi_boxes must hold roi_count boxes", line_no);
      }
      for (const auto& b : boxes) r.roi_boxes.push_back(b.get<Box>());
    } catch (const nlohmann::json::exception& e) {
      throw FormatError::at_line(jsonl_path.filename().string() + ": bad news record: " + e.what(), line_no);
    }
    if (offset + count > features.num_rows) {
      throw ValidationError("news '" + r.news_id + "' (line " + std::to_string(line_no) + "): ROI rows [" +
                            std::to_string(offset) + ", " + std::to_string(offset + count) +
                            ") exceed the " + std::to_string(features.num_rows) + " rows of the feature file");
    }
    for (const Box& b : r.roi_boxes) {
      if (!valid_box(b)) {
        throw ValidationError("news '" + r.news_id + "' (line " + std::to_string(line_no) + "): invalid box");
      }
    }
    r.tokens = tokenize(r.title);
    if (r.tokens.size() > limits.max_title_len) r.tokens.resize(limits.max_title_len);
    const std::size_t kept = std::min(count, limits.max_rois);
    r.roi_boxes.resize(kept);
    r.has_image = kept > 0;
    r.feat_dim = features.feat_dim;
    const auto first = features.values.begin() + static_cast<std::ptrdiff_t>(offset * features.feat_dim);
    r.roi_features.assign(first, first + static_cast<std::ptrdiff_t>(kept * features.feat_dim));
    try {
      table.add(std::move(r));
    } catch (const ValidationError& e) {
      throw ValidationError(std::string(e.what()) + " at line " + std::to_string(line_no));
    }
  }
  return table;
}

// Writes the table in the layout load_news reads. ROI rows are stored in
// table order.
inline void write_news(const std::filesystem::path& jsonl_path, const std::filesystem::path& feature_path,
                       const NewsTable& table) {
  FeatureMatrix features;
  features.feat_dim = static_cast<std::uint32_t>(table.feat_dim());
  std::ofstream out(jsonl_path, std::ios::trunc);
  if (!out) throw Error("cannot open " + jsonl_path.string() + " for writing");
  for (const NewsRecord& r : table) {
    if (r.num_rois() && r.feat_dim != features.feat_dim) throw ValidationError("inconsistent ROI feature width");
    nlohmann::json j;
    j["id"] = r.news_id;
    j["title"] = r.title;
    j["roi_row_offset"] = features.num_rows;
    j["roi_count"] = r.num_rois();
    j["roi_boxes"] = r.roi_boxes;
    out << j.dump() << '\n';
    features.values.insert(features.values.end(), r.roi_features.begin(), r.roi_features.end());
    features.num_rows += static_cast<std::uint32_t>(r.num_rois());
  }
  write_roi_features(feature_path, features);
}

}  // namespace mmrec
