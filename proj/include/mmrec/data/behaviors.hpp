#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mmrec/data/news.hpp"
#include "mmrec/errors.hpp"

namespace mmrec {

struct Candidate {
  std::string news_id;
  int label = 0;
  bool operator==(const Candidate&) const = default;
};

// One presentation of a candidate list to a user (one line of behaviors.tsv).
struct ImpressionSample {
  std::string impression_id;
  std::string user_id;
  std::vector<std::string> history;  // chronological, oldest first
  std::vector<Candidate> candidates;

  std::size_t num_positive() const {
    std::size_t n = 0;
    for (const auto& c : candidates) n += c.label == 1;
    return n;
  }
  bool operator==(const ImpressionSample&) const = default;
};

namespace detail {

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::string::size_type start = 0;
  while (true) {
    auto pos = s.find(sep, start);
    parts.push_back(s.substr(start, pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return parts;
}

inline std::vector<std::string> split_words(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

}  // namespace detail

// Parses one "impression_id \t user_id \t history \t candidates" line.
// `line_no` is only used for error messages.
inline ImpressionSample parse_behavior_line(const std::string& line, std::size_t line_no = 1) {
  const auto fields = detail::split(line, '\t');
  if (fields.size() != 4) {
    throw FormatError::at_line("expected 4 tab-separated fields, found " + std::to_string(fields.size()), line_no);
  }
  ImpressionSample s;
  s.impression_id = fields[0];
  s.user_id = fields[1];
  if (s.impression_id.empty()) throw FormatError::at_line("empty impression id", line_no);
  s.history = detail::split_words(fields[2]);
  for (const auto& entry : detail::split_words(fields[3])) {
    const auto dash = entry.rfind('-');
    if (dash == std::string::npos || dash == 0) throw FormatError::at_line("candidate '" + entry + "' is not newsid-label", line_no);
    const std::string label = entry.substr(dash + 1);
    if (label != "0" && label != "1") throw FormatError::at_line("label '" + label + "' is not 0 or 1", line_no);
    s.candidates.push_back({entry.substr(0, dash), label == "1" ? 1 : 0});
  }
  if (s.candidates.empty()) throw FormatError::at_line("impression without candidates", line_no);
  return s;
}

inline std::string format_behavior_line(const ImpressionSample& s) {
  std::string out = s.impression_id + '\t' + s.user_id + '\t';
  for (std::size_t i = 0; i < s.history.size(); ++i) out += (i ? " " : "") + s.history[i];
  out += '\t';
  for (std::size_t i = 0; i < s.candidates.size(); ++i) {
    out += (i ? " " : "") + s.candidates[i].news_id + '-' + std::to_string(s.candidates[i].label);
  }
  return out;
}

inline std::vector<ImpressionSample> load_behaviors(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<ImpressionSample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    out.push_back(parse_behavior_line(line, line_no));
  }
  return out;
}

inline void write_behaviors(const std::filesystem::path& path, const std::vector<ImpressionSample>& samples) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  for (const auto& s : samples) out << format_behavior_line(s) << '\n';
}

// Every history and candidate id must name a loaded news item.
inline void validate_impressions(const std::vector<ImpressionSample>& samples, const NewsTable& news) {
  for (const auto& s : samples) {
    for (const auto& id : s.history) {
      if (!news.contains(id)) throw ValidationError("impression " + s.impression_id + ": unknown history news '" + id + "'");
    }
    for (const auto& c : s.candidates) {
      if (!news.contains(c.news_id)) {
        throw ValidationError("impression " + s.impression_id + ": unknown candidate news '" + c.news_id + "'");
      }
    }
  }
}

}  // namespace mmrec
