#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "mmrec/config.hpp"
#include "mmrec/data/roi_file.hpp"
#include "mmrec/data/vocabulary.hpp"
#include "mmrec/errors.hpp"
#include "mmrec/model/mmrec_model.hpp"

namespace mmrec {

// Checkpoint directory:
//   manifest.json  config, vocabulary hash, parameter names/shapes/offsets,
//                  training step and a metric snapshot
//   params.mmrf    every parameter flattened into one 1 x N float32 row,
//                  in manifest order
//   vocab.txt      the vocabulary the token embeddings are indexed by
struct CheckpointFiles {
  std::filesystem::path dir;
  std::filesystem::path manifest() const { return dir / "manifest.json"; }
  std::filesystem::path params() const { return dir / "params.mmrf"; }
  std::filesystem::path vocab() const { return dir / "vocab.txt"; }
};

inline constexpr const char* kCheckpointFormat = "mmrec-checkpoint";
inline constexpr int kCheckpointVersion = 1;

inline std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline void save_checkpoint(const std::filesystem::path& dir, const MmRecModel& model, const ExperimentConfig& cfg,
                            const Vocabulary& vocab, long long step = 0,
                            const nlohmann::json& metrics = nlohmann::json::object()) {
  std::filesystem::create_directories(dir);
  const CheckpointFiles files{dir};
  const ParameterStore& store = model.parameters();
  nlohmann::json manifest;
  manifest["format"] = kCheckpointFormat;
  manifest["version"] = kCheckpointVersion;
  ExperimentConfig resolved = cfg;
  resolved.model = model.config();
  manifest["config"] = resolved.to_json();
  manifest["vocab_hash"] = hash_hex(vocab.hash());
  manifest["vocab_size"] = vocab.size();
  manifest["step"] = step;
  manifest["metrics"] = metrics;
  FeatureMatrix blob;
  blob.num_rows = 1;
  nlohmann::json params = nlohmann::json::array();
  for (std::size_t i = 0; i < store.size(); ++i) {
    const Parameter& p = store[i];
    params.push_back({{"name", p.name()}, {"shape", p.shape()}, {"offset", blob.values.size()}});
    for (double v : p.value().data()) blob.values.push_back(static_cast<float>(v));
  }
  blob.feat_dim = static_cast<std::uint32_t>(blob.values.size());
  manifest["parameters"] = params;
  manifest["num_scalars"] = blob.values.size();
  write_roi_features(files.params(), blob);
  vocab.save(files.vocab());
  std::ofstream out(files.manifest(), std::ios::trunc);
  if (!out) throw Error("cannot open " + files.manifest().string() + " for writing");
  out << manifest.dump(2) << '\n';
}

inline nlohmann::json read_manifest(const std::filesystem::path& dir) {
  const CheckpointFiles files{dir};
  std::ifstream in(files.manifest());
  if (!in) throw CheckpointError("missing " + files.manifest().string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("manifest.json is not valid JSON: " + std::string(e.what()));
  }
  if (!m.is_object() || !m.contains("format") || m["format"] != kCheckpointFormat) {
    throw CheckpointError("manifest.json is not an mmrec checkpoint manifest");
  }
  if (!m.contains("version") || m["version"] != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + m["version"].dump());
  }
  for (const char* key : {"config", "vocab_hash", "parameters", "step"}) {
    if (!m.contains(key)) throw CheckpointError(std::string("manifest.json lacks '") + key + "'");
  }
  return m;
}

// Copies the stored parameters into `model`. Every model parameter must be
// present exactly once with the same shape, and the checkpoint may not hold
// anything the model lacks.
inline void load_parameters(const std::filesystem::path& dir, MmRecModel& model) {
  const CheckpointFiles files{dir};
  const nlohmann::json manifest = read_manifest(dir);
  FeatureMatrix blob;
  try {
    blob = read_roi_features(files.params());
  } catch (const FormatError& e) {
    throw CheckpointError("params.mmrf: " + std::string(e.what()));
  } catch (const Error& e) {
    throw CheckpointError(e.what());
  }
  if (blob.num_rows != 1) throw CheckpointError("params.mmrf must hold a single row");
  struct Entry {
    Shape shape;
    std::size_t offset;
  };
  std::map<std::string, Entry> entries;
  try {
    for (const auto& p : manifest.at("parameters")) {
      const std::string name = p.at("name").get<std::string>();
      Entry e{p.at("shape").get<Shape>(), p.at("offset").get<std::size_t>()};
      if (!entries.emplace(name, e).second) throw CheckpointError("parameter '" + name + "' appears twice in the manifest");
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("malformed parameter list in manifest.json: " + std::string(e.what()));
  }
  ParameterStore& store = model.parameters();
  std::set<std::string> seen;
  for (std::size_t i = 0; i < store.size(); ++i) {
    Parameter& p = store[i];
    auto it = entries.find(p.name());
    if (it == entries.end()) throw CheckpointError("checkpoint lacks parameter '" + p.name() + "'");
    const Entry& e = it->second;
    if (e.shape != p.shape()) {
      throw CheckpointError("parameter '" + p.name() + "' has shape " + shape_string(e.shape) +
                            " in the checkpoint, the model expects " + shape_string(p.shape()));
    }
    if (e.offset + p.size() > blob.values.size()) {
      throw CheckpointError("parameter '" + p.name() + "' extends past the end of params.mmrf");
    }
    auto dst = p.value().data();
    for (std::size_t k = 0; k < p.size(); ++k) dst[k] = static_cast<double>(blob.values[e.offset + k]);
    seen.insert(p.name());
  }
  for (const auto& [name, e] : entries) {
    if (!seen.contains(name)) throw CheckpointError("checkpoint parameter '" + name + "' is not part of the model");
  }
}

struct LoadedCheckpoint {
  ExperimentConfig config;
  Vocabulary vocab;
  std::unique_ptr<MmRecModel> model;
  long long step = 0;
  nlohmann::json metrics;
};

namespace detail {

inline LoadedCheckpoint load_checkpoint_unchecked(const std::filesystem::path& dir) {
  const CheckpointFiles files{dir};
  const nlohmann::json manifest = read_manifest(dir);
  LoadedCheckpoint out;
  try {
    out.config = ExperimentConfig::from_json(manifest.at("config"));
  } catch (const ValidationError& e) {
    throw CheckpointError("manifest config: " + std::string(e.what()));
  }
  if (!std::filesystem::exists(files.vocab())) throw CheckpointError("missing " + files.vocab().string());
  out.vocab = Vocabulary::load(files.vocab());
  if (hash_hex(out.vocab.hash()) != manifest.at("vocab_hash").get<std::string>()) {
    throw CheckpointError("vocab.txt does not match the vocabulary hash in manifest.json");
  }
  out.step = manifest.at("step").get<long long>();
  out.metrics = manifest.value("metrics", nlohmann::json::object());
  out.model = std::make_unique<MmRecModel>(out.config.model, out.vocab.size(), 0);
  load_parameters(dir, *out.model);
  return out;
}

}  // namespace detail

// A manifest with the right keys but wrongly typed values surfaces as a
// CheckpointError like every other defect.
inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir) {
  try {
    return detail::load_checkpoint_unchecked(dir);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("malformed manifest.json: " + std::string(e.what()));
  }
}

}  // namespace mmrec
